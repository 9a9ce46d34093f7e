"""Command-line entry point: ``r2p {synth,train,eval,ablate,export,metrics}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.
Set ``R2P_NUM_THREADS`` to cap the BLAS thread pool.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path


from . import metrics
from .config import write_kv
from .errors import (
    CapacityError,
    CheckpointError,
    ContractError,
    DataError,
    DimensionError,
    EmptyInputError,
    NumericalError,
    UsageError,
)
from .model import LOSS_VARIANTS, ModelConfig, R2PModel, load_checkpoint
from .pointcloud import (
    PointCloud,
    Source,
    denormalize,
    normalize,
    read_cloud,
    read_dataset,
    resample,
    write_cloud,
)
from .synth import CATEGORIES, CorruptionSpec, SynthConfig, build_dataset
from .training import TrainConfig, ablate_losses, evaluate, predict, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
THREADS_ENV = "R2P_NUM_THREADS"
WIDTH_FIELDS = ("h1", "h2", "h3", "h4", "d1", "d2")

log = logging.getLogger("r2p")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _categories(text: str) -> tuple[str, ...]:
    cats = tuple(t.strip() for t in text.split(",") if t.strip())
    bad = [c for c in cats if c not in CATEGORIES]
    if not cats or bad:
        raise argparse.ArgumentTypeError(f"categories must be drawn from {','.join(CATEGORIES)}")
    return cats


def _widths(text: str) -> dict[str, int]:
    vals = _int_list(text)
    if len(vals) != len(WIDTH_FIELDS):
        raise argparse.ArgumentTypeError("--widths takes six integers: h1,h2,h3,h4,d1,d2")
    return dict(zip(WIDTH_FIELDS, vals))


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--batch", type=int, default=d.batch_size)
    p.add_argument("--lr", type=float, default=d.lr_initial, help="initial learning rate")
    p.add_argument("--alpha", type=float, default=d.alpha, help="weight of the second-block loss")
    p.add_argument("--n", type=int, default=None, help="input points (default: from the dataset)")
    p.add_argument("--m", type=int, default=None, help="output points (default: from the dataset)")
    p.add_argument("--widths", type=_widths, default=None, metavar="H1,H2,H3,H4,D1,D2")
    p.add_argument("--no-batchnorm", action="store_true")
    p.add_argument("--holdout", type=int, default=None,
                   help="samples held out from the end of the dataset (default: one in fifteen)")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="r2p", description="Two-block point cloud reconstruction: data, training, evaluation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--category", type=_categories, required=True, help="one category or a comma list")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--out", required=True, help="output .r2pd file")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--corruption-file", default=None, help="key=value corruption overrides")
    s.add_argument("--n", type=int, default=SynthConfig.n)
    s.add_argument("--m", type=int, default=SynthConfig.m)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--loss", choices=sorted(LOSS_VARIANTS), default="l1")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--checkpoint-interval", type=int, default=0)
    t.add_argument("--resume", action="store_true")
    _add_train_flags(t)

    e = sub.add_parser("eval", help="per-sample CD and EMD of a trained model")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="output CSV")
    e.add_argument("--cap", type=int, default=metrics.EXACT_CAP, help="largest cloud solved exactly for EMD")

    a = sub.add_parser("ablate", help="train and compare the five loss variants")
    a.add_argument("--data", required=True)
    a.add_argument("--out-dir", required=True)
    a.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    a.add_argument("--variants", default=",".join(LOSS_VARIANTS))
    _add_train_flags(a)

    x = sub.add_parser("export", help="run a model on one cloud and write the output")
    x.add_argument("--model", required=True)
    x.add_argument("--input", required=True, help=".xyz or .ply cloud")
    x.add_argument("--out", required=True, help=".ply or .xyz output")
    x.add_argument("--seed", type=int, default=0, help="resampling seed when the cloud size differs from n")

    mt = sub.add_parser("metrics", help="CD and EMD between two cloud files")
    mt.add_argument("--a", required=True)
    mt.add_argument("--b", required=True)
    return p


# --------------------------------------------------------------------------


def _echo(args, path=None) -> None:
    """Print the resolved settings and, with ``path``, store them as key=value."""
    settings = {}
    for k, v in vars(args).items():
        if isinstance(v, dict):
            v = ",".join(str(x) for x in v.values())
        elif isinstance(v, (list, tuple)):
            v = ",".join(map(str, v))
        settings[k] = v
    for k, v in settings.items():
        print(f"# {k}={v}", file=sys.stderr)
    if path is not None:
        write_kv(path, settings)


def _holdout(args, count: int) -> int:
    return round(count / 15) if args.holdout is None else args.holdout


def _train_config(args, ds, loss_name: str, seed: int) -> TrainConfig:
    n = ds.n if args.n is None else args.n
    m = ds.m if args.m is None else args.m
    if (n, m) != (ds.n, ds.m):
        raise DimensionError(f"dataset holds n={ds.n}, m={ds.m} but --n {n} --m {m} was given")
    model = ModelConfig(n=n, m=m, use_batchnorm=not args.no_batchnorm, **(args.widths or {}))
    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        lr_initial=args.lr,
        alpha=args.alpha,
        loss=loss_name,
        seed=seed,
        model=model,
        checkpoint_interval=getattr(args, "checkpoint_interval", 0),
    )


def cmd_synth(args) -> int:
    corruption = CorruptionSpec() if args.corruption_file is None else CorruptionSpec.from_file(args.corruption_file)
    cfg = SynthConfig(categories=args.category, count=args.count, n=args.n, m=args.m, seed=args.seed,
                      corruption=corruption)
    for k, v in cfg.as_dict().items():
        print(f"# {k}={v}", file=sys.stderr)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    ds = build_dataset(cfg, args.out)
    print(f"wrote {len(ds)} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    ds = read_dataset(args.data)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _echo(args, out / "command.txt")
    cfg = _train_config(args, ds, args.loss, args.seed)
    train_ds, test_ds = ds.split(_holdout(args, len(ds)))
    model = R2PModel(cfg.model, seed=cfg.seed)
    report = train(model, train_ds, cfg, out_dir=out, resume=args.resume)
    if report.epochs:
        print(f"final epoch loss {report.epochs[-1].loss:.6g}")
    else:
        print("no epochs run")
    if len(test_ds) and report.epochs:
        res = evaluate(model, test_ds, out_csv=out / "eval.csv")
        print(f"held-out cd={res.mean_cd:.6g} emd={res.mean_emd:.6g} ({len(test_ds)} samples, emd {res.emd_method})")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.model)
    ds = read_dataset(args.data)
    _echo(args, str(args.out) + ".command.txt")
    res = evaluate(model, ds, cap=args.cap, out_csv=args.out)
    print(f"cd={res.mean_cd:.6g} emd={res.mean_emd:.6g} samples={len(res.rows)} emd_method={res.emd_method}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    ds = read_dataset(args.data)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _echo(args, out / "command.txt")
    variants = [v.strip().lower() for v in args.variants.split(",") if v.strip()]
    unknown = [v for v in variants if v not in LOSS_VARIANTS]
    if unknown:
        raise UsageError(f"unknown loss variants {unknown}")
    cfg = _train_config(args, ds, variants[0], args.seeds[0] if args.seeds else 0)
    train_ds, test_ds = ds.split(_holdout(args, len(ds)))
    if len(test_ds) == 0:
        raise UsageError("ablation needs held-out samples (--holdout > 0)")
    table = ablate_losses(train_ds, test_ds, cfg, seeds=args.seeds, variants=variants, out_dir=out)
    print(table.format())
    return EXIT_OK


def cmd_export(args) -> int:
    model, _ = load_checkpoint(args.model)
    pc = read_cloud(args.input, source=Source.UNION_INPUT)
    if len(pc) != model.config.n:
        pc = resample(pc, model.config.n, args.seed)
    pc_n, centroid, scale = normalize(pc)
    out = predict(model, pc_n.points[None])[0]
    world = denormalize(PointCloud(out, Source.OUTPUT), centroid, scale)
    write_cloud(args.out, world)
    print(f"wrote {len(world)} points to {args.out}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    a, b = read_cloud(args.a), read_cloud(args.b)
    cd = metrics.chamfer(a, b)
    if len(a) == len(b):
        match = metrics.emd(a, b)
        print(f"cd={cd:.9g} emd={match.cost:.9g}")
        if match.method != "hungarian":
            print(f"# emd from the auction solver, within {match.eps_final:.3g} of optimal", file=sys.stderr)
    else:
        print(f"cd={cd:.9g} emd=nan")
        print(f"# emd needs equal point counts ({len(a)} vs {len(b)})", file=sys.stderr)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "export": cmd_export,
    "metrics": cmd_metrics,
}


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, n))


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
        with _thread_limit():
            return COMMANDS[args.command](args)
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    except NumericalError as e:
        print(f"r2p: numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, CheckpointError, OSError) as e:
        print(f"r2p: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (UsageError, DimensionError, ContractError, CapacityError, EmptyInputError) as e:
        print(f"r2p: {e}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
