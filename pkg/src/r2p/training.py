"""Training loop, learning-rate schedule, evaluation and the loss ablation."""
from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import metrics
from .config import write_kv
from .errors import CheckpointError, DimensionError, NumericalError, UsageError
from .model import LOSS_VARIANTS, LossSpec, ModelConfig, R2PModel, forward, load_checkpoint, loss, loss_spec, save_model
from .pointcloud import Dataset
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 2
    lr_initial: float = 2e-4
    alpha: float = 0.1
    loss: str = "l1"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    checkpoint_interval: int = 0  # epochs; 0 -> only at the end
    eval_interval: int = 0  # epochs; 0 -> no held-out passes during training
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 0 or self.epochs % 2:
            raise UsageError(f"epochs must be a non-negative even number (two-phase schedule), got {self.epochs}")
        if not self.lr_initial > 0:
            raise UsageError("lr_initial must be positive")
        if self.batch_size < 1:
            raise UsageError("batch_size must be at least 1")
        self.loss_spec  # validates the variant name

    @property
    def loss_spec(self) -> LossSpec:
        return loss_spec(self.loss, self.alpha)

    def as_dict(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "model"}
        out.update({f"model.{k}": v for k, v in asdict(self.model).items()})
        return out


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Constant for the first half of training, then linear decay reaching 0 at the last epoch."""
    if not 0 <= epoch < cfg.epochs:
        raise UsageError(f"epoch {epoch} outside [0, {cfg.epochs})")
    half = cfg.epochs // 2
    if epoch < half:
        return cfg.lr_initial
    return cfg.lr_initial * (1.0 - (epoch - half + 1) / half)


class Adam:
    def __init__(self, params: Sequence[Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * (g * g)
            if lr == 0.0:
                continue
            upd = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.replace_data(p.data - lr * upd)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"t": np.array(self.t)}
        for k in range(len(self.params)):
            out[f"m{k}"] = self.m[k]
            out[f"v{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays) -> None:
        self.t = int(arrays["t"])
        for k in range(len(self.params)):
            m, v = arrays[f"m{k}"], arrays[f"v{k}"]
            if m.shape != self.m[k].shape:
                raise CheckpointError("optimizer state does not match the model")
            self.m[k], self.v[k] = m.copy(), v.copy()


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    evaluations: list[tuple[int, float, float]] = field(default_factory=list)  # (epoch, cd, emd)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "loss", "lr", "seconds"])
            for r in self.epochs:
                w.writerow([r.epoch, repr(r.loss), repr(r.lr), f"{r.seconds:.3f}"])


CHECKPOINT_NAME = "model.r2pm"
STATE_NAME = "train_state.npz"


def _check_dims(model: R2PModel, ds: Dataset) -> None:
    if len(ds) == 0:
        return
    cfg = model.config
    for x, y in zip(ds.inputs, ds.targets):
        if x.shape != (cfg.n, 3) or y.shape != (cfg.m, 3):
            raise DimensionError(
                f"dataset sample shapes {x.shape}/{y.shape} do not match model n={cfg.n}, m={cfg.m}"
            )


def save_training_state(out_dir, model: R2PModel, opt: Adam, next_epoch: int, cfg: TrainConfig,
                        report: TrainReport) -> None:
    out_dir = Path(out_dir)
    save_model(out_dir / CHECKPOINT_NAME, model, cfg.loss_spec)
    arrays = opt.state_arrays()
    arrays["next_epoch"] = np.array(next_epoch)
    arrays["epoch_losses"] = np.array([r.loss for r in report.epochs])
    arrays["step_losses"] = np.array(report.step_losses)
    tmp = out_dir / (STATE_NAME + ".tmp.npz")
    np.savez(tmp, **arrays)
    os.replace(tmp, out_dir / STATE_NAME)


def train(model: R2PModel, dataset: Dataset, cfg: TrainConfig, out_dir=None, eval_data: Dataset | None = None,
          resume: bool = False, stop_after: int | None = None) -> TrainReport:
    """Optimise ``model`` in place with Adam on the two-block loss.

    Batches are reshuffled each epoch from ``(seed, epoch)``, so a run resumed
    from a checkpoint replays the same batches as an uninterrupted one.
    ``stop_after`` ends the run after that many epochs (used to exercise resume).
    """
    _check_dims(model, dataset)
    if model.config != cfg.model:
        raise UsageError("model architecture differs from cfg.model")
    spec = cfg.loss_spec
    opt = Adam(model.parameters(), cfg.beta1, cfg.beta2, cfg.adam_eps)
    report = TrainReport()
    start = 0
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_kv(out_dir / "config.txt", cfg.as_dict())
        if resume and (out_dir / STATE_NAME).exists():
            start, report = _resume(model, opt, out_dir, cfg)
    if cfg.epochs and len(dataset) == 0:
        raise UsageError("cannot train on an empty dataset")

    model.train()
    step = len(report.step_losses)
    for epoch in range(start, cfg.epochs):
        if stop_after is not None and epoch >= start + stop_after:
            break
        t0 = time.perf_counter()
        lr = lr_at(cfg, epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(dataset))
        losses = []
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            x, y = dataset.batch(idx)
            try:
                P_m, P_o = forward(model, x)
                L = loss(P_m, P_o, y, spec)
                model.zero_grad()
                backward(L)
                opt.step(lr)
            except NumericalError as e:
                snap = {"epoch": epoch, "step": step, "lr": lr, "indices": idx.tolist()}
                if out_dir is not None:
                    np.savez(out_dir / "abort_snapshot.npz", inputs=x, targets=y,
                             **{k: np.asarray(v) for k, v in snap.items()})
                raise NumericalError(f"non-finite value at epoch {epoch}, step {step} (lr={lr:g}): {e}", snap) from e
            losses.append(L.item())
            report.step_losses.append(losses[-1])
            step += 1
        rec = EpochRecord(epoch, float(np.mean(losses)), lr, time.perf_counter() - t0)
        report.epochs.append(rec)
        log.info("epoch %d loss %.6f lr %.3g (%.1fs)", epoch, rec.loss, lr, rec.seconds)
        if eval_data is not None and cfg.eval_interval and (epoch + 1) % cfg.eval_interval == 0:
            res = evaluate(model, eval_data)
            report.evaluations.append((epoch, res.mean_cd, res.mean_emd))
            model.train()
        if out_dir is not None:
            report.write_csv(out_dir / "train_report.csv")
            if cfg.checkpoint_interval and (epoch + 1) % cfg.checkpoint_interval == 0:
                save_training_state(out_dir, model, opt, epoch + 1, cfg, report)
    if out_dir is not None:
        report.write_csv(out_dir / "train_report.csv")
        done = report.epochs[-1].epoch + 1 if report.epochs else start
        save_training_state(out_dir, model, opt, done, cfg, report)
    return report


def _resume(model: R2PModel, opt: Adam, out_dir: Path, cfg: TrainConfig):
    saved, _ = load_checkpoint(out_dir / CHECKPOINT_NAME)
    if saved.config != model.config:
        raise CheckpointError("checkpoint architecture differs from the configured model")
    for (_, dst), (_, src) in zip(model.named_parameters(), saved.named_parameters()):
        dst.replace_data(src.data)
    for (_, dst), (_, src) in zip(model.batchnorm_layers(), saved.batchnorm_layers()):
        dst.running_mean, dst.running_var = src.running_mean, src.running_var
    with np.load(out_dir / STATE_NAME) as z:
        arrays = {k: z[k] for k in z.files}
    opt.load_state_arrays(arrays)
    start = int(arrays["next_epoch"])
    report = TrainReport(step_losses=[float(v) for v in arrays["step_losses"]])
    # wall-clock of earlier epochs is not kept
    for e, v in enumerate(arrays["epoch_losses"]):
        report.epochs.append(EpochRecord(e, float(v), lr_at(cfg, e), float("nan")))
    return start, report


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    rows: list[tuple[int, float, float]]
    emd_method: str

    @property
    def mean_cd(self) -> float:
        return float(np.mean([r[1] for r in self.rows]))

    @property
    def mean_emd(self) -> float:
        return float(np.mean([r[2] for r in self.rows]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["sample_id", "cd", "emd"])
            for sid, cd, emd in self.rows:
                w.writerow([sid, repr(cd), repr(emd)])


def predict(model: R2PModel, x: np.ndarray) -> np.ndarray:
    """Eval-mode output cloud(s) for input (B, n, 3); restores the previous mode."""
    prev = model.mode
    model.eval()
    try:
        with no_grad():
            _, P_o = forward(model, x)
    finally:
        model.mode = prev
    return P_o.numpy()


def evaluate(model, dataset: Dataset, cap: int = metrics.EXACT_CAP, out_csv=None,
             eps: float | None = None) -> EvalResult:
    """Per-sample CD and EMD between the output cloud and the ground truth.

    ``model`` is an ``R2PModel`` or any callable mapping a (1, n, 3) input
    to a (1, m, 3) output.  EMD is exact up to ``cap`` points and from the
    auction solver above; ``EvalResult.emd_method`` records which.
    """
    if len(dataset) == 0:
        raise UsageError("cannot evaluate on an empty dataset")
    if isinstance(model, R2PModel):
        _check_dims(model, dataset)
        run: Callable = lambda x: predict(model, x)
    else:
        run = model
    rows = []
    method = "hungarian"
    for i in range(len(dataset)):
        x, y = dataset.batch([i])
        out = np.asarray(run(x))[0]
        gt = y[0]
        cd = metrics.chamfer(out, gt)
        if len(out) <= cap:
            match = metrics.emd_exact(out, gt, cap)
        else:
            match = metrics.emd_approx(out, gt, eps)
            method = "auction"
        rows.append((i, cd, match.cost))
    res = EvalResult(rows, method)
    if out_csv is not None:
        res.write_csv(out_csv)
    return res


# --------------------------------------------------------------------------
# loss ablation


@dataclass
class AblationTable:
    """Held-out CD/EMD per loss variant: per-seed values and their medians."""

    per_seed: dict[str, list[tuple[int, float, float]]]

    def median(self, variant: str) -> tuple[float, float]:
        rows = self.per_seed[variant]
        return float(np.median([r[1] for r in rows])), float(np.median([r[2] for r in rows]))

    @property
    def variants(self) -> list[str]:
        return list(self.per_seed)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["variant", "cd", "emd"])
            for v in self.variants:
                cd, emd = self.median(v)
                w.writerow([v.upper(), repr(cd), repr(emd)])

    def write_seed_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["variant", "seed", "cd", "emd"])
            for v in self.variants:
                for seed, cd, emd in self.per_seed[v]:
                    w.writerow([v.upper(), seed, repr(cd), repr(emd)])

    def format(self) -> str:
        lines = [f"{'variant':8s} {'cd':>10s} {'emd':>10s}"]
        for v in self.variants:
            cd, emd = self.median(v)
            lines.append(f"{v.upper():8s} {cd:10.5f} {emd:10.5f}")
        return "\n".join(lines)


def ablate_losses(train_data: Dataset, test_data: Dataset, cfg_base: TrainConfig, seeds: Sequence[int] = (0,),
                  variants: Sequence[str] = tuple(LOSS_VARIANTS), out_dir=None) -> AblationTable:
    """Train one model per (variant, seed) with everything else fixed and evaluate on ``test_data``."""
    per_seed: dict[str, list] = {v: [] for v in variants}
    for seed in seeds:
        for v in variants:
            cfg = replace(cfg_base, loss=v, seed=seed)
            model = R2PModel(cfg.model, seed=seed)
            run_dir = None if out_dir is None else Path(out_dir) / f"{v}_seed{seed}"
            t0 = time.perf_counter()
            train(model, train_data, cfg, out_dir=run_dir)
            res = evaluate(model, test_data, out_csv=None if run_dir is None else run_dir / "eval.csv")
            per_seed[v].append((seed, res.mean_cd, res.mean_emd))
            log.info("ablation %s seed %d: cd %.5f emd %.5f (%.0fs)", v, seed, res.mean_cd, res.mean_emd,
                     time.perf_counter() - t0)
    table = AblationTable(per_seed)
    if out_dir is not None:
        table.write_csv(Path(out_dir) / "ablation.csv")
        table.write_seed_csv(Path(out_dir) / "ablation_per_seed.csv")
    return table
