"""The two-block encoder-decoder generator and its training loss.

Block 1 maps the coarse input cloud (B, n, 3) to an intermediate cloud
(B, m, 3); block 2 maps that intermediate cloud to the output (B, m, 3).
Each block is

    encoder: shared MLP (3 -> h1 -> h2) -> max-pool -> concat global ->
             shared MLP (2*h2 -> h3 -> h4) -> max-pool
    decoder: FC (h4 -> d1) -> ReLU -> FC (d1 -> d2) -> ReLU -> FC (d2 -> 3m) -> reshape

The two blocks have the same architecture but separate weights.
"""
from __future__ import annotations

import io
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import metrics
from .errors import CheckpointError, DataError, DimensionError, UsageError
from .tensor import (
    BatchNormState,
    Tensor,
    add,
    batchnorm,
    concat_global,
    custom,
    linear,
    max_pool_points,
    permute_points,
    read_tensor_array,
    relu,
    reshape,
    scale,
    write_tensor,
)

METRICS = ("cd", "emd", "cd+emd")


@dataclass(frozen=True)
class ModelConfig:
    n: int = 256
    m: int = 1024
    h1: int = 128
    h2: int = 256
    h3: int = 512
    h4: int = 1024
    d1: int = 1024
    d2: int = 1024
    use_batchnorm: bool = True
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        for f in ("n", "m", "h1", "h2", "h3", "h4", "d1", "d2"):
            if getattr(self, f) <= 0:
                raise DimensionError(f"model width {f} must be positive, got {getattr(self, f)}")


@dataclass(frozen=True)
class LossSpec:
    """Which distance plays d1 (intermediate cloud) and d2 (output cloud), and the weight alpha."""

    d1: str = "cd"
    d2: str = "cd"
    alpha: float = 0.1
    squared_cd: bool = False
    emd_cap: int = metrics.EXACT_CAP

    def __post_init__(self):
        for d in (self.d1, self.d2):
            if d not in METRICS:
                raise UsageError(f"unknown distance {d!r}; choose from {METRICS}")
        if self.alpha < 0:
            raise UsageError("alpha must be non-negative")

    def uses_emd(self) -> bool:
        return "emd" in self.d1 or ("emd" in self.d2 and self.alpha != 0)


# L1..L5 ablation variants
LOSS_VARIANTS = {
    "l1": ("cd", "cd"),
    "l2": ("emd", "emd"),
    "l3": ("cd+emd", "cd+emd"),
    "l4": ("cd", "emd"),
    "l5": ("emd", "cd"),
}


def loss_spec(name: str, alpha: float = 0.1, **kw) -> LossSpec:
    try:
        d1, d2 = LOSS_VARIANTS[name.lower()]
    except KeyError:
        raise UsageError(f"unknown loss variant {name!r}; choose from {sorted(LOSS_VARIANTS)}") from None
    return LossSpec(d1, d2, alpha, **kw)


# --------------------------------------------------------------------------
# parameters


class LinearParams:
    def __init__(self, din: int, dout: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(din)
        self.W = Tensor(rng.uniform(-bound, bound, (din, dout)), requires_grad=True)
        self.b = Tensor(rng.uniform(-bound, bound, dout), requires_grad=True)

    def __call__(self, x):
        return linear(x, self.W, self.b)

    def parameters(self, prefix):
        return [(prefix + ".W", self.W), (prefix + ".b", self.b)]


class BatchNormParams:
    def __init__(self, dim: int, momentum: float, eps: float):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.state = BatchNormState(dim, momentum, eps)

    def __call__(self, x, mode):
        return batchnorm(x, self.gamma, self.beta, mode, self.state)

    def parameters(self, prefix):
        return [(prefix + ".gamma", self.gamma), (prefix + ".beta", self.beta)]


class SharedMLP:
    """Two per-point linear layers with batch norm and ReLU in between."""

    def __init__(self, din, dhid, dout, cfg: ModelConfig, rng):
        self.fc1 = LinearParams(din, dhid, rng)
        self.bn = BatchNormParams(dhid, cfg.bn_momentum, cfg.bn_eps) if cfg.use_batchnorm else None
        self.fc2 = LinearParams(dhid, dout, rng)

    def __call__(self, x, mode):
        h = self.fc1(x)
        if self.bn is not None:
            h = self.bn(h, mode)
        return self.fc2(relu(h))

    def parameters(self, prefix):
        out = self.fc1.parameters(prefix + ".fc1")
        if self.bn is not None:
            out += self.bn.parameters(prefix + ".bn")
        return out + self.fc2.parameters(prefix + ".fc2")


class EncoderParams:
    def __init__(self, cfg: ModelConfig, rng):
        self.mlp1 = SharedMLP(3, cfg.h1, cfg.h2, cfg, rng)
        self.mlp2 = SharedMLP(2 * cfg.h2, cfg.h3, cfg.h4, cfg, rng)

    def parameters(self, prefix):
        return self.mlp1.parameters(prefix + ".mlp1") + self.mlp2.parameters(prefix + ".mlp2")


class DecoderParams:
    def __init__(self, cfg: ModelConfig, rng):
        self.m = cfg.m
        self.fc1 = LinearParams(cfg.h4, cfg.d1, rng)
        self.fc2 = LinearParams(cfg.d1, cfg.d2, rng)
        self.fc3 = LinearParams(cfg.d2, 3 * cfg.m, rng)

    def parameters(self, prefix):
        return (
            self.fc1.parameters(prefix + ".fc1")
            + self.fc2.parameters(prefix + ".fc2")
            + self.fc3.parameters(prefix + ".fc3")
        )


class Block:
    def __init__(self, cfg: ModelConfig, rng):
        self.encoder = EncoderParams(cfg, rng)
        self.decoder = DecoderParams(cfg, rng)

    def parameters(self, prefix):
        return self.encoder.parameters(prefix + ".encoder") + self.decoder.parameters(prefix + ".decoder")


class R2PModel:
    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.block1 = Block(self.config, rng)
        self.block2 = Block(self.config, rng)
        self.mode = "train"

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """All trainable tensors in declaration order (the checkpoint order)."""
        return self.block1.parameters("block1") + self.block2.parameters("block2")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def batchnorm_layers(self) -> list[tuple[str, BatchNormState]]:
        out = []
        for bname, block in (("block1", self.block1), ("block2", self.block2)):
            for mname, mlp in (("mlp1", block.encoder.mlp1), ("mlp2", block.encoder.mlp2)):
                if mlp.bn is not None:
                    out.append((f"{bname}.encoder.{mname}.bn", mlp.bn.state))
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, P_r):
        return forward(self, P_r)


# --------------------------------------------------------------------------
# forward


def canonical_order(points: np.ndarray) -> np.ndarray:
    """Per-sample lexicographic (x, y, z) ordering of a (B, N, 3) array."""
    return np.stack([np.lexsort((p[:, 2], p[:, 1], p[:, 0])) for p in points])


def encode(block: EncoderParams, pc, mode: str = "train") -> Tensor:
    """Global feature (B, h4) of a (B, N, 3) cloud.

    Points are processed in a canonical order, which leaves the result
    mathematically unchanged and makes it bit-identical under any input
    permutation (BLAS row blocking would otherwise perturb the last bits).
    """
    pc = pc if isinstance(pc, Tensor) else Tensor(pc)
    if pc.data.ndim != 3 or pc.shape[2] != 3:
        raise DimensionError(f"encoder expects (B, N, 3) points, got {pc.shape}")
    x = permute_points(pc, canonical_order(pc.data))
    F = block.mlp1(x, mode)
    g, _ = max_pool_points(F)
    Fp = block.mlp2(concat_global(F, g), mode)
    gf, _ = max_pool_points(Fp)
    return gf


def decode(block: DecoderParams, g, m: int | None = None) -> Tensor:
    g = g if isinstance(g, Tensor) else Tensor(g)
    m = block.m if m is None else m
    if m != block.m:
        raise DimensionError(f"decoder was built for m={block.m}, asked for m={m}")
    if g.data.ndim != 2 or g.shape[1] != block.fc1.W.shape[0]:
        raise DimensionError(f"decoder expects (B, {block.fc1.W.shape[0]}) features, got {g.shape}")
    B = g.shape[0]
    h = reshape(g, (B, 1, g.shape[1]))
    h = relu(block.fc1(h))
    h = relu(block.fc2(h))
    h = block.fc3(h)
    return reshape(h, (B, m, 3))


def forward(model: R2PModel, P_r):
    """Return ``(P_m, P_o)``, both (B, m, 3)."""
    P_r = P_r if isinstance(P_r, Tensor) else Tensor(P_r)
    if P_r.data.ndim != 3 or P_r.shape[1:] != (model.config.n, 3):
        raise DimensionError(f"model expects input (B, {model.config.n}, 3), got {P_r.shape}")
    mode = model.mode
    P_m = decode(model.block1.decoder, encode(model.block1.encoder, P_r, mode))
    P_o = decode(model.block2.decoder, encode(model.block2.encoder, P_m, mode))
    return P_m, P_o


# --------------------------------------------------------------------------
# loss


def _distance_and_grad(pred: np.ndarray, gt: np.ndarray, metric: str, spec: LossSpec):
    value, grad = 0.0, np.zeros_like(pred)
    if "cd" in metric:
        v, g = metrics.chamfer_value_and_grad(pred, gt, squared=spec.squared_cd)
        value += v
        grad += g
    if "emd" in metric:
        match = metrics.emd(pred, gt, cap=spec.emd_cap)
        value += match.cost
        grad += metrics.emd_grad(pred, gt, match)
    return value, grad


def cloud_distance(pred: Tensor, gt, metric: str, spec: LossSpec) -> Tensor:
    """Batch mean of ``metric(pred[b], gt[b])`` as a differentiable scalar."""
    gt = np.asarray(getattr(gt, "data", gt), dtype=np.float64)
    if pred.data.ndim != 3 or gt.ndim != 3 or pred.shape[0] != gt.shape[0]:
        raise DimensionError(f"loss expects (B, m, 3) clouds, got {pred.shape} and {gt.shape}")
    B = pred.shape[0]
    total = 0.0
    grad = np.empty_like(pred.data)
    for b in range(B):
        v, g = _distance_and_grad(pred.data[b], gt[b], metric, spec)
        total += v
        grad[b] = g
    grad /= B
    return custom(np.asarray(total / B), (pred,), lambda g: (grad * float(g),), metric)


def loss(P_m: Tensor, P_o: Tensor, P_gt, spec: LossSpec | None = None) -> Tensor:
    """``d1(P_m, P_gt) + alpha * d2(P_o, P_gt)``, averaged over the batch."""
    spec = spec or LossSpec()
    P_m = P_m if isinstance(P_m, Tensor) else Tensor(P_m)
    P_o = P_o if isinstance(P_o, Tensor) else Tensor(P_o)
    first = cloud_distance(P_m, P_gt, spec.d1, spec)
    if spec.alpha == 0:
        return first
    return add(first, scale(cloud_distance(P_o, P_gt, spec.d2, spec), spec.alpha))


# --------------------------------------------------------------------------
# checkpoints: b"R2PM", u32 version, u32 len + key=value metadata,
# u32 tensor count, then (u16 len + name, R2PT tensor) per entry

CHECKPOINT_MAGIC = b"R2PM"
CHECKPOINT_VERSION = 1


def _metadata(model: R2PModel, spec: LossSpec | None) -> dict[str, str]:
    meta = {k: str(v) for k, v in asdict(model.config).items()}
    meta["seed"] = str(model.seed)
    if spec is not None:
        meta.update({f"loss.{k}": str(v) for k, v in asdict(spec).items()})
    return meta


def _entries(model: R2PModel):
    out = [(name, t.data) for name, t in model.named_parameters()]
    for name, st in model.batchnorm_layers():
        if st.populated:
            out.append((name + ".running_mean", st.running_mean))
            out.append((name + ".running_var", st.running_var))
    return out


def model_to_bytes(model: R2PModel, spec: LossSpec | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    meta = "".join(f"{k}={v}\n" for k, v in _metadata(model, spec).items()).encode()
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    entries = _entries(model)
    buf.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        write_tensor(buf, arr)
    return buf.getvalue()


def save_model(path, model: R2PModel, spec: LossSpec | None = None) -> None:
    data = model_to_bytes(model, spec)
    with open(path, "wb") as f:
        f.write(data)


def _parse_config(meta: dict[str, str]) -> ModelConfig:
    kw = {}
    for f in fields(ModelConfig):
        if f.name not in meta:
            raise CheckpointError(f"checkpoint metadata lacks {f.name!r}")
        raw = meta[f.name]
        if f.type in ("bool", bool):
            kw[f.name] = raw == "True"
        elif f.type in ("float", float):
            kw[f.name] = float(raw)
        else:
            kw[f.name] = int(raw)
    return ModelConfig(**kw)


def _parse_spec(meta: dict[str, str]) -> LossSpec | None:
    if "loss.d1" not in meta:
        return None
    return LossSpec(
        meta["loss.d1"],
        meta["loss.d2"],
        float(meta["loss.alpha"]),
        meta["loss.squared_cd"] == "True",
        int(meta["loss.emd_cap"]),
    )


def model_from_bytes(raw: bytes) -> tuple[R2PModel, LossSpec | None]:
    f = io.BytesIO(raw)

    def take(n):
        chunk = f.read(n)
        if len(chunk) != n:
            raise CheckpointError("truncated checkpoint")
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    (mlen,) = struct.unpack("<I", take(4))
    try:
        lines = take(mlen).decode().splitlines()
        meta = dict(line.split("=", 1) for line in lines if line)
        config = _parse_config(meta)
        spec = _parse_spec(meta)
        seed = int(meta.get("seed", 0))
    except (ValueError, UnicodeDecodeError, DimensionError, UsageError) as e:
        raise CheckpointError(f"bad checkpoint metadata: {e}") from e
    (count,) = struct.unpack("<I", take(4))
    stored = {}
    order = []
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        try:
            stored[name] = read_tensor_array(f)
        except DataError as e:
            raise CheckpointError(f"tensor {name!r}: {e}") from e
        order.append(name)
    if f.read(1):
        raise CheckpointError("trailing bytes after the last tensor")

    model = R2PModel(config, seed)
    expected = model.named_parameters()
    if order[: len(expected)] != [n for n, _ in expected]:
        raise CheckpointError("checkpoint parameter names/order do not match the architecture")
    buffers = {f"{name}.{k}" for name, _ in model.batchnorm_layers() for k in ("running_mean", "running_var")}
    unknown = set(order[len(expected):]) - buffers
    if unknown:
        raise CheckpointError(f"unexpected checkpoint entries: {sorted(unknown)}")
    for name, t in expected:
        arr = stored[name]
        if arr.shape != t.shape:
            raise CheckpointError(f"{name}: stored shape {arr.shape} but architecture needs {t.shape}")
        t.replace_data(arr)
    for name, st in model.batchnorm_layers():
        rm, rv = stored.get(name + ".running_mean"), stored.get(name + ".running_var")
        if (rm is None) != (rv is None):
            raise CheckpointError(f"{name}: incomplete running statistics")
        if rm is not None:
            if rm.shape != (st.dim,) or rv.shape != (st.dim,):
                raise CheckpointError(f"{name}: running statistics have the wrong width")
            st.running_mean, st.running_var = rm.copy(), rv.copy()
    return model, spec


def load_model(path) -> R2PModel:
    return load_checkpoint(path)[0]


def load_checkpoint(path) -> tuple[R2PModel, LossSpec | None]:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return model_from_bytes(raw)
