"""Synthetic (coarse input, ground truth) pairs.

Objects are unions of axis-aligned cuboids (in the object frame) standing
on the floor, then yawed and shifted inside a square arena.  Four depth
cameras sit at the midpoints of the arena edges looking at its centre.
Their renderings are corrupted (dropout, ghost returns, depth jitter,
pose error, smooth warp) before being back-projected and merged.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.spatial.transform import Rotation

from .config import read_kv, write_kv
from .errors import EmptyInputError, UsageError
from .pointcloud import (
    Camera,
    Dataset,
    DepthImage,
    Intrinsics,
    PointCloud,
    Pose,
    Source,
    ViewSet,
    normalize,
    normalize_with,
    project_cloud,
    resample,
    union_views,
    write_dataset,
)

log = logging.getLogger(__name__)

CATEGORIES = ("box", "l_shape", "chair_like", "desk_like", "car_like")

ARENA_SIZE = 3.0  # side of the camera square, metres
CAMERA_HEIGHT = 1.1
TARGET_HEIGHT = 0.35
FOV_DEG = 60.0
RENDER_DENSITY = 60000.0  # surface samples per m^2 used for rendering


@dataclass(frozen=True)
class Cuboid:
    center: tuple[float, float, float]
    size: tuple[float, float, float]

    @property
    def half(self) -> np.ndarray:
        return np.asarray(self.size) / 2.0

    def faces(self):
        """(normal axis, sign, area) for the six faces."""
        sx, sy, sz = self.size
        areas = {0: sy * sz, 1: sx * sz, 2: sx * sy}
        return [(ax, s, areas[ax]) for ax in range(3) for s in (-1.0, 1.0)]


@dataclass(frozen=True)
class ObjectSpec:
    category: str
    parts: tuple[Cuboid, ...]
    yaw: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise UsageError(f"unknown category {self.category!r}; choose from {CATEGORIES}")
        if not self.parts:
            raise UsageError("object needs at least one part")
        for p in self.parts:
            if min(p.size) <= 0:
                raise UsageError(f"part dimensions must be positive, got {p.size}")
        if self.radius() + max(abs(self.translation[0]), abs(self.translation[1])) >= ARENA_SIZE / 2 - 0.3:
            raise UsageError("object does not fit inside the camera square")

    def radius(self) -> float:
        """Horizontal radius of the object footprint about its own origin."""
        r = 0.0
        for p in self.parts:
            c, h = np.asarray(p.center), p.half
            for sx in (-1, 1):
                for sy in (-1, 1):
                    r = max(r, float(np.hypot(c[0] + sx * h[0], c[1] + sy * h[1])))
        return r

    @property
    def rotation(self) -> np.ndarray:
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def to_world(self, pts: np.ndarray) -> np.ndarray:
        t = np.array([self.translation[0], self.translation[1], 0.0])
        return pts @ self.rotation.T + t

    def to_object(self, pts: np.ndarray) -> np.ndarray:
        t = np.array([self.translation[0], self.translation[1], 0.0])
        return (pts - t) @ self.rotation

    def area(self) -> float:
        return sum(a for p in self.parts for _, _, a in p.faces())

    def signed_distance(self, pts: np.ndarray) -> np.ndarray:
        """Signed distance of world points to the union of the parts (negative inside)."""
        local = self.to_object(np.asarray(pts, dtype=np.float64))
        return np.min([_box_sdf(local, p) for p in self.parts], axis=0)


def _box_sdf(pts: np.ndarray, box: Cuboid) -> np.ndarray:
    q = np.abs(pts - np.asarray(box.center)) - box.half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(q.max(axis=1), 0.0)
    return outside + inside


def _legs(x: float, y: float, height: float, thick: float) -> list[Cuboid]:
    return [
        Cuboid((sx * (x / 2 - thick / 2), sy * (y / 2 - thick / 2), height / 2), (thick, thick, height))
        for sx in (-1, 1)
        for sy in (-1, 1)
    ]


def make_parts(category: str, rng: np.random.Generator) -> tuple[Cuboid, ...]:
    u = rng.uniform
    if category == "box":
        sx, sy, sz = u(0.35, 0.8), u(0.35, 0.8), u(0.3, 0.7)
        return (Cuboid((0.0, 0.0, sz / 2), (sx, sy, sz)),)
    if category == "l_shape":
        long_x, wide, h = u(0.6, 0.9), u(0.2, 0.3), u(0.25, 0.5)
        long_y = u(0.5, 0.8)
        a = Cuboid((0.0, -long_y / 2 + wide / 2, h / 2), (long_x, wide, h))
        b = Cuboid((-long_x / 2 + wide / 2, wide / 2, h / 2), (wide, long_y - wide, h))
        return (a, b)
    if category == "chair_like":
        w, d, seat_h = u(0.4, 0.55), u(0.4, 0.55), u(0.4, 0.5)
        t, leg = 0.05, 0.04
        back_h = u(0.35, 0.5)
        parts = _legs(w, d, seat_h - t, leg)
        parts.append(Cuboid((0.0, 0.0, seat_h - t / 2), (w, d, t)))
        parts.append(Cuboid((0.0, d / 2 - t / 2, seat_h + back_h / 2), (w, t, back_h)))
        return tuple(parts)
    if category == "desk_like":
        w, d, h = u(0.8, 1.1), u(0.5, 0.7), u(0.65, 0.75)
        t, leg = 0.04, 0.05
        parts = _legs(w, d, h - t, leg)
        parts.append(Cuboid((0.0, 0.0, h - t / 2), (w, d, t)))
        return tuple(parts)
    if category == "car_like":
        length, width, body_h = u(0.8, 1.1), u(0.4, 0.5), u(0.2, 0.3)
        clear = 0.05
        cab_l, cab_h = u(0.4, 0.55) * length, u(0.15, 0.22)
        body = Cuboid((0.0, 0.0, clear + body_h / 2), (length, width, body_h))
        cabin = Cuboid((-0.05 * length, 0.0, clear + body_h + cab_h / 2), (cab_l, 0.85 * width, cab_h))
        wheels = [
            Cuboid((sx * length * 0.32, sy * (width / 2 - 0.04), clear), (0.14, 0.08, 2 * clear))
            for sx in (-1, 1)
            for sy in (-1, 1)
        ]
        return tuple([body, cabin] + wheels)
    raise UsageError(f"unknown category {category!r}; choose from {CATEGORIES}")


def random_object(category: str, rng: np.random.Generator, max_offset: float = 0.2) -> ObjectSpec:
    parts = make_parts(category, rng)
    yaw = float(rng.uniform(0, 2 * np.pi))
    tx, ty = rng.uniform(-max_offset, max_offset, 2)
    return ObjectSpec(category, parts, yaw, (float(tx), float(ty)))


def surface_points(spec: ObjectSpec, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` points drawn uniformly (by area) from the outer surface of the union."""
    faces = [(p, ax, s, a) for p in spec.parts for ax, s, a in p.faces()]
    areas = np.array([f[3] for f in faces])
    out = []
    need = count
    while need > 0:
        draw = int(need * 1.3) + 16
        which = rng.choice(len(faces), size=draw, p=areas / areas.sum())
        uv = rng.uniform(-1.0, 1.0, (draw, 3))
        pts = np.empty((draw, 3))
        for k, (p, ax, s, _) in enumerate(faces):
            sel = which == k
            local = uv[sel] * p.half
            local[:, ax] = s * p.half[ax]
            pts[sel] = local + np.asarray(p.center)
        if len(spec.parts) > 1:
            # drop samples buried strictly inside another part
            keep = np.ones(draw, dtype=bool)
            for p in spec.parts:
                keep &= _box_sdf(pts, p) >= -1e-9
            pts = pts[keep]
        out.append(pts[:need])
        need -= len(out[-1])
    return spec.to_world(np.concatenate(out)[:count])


def sample_object(spec: ObjectSpec, m: int = 4096, seed=0, density: float = 20000.0) -> PointCloud:
    """Ground-truth cloud: ``density`` samples per m^2 of surface, resampled to ``m`` points."""
    if density <= 0:
        raise UsageError("sampling density must be positive")
    rng = np.random.default_rng(seed)
    raw = max(m, int(np.ceil(density * spec.area())))
    pts = surface_points(spec, raw, rng)
    return resample(PointCloud(pts, Source.GROUND_TRUTH), m, rng)


# --------------------------------------------------------------------------
# cameras


def arena_cameras(k: int = 4, width: int = 128, height: int = 128) -> list[Camera]:
    """``k`` cameras on the circle through the arena edge midpoints, looking inward."""
    intr = Intrinsics.from_fov(width, height, FOV_DEG)
    cams = []
    for i in range(k):
        ang = 2 * np.pi * i / k
        eye = (ARENA_SIZE / 2 * np.cos(ang), ARENA_SIZE / 2 * np.sin(ang), CAMERA_HEIGHT)
        pose = Pose.look_at(eye, (0.0, 0.0, TARGET_HEIGHT))
        cams.append(Camera(intr, pose, width, height))
    return cams


def render_views(pc, k: int = 4, width: int = 128, height: int = 128) -> ViewSet:
    """Z-buffered depth image of ``pc`` from each arena camera.

    Occlusion is only as good as the sampling: pass a cloud dense enough to
    put several points in every pixel footprint (see RENDER_DENSITY).
    """
    pts = getattr(pc, "points", pc)
    if len(pts) == 0:
        raise EmptyInputError("cannot render an empty cloud")
    return ViewSet([project_cloud(pts, cam) for cam in arena_cameras(k, width, height)])


# --------------------------------------------------------------------------
# corruption


@dataclass(frozen=True)
class CorruptionSpec:
    dropout_rate: float = 0.2
    ghost_rate: float = 0.05
    jitter_sigma: float = 0.005  # m
    orientation_error_sigma: float = 2.0  # degrees
    shape_warp: float = 0.03  # m

    def __post_init__(self):
        for f in ("dropout_rate", "ghost_rate"):
            v = getattr(self, f)
            if not 0.0 <= v <= 1.0:
                raise UsageError(f"{f} must lie in [0, 1], got {v}")
        for f in ("jitter_sigma", "orientation_error_sigma", "shape_warp"):
            if getattr(self, f) < 0:
                raise UsageError(f"{f} must be non-negative")

    @classmethod
    def none(cls) -> "CorruptionSpec":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_file(cls, path) -> "CorruptionSpec":
        raw = read_kv(path)
        known = {f.name for f in fields(cls)}
        extra = set(raw) - known
        if extra:
            raise UsageError(f"unknown corruption keys: {sorted(extra)}")
        try:
            return cls(**{k: float(v) for k, v in raw.items()})
        except ValueError as e:
            raise UsageError(f"{path}: corruption values must be numbers ({e})") from None


def _corrupt_one(view: DepthImage, c: CorruptionSpec, rng: np.random.Generator) -> DepthImage:
    depth = view.depth.copy()
    H, W = depth.shape
    valid = np.flatnonzero(depth > 0)
    if c.dropout_rate > 0 and len(valid):
        drop = rng.choice(valid, size=int(round(c.dropout_rate * len(valid))), replace=False)
        depth.flat[drop] = 0.0
        valid = np.flatnonzero(depth > 0)
    if c.ghost_rate > 0 and len(valid):
        lo, hi = depth.flat[valid].min(), depth.flat[valid].max()
        # ghosts stay near the object: empty pixels inside its (padded) image footprint
        rows, cols = np.unravel_index(valid, depth.shape)
        pad_r, pad_c = max(1, int(0.1 * np.ptp(rows))), max(1, int(0.1 * np.ptp(cols)))
        r0, r1 = max(rows.min() - pad_r, 0), min(rows.max() + pad_r, H - 1)
        c0, c1 = max(cols.min() - pad_c, 0), min(cols.max() + pad_c, W - 1)
        window = np.zeros_like(depth, dtype=bool)
        window[r0:r1 + 1, c0:c1 + 1] = True
        empty = np.flatnonzero((depth == 0) & window)
        n_ghost = min(int(round(c.ghost_rate * len(valid))), len(empty))
        ghosts = rng.choice(empty, size=n_ghost, replace=False)
        depth.flat[ghosts] = rng.uniform(lo, hi, n_ghost)
    mask = depth > 0
    if c.jitter_sigma > 0:
        depth[mask] += rng.normal(0.0, c.jitter_sigma, int(mask.sum()))
    if c.shape_warp > 0:
        fu, fv = rng.uniform(0.5, 1.5, 2)
        pu, pv = rng.uniform(0, 2 * np.pi, 2)
        v_idx, u_idx = np.mgrid[0:H, 0:W]
        warp = c.shape_warp * np.sin(2 * np.pi * fu * u_idx / W + pu) * np.cos(2 * np.pi * fv * v_idx / H + pv)
        depth[mask] += warp[mask]
    # corrupted returns must stay returns
    depth[mask] = np.maximum(depth[mask], 1e-6)
    pose = view.pose
    if c.orientation_error_sigma > 0:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = np.radians(rng.normal(0.0, c.orientation_error_sigma))
        delta = Rotation.from_rotvec(axis * angle).as_matrix()
        R = delta @ pose.R
        # re-orthonormalise to keep the 1e-9 rotation contract
        uu, _, vt = np.linalg.svd(R)
        pose = Pose(uu @ vt, pose.t)
    return DepthImage(depth, view.intrinsics, pose)


def corrupt_views(vs: ViewSet, c: CorruptionSpec, seed=0) -> ViewSet:
    """Corrupt each view independently; deterministic per ``seed``."""
    ss = np.random.SeedSequence(seed if isinstance(seed, (list, tuple)) else [int(seed)])
    children = ss.spawn(vs.k)
    return ViewSet([_corrupt_one(v, c, np.random.default_rng(s)) for v, s in zip(vs.views, children)])


# --------------------------------------------------------------------------
# dataset assembly


@dataclass
class SynthConfig:
    categories: tuple[str, ...] = ("box",)
    count: int = 150
    n: int = 256
    m: int = 1024
    seed: int = 0
    k: int = 4
    width: int = 128
    height: int = 128
    corruption: CorruptionSpec = field(default_factory=CorruptionSpec)

    def as_dict(self) -> dict:
        out = {
            "categories": ",".join(self.categories),
            "count": self.count,
            "n": self.n,
            "m": self.m,
            "seed": self.seed,
            "k": self.k,
            "width": self.width,
            "height": self.height,
        }
        out.update({f"corruption.{k}": v for k, v in self.corruption.as_dict().items()})
        return out


def make_sample(category: str, corruption: CorruptionSpec, seed: int, index: int, n: int, m: int,
                k: int = 4, width: int = 128, height: int = 128):
    """One normalised (input, ground truth) pair plus the raw world-frame clouds."""
    ss = np.random.SeedSequence([int(seed), int(index)])
    obj_seed, surf_seed, gt_seed, corrupt_seed, in_seed = ss.generate_state(5)
    spec = random_object(category, np.random.default_rng(obj_seed))
    dense = surface_points(spec, int(np.ceil(RENDER_DENSITY * spec.area())), np.random.default_rng(surf_seed))
    gt = resample(PointCloud(dense, Source.GROUND_TRUTH), m, gt_seed)
    views = corrupt_views(render_views(dense, k, width, height), corruption, int(corrupt_seed))
    union = union_views(views)
    inp = resample(union, n, in_seed)
    inp_n, centroid, scale = normalize(inp)
    gt_n = normalize_with(gt, centroid, scale)
    info = {"spec": spec, "union": union, "gt": gt, "centroid": centroid, "scale": scale}
    return inp_n.points, gt_n.points, info


def build_dataset(cfg: SynthConfig, out_path=None) -> Dataset:
    """Generate ``cfg.count`` pairs (categories alternate sample by sample) and optionally write them."""
    if cfg.count <= 0:
        raise UsageError("dataset count must be positive")
    for cat in cfg.categories:
        if cat not in CATEGORIES:
            raise UsageError(f"unknown category {cat!r}; choose from {CATEGORIES}")
    inputs, targets = [], []
    for i in range(cfg.count):
        cat = cfg.categories[i % len(cfg.categories)]
        x, y, _ = make_sample(cat, cfg.corruption, cfg.seed, i, cfg.n, cfg.m, cfg.k, cfg.width, cfg.height)
        inputs.append(x)
        targets.append(y)
        if (i + 1) % 50 == 0:
            log.info("synthesised %d/%d samples", i + 1, cfg.count)
    ds = Dataset(inputs, targets)
    if out_path is not None:
        write_dataset(out_path, ds)
        write_kv(str(out_path) + ".config", cfg.as_dict())
    return ds
