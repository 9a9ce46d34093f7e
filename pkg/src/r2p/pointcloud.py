"""Point clouds, depth images, and the multi-view union pipeline.

Camera frame convention: x right, y down, z forward (depth).  Pixel
``(u, v)`` is column ``u``, row ``v``, with pixel centres at integer
coordinates.
"""
from __future__ import annotations

import enum
import io
import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DataError, EmptyInputError, ParseError, UsageError


class Source(str, enum.Enum):
    GROUND_TRUTH = "ground_truth"
    VIEW_CONVERTED = "view_converted"
    UNION_INPUT = "union_input"
    INTERMEDIATE = "intermediate"
    OUTPUT = "output"


@dataclass
class PointCloud:
    points: np.ndarray
    source: Source = Source.GROUND_TRUTH

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ContractError(f"points must be (n, 3), got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ContractError("point coordinates must be finite")
        self.points = np.ascontiguousarray(pts)
        self.source = Source(self.source)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ContractError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float) -> "Intrinsics":
        """Square pixels, horizontal field of view ``fov_deg``, centred principal point."""
        f = (width / 2.0) / np.tan(np.radians(fov_deg) / 2.0)
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0)


def _check_rotation(R: np.ndarray, tol: float = 1e-9) -> None:
    if R.shape != (3, 3):
        raise ContractError(f"rotation must be 3x3, got {R.shape}")
    if not np.allclose(R @ R.T, np.eye(3), atol=tol, rtol=0) or abs(np.linalg.det(R) - 1.0) > tol:
        raise ContractError("rotation must be orthonormal with determinant +1")


@dataclass(frozen=True)
class Pose:
    """Rigid camera-to-world transform: ``world = R @ cam + t``."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        _check_rotation(R)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    def to_world(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.R.T + self.t

    def to_camera(self, pts: np.ndarray) -> np.ndarray:
        return (pts - self.t) @ self.R

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "Pose":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        return cls(np.column_stack([right, down, fwd]), eye)


@dataclass(frozen=True)
class Camera:
    intrinsics: Intrinsics
    pose: Pose
    width: int
    height: int


@dataclass
class DepthImage:
    depth: np.ndarray
    intrinsics: Intrinsics
    pose: Pose = field(default_factory=Pose)

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float64)
        if d.ndim != 2:
            raise ContractError(f"depth must be H x W, got {d.shape}")
        if not np.isfinite(d).all() or (d < 0).any():
            raise ContractError("depth values must be finite and >= 0")
        self.depth = d

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def camera(self) -> Camera:
        return Camera(self.intrinsics, self.pose, self.width, self.height)


@dataclass
class ViewSet:
    views: list[DepthImage]

    def __post_init__(self):
        if len(self.views) < 1:
            raise ContractError("a view set needs at least one view")
        poses = [(v.pose.R.tobytes(), v.pose.t.tobytes()) for v in self.views]
        if len(set(poses)) != len(poses):
            raise ContractError("view poses must be distinct")

    @property
    def k(self) -> int:
        return len(self.views)


def depth_to_cloud(img: DepthImage) -> PointCloud:
    """Back-project every pixel with positive depth into the world frame."""
    v, u = np.nonzero(img.depth > 0)
    d = img.depth[v, u]
    k = img.intrinsics
    cam = np.column_stack([(u - k.cx) * d / k.fx, (v - k.cy) * d / k.fy, d])
    return PointCloud(img.pose.to_world(cam), Source.VIEW_CONVERTED)


def project_cloud(pc, cam: Camera) -> DepthImage:
    """Z-buffered pinhole rendering: the nearest point wins each pixel.

    Points behind the camera or outside the image are dropped.
    """
    pts = getattr(pc, "points", pc)
    k = cam.intrinsics
    depth = np.zeros((cam.height, cam.width))
    if len(pts):
        c = cam.pose.to_camera(np.asarray(pts, dtype=np.float64))
        z = c[:, 2]
        front = z > 0
        c, z = c[front], z[front]
        u = np.rint(k.fx * c[:, 0] / z + k.cx).astype(np.int64)
        v = np.rint(k.fy * c[:, 1] / z + k.cy).astype(np.int64)
        inside = (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
        u, v, z = u[inside], v[inside], z[inside]
        pix = v * cam.width + u
        order = np.lexsort((z, pix))
        pix, z = pix[order], z[order]
        _, first = np.unique(pix, return_index=True)
        depth.flat[pix[first]] = z[first]
    return DepthImage(depth, k, cam.pose)


def union_views(vs: ViewSet) -> PointCloud:
    """Concatenate the back-projected clouds of all views (world frame)."""
    parts = [depth_to_cloud(v).points for v in vs.views]
    pts = np.concatenate(parts, axis=0)
    if len(pts) == 0:
        raise EmptyInputError("every view is empty; nothing to union")
    return PointCloud(pts, Source.UNION_INPUT)


def resample_indices(count: int, n: int, seed) -> np.ndarray:
    if count <= 0:
        raise EmptyInputError("cannot resample an empty cloud")
    if n <= 0:
        raise UsageError(f"target point count must be positive, got {n}")
    rng = np.random.default_rng(seed)
    if count >= n:
        return rng.choice(count, size=n, replace=False)
    pad = rng.integers(0, count, size=n - count)
    return np.concatenate([rng.permutation(count), pad])


def resample(pc: PointCloud, n: int, seed=0) -> PointCloud:
    """Exactly ``n`` points: subsample without replacement, or keep all and pad with repeats.

    The chosen indices depend only on ``(len(pc), n, seed)``.
    """
    idx = resample_indices(len(pc), n, seed)
    return PointCloud(pc.points[idx], pc.source)


def normalize(pc: PointCloud):
    """Centre on the centroid and scale into the unit ball.

    Returns ``(cloud, centroid, scale)``; a zero-radius cloud gets scale 1.
    """
    if len(pc) == 0:
        raise EmptyInputError("cannot normalize an empty cloud")
    centroid = pc.points.mean(axis=0)
    centred = pc.points - centroid
    scale = float(np.sqrt((centred * centred).sum(axis=1).max()))
    if scale == 0.0:
        scale = 1.0
    return PointCloud(centred / scale, pc.source), centroid, scale


def normalize_with(pc: PointCloud, centroid, scale: float) -> PointCloud:
    return PointCloud((pc.points - np.asarray(centroid)) / scale, pc.source)


def denormalize(pc: PointCloud, centroid, scale: float) -> PointCloud:
    return PointCloud(pc.points * scale + np.asarray(centroid), pc.source)


# --------------------------------------------------------------------------
# text formats

PLY_HEADER = "ply\nformat ascii 1.0\nelement vertex {n}\nproperty float x\nproperty float y\nproperty float z\nend_header\n"


def _format_of(path, fmt):
    if fmt is None:
        ext = os.path.splitext(str(path))[1].lower().lstrip(".")
        fmt = ext
    if fmt not in ("xyz", "ply"):
        raise UsageError(f"unsupported cloud format {fmt!r} (use xyz or ply)")
    return fmt


def write_cloud(path, pc, fmt: str | None = None) -> None:
    fmt = _format_of(path, fmt)
    pts = getattr(pc, "points", pc)
    buf = io.StringIO()
    if fmt == "ply":
        buf.write(PLY_HEADER.format(n=len(pts)))
    for x, y, z in pts:
        buf.write(f"{x:.9g} {y:.9g} {z:.9g}\n")
    with open(path, "w") as f:
        f.write(buf.getvalue())


def _parse_xyz_line(line: str, path, lineno: int) -> tuple[float, float, float]:
    parts = line.split()
    if len(parts) != 3:
        raise ParseError(f"expected 3 coordinates, found {len(parts)}", path, lineno)
    try:
        vals = tuple(float(p) for p in parts)
    except ValueError:
        raise ParseError(f"non-numeric coordinate in {line.strip()!r}", path, lineno) from None
    if not all(np.isfinite(vals)):
        raise ParseError("non-finite coordinate", path, lineno)
    return vals


def read_cloud(path, fmt: str | None = None, source: Source = Source.GROUND_TRUTH) -> PointCloud:
    fmt = _format_of(path, fmt)
    try:
        with open(path) as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    if fmt == "xyz":
        pts = [
            _parse_xyz_line(line, path, i)
            for i, line in enumerate(lines, 1)
            if line.strip() and not line.lstrip().startswith("#")
        ]
        return PointCloud(np.array(pts, dtype=np.float64).reshape(-1, 3), source)
    return PointCloud(_read_ply(lines, path), source)


def _read_ply(lines: list[str], path) -> np.ndarray:
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic line", path, 1)
    count = None
    props: list[str] = []
    in_vertex = False
    header_end = None
    for i, line in enumerate(lines[1:], 2):
        tok = line.split()
        if not tok or tok[0] == "comment" or tok[0] == "obj_info":
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise ParseError(f"only ASCII PLY is supported, got {line.strip()!r}", path, i)
        elif tok[0] == "element":
            if len(tok) != 3:
                raise ParseError("malformed element line", path, i)
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                try:
                    count = int(tok[2])
                except ValueError:
                    raise ParseError("vertex count is not an integer", path, i) from None
        elif tok[0] == "property":
            if in_vertex:
                if tok[1] == "list":
                    raise ParseError("list properties on vertices are not supported", path, i)
                props.append(tok[-1])
        elif tok[0] == "end_header":
            header_end = i
            break
        else:
            raise ParseError(f"unexpected header line {line.strip()!r}", path, i)
    if header_end is None:
        raise ParseError("missing end_header", path, len(lines))
    if count is None:
        raise ParseError("no vertex element in header", path, header_end)
    try:
        cols = [props.index(a) for a in ("x", "y", "z")]
    except ValueError:
        raise ParseError("vertex element lacks x/y/z properties", path, header_end) from None
    pts = np.empty((count, 3))
    body = lines[header_end:]
    for k in range(count):
        lineno = header_end + k + 1
        if k >= len(body):
            raise ParseError(f"expected {count} vertices, file ends after {k}", path, lineno)
        tok = body[k].split()
        if len(tok) != len(props):
            raise ParseError(f"expected {len(props)} values, found {len(tok)}", path, lineno)
        try:
            pts[k] = [float(tok[c]) for c in cols]
        except ValueError:
            raise ParseError("non-numeric vertex value", path, lineno) from None
        if not np.isfinite(pts[k]).all():
            raise ParseError("non-finite coordinate", path, lineno)
    return pts


# --------------------------------------------------------------------------
# dataset container: b"R2PD", u32 count, then per sample two clouds
# (input, ground truth), each a u32 point count followed by f64 xyz triples

DATASET_MAGIC = b"R2PD"


@dataclass
class Dataset:
    inputs: list[np.ndarray]
    targets: list[np.ndarray]

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise ContractError("inputs and targets must pair up one-to-one")

    def __len__(self) -> int:
        return len(self.inputs)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        idx = list(indices)
        return Dataset([self.inputs[i] for i in idx], [self.targets[i] for i in idx])

    def split(self, n_test: int) -> tuple["Dataset", "Dataset"]:
        """Last ``n_test`` samples are held out."""
        if not 0 <= n_test <= len(self):
            raise UsageError(f"cannot hold out {n_test} of {len(self)} samples")
        cut = len(self) - n_test
        return self.subset(range(cut)), self.subset(range(cut, len(self)))

    def batch(self, indices: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        return (
            np.stack([self.inputs[i] for i in indices]),
            np.stack([self.targets[i] for i in indices]),
        )

    @property
    def n(self) -> int:
        return self.inputs[0].shape[0] if self.inputs else 0

    @property
    def m(self) -> int:
        return self.targets[0].shape[0] if self.targets else 0


def _pack_cloud(pts: np.ndarray) -> bytes:
    pts = np.ascontiguousarray(pts, dtype="<f8")
    return struct.pack("<I", pts.shape[0]) + pts.tobytes()


def dataset_to_bytes(ds: Dataset) -> bytes:
    parts = [DATASET_MAGIC, struct.pack("<I", len(ds))]
    for x, y in zip(ds.inputs, ds.targets):
        parts.append(_pack_cloud(x))
        parts.append(_pack_cloud(y))
    return b"".join(parts)


def write_dataset(path, ds: Dataset) -> None:
    try:
        with open(path, "wb") as f:
            f.write(dataset_to_bytes(ds))
    except OSError as e:
        raise DataError(f"cannot write dataset {path}: {e}") from e


def read_dataset(path) -> Dataset:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise DataError(f"cannot read dataset {path}: {e}") from e
    if raw[:4] != DATASET_MAGIC:
        raise DataError(f"{path}: not an R2PD dataset (bad magic)")
    pos = 4

    def take(nbytes):
        nonlocal pos
        if pos + nbytes > len(raw):
            raise DataError(f"{path}: truncated dataset at byte {pos}")
        chunk = raw[pos:pos + nbytes]
        pos += nbytes
        return chunk

    (count,) = struct.unpack("<I", take(4))
    inputs, targets = [], []
    for _ in range(count):
        for dest in (inputs, targets):
            (npts,) = struct.unpack("<I", take(4))
            dest.append(np.frombuffer(take(24 * npts), dtype="<f8").astype(np.float64).reshape(npts, 3))
    if pos != len(raw):
        raise DataError(f"{path}: {len(raw) - pos} trailing bytes after {count} samples")
    return Dataset(inputs, targets)
