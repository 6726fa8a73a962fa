"""Datasets and environment-shifted splits.

Base images come either from MNIST / Fashion-MNIST IDX files or from a
procedural glyph renderer so that everything runs offline. Environments are
built on top: Colored MNIST (binary digit<5 label, colour spuriously
correlated with it) and Rotated MNIST / FMNIST (one rotation angle per
client, held-out angles for the server test domain).
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from causalfed.blobs import read_tensors, write_tensors
from causalfed.errors import ConfigurationError, ConsistencyError, FormatError, InputError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
SIDE = 28

RED, GREEN, NO_COLOR = 0, 1, -1
TRAIN_ANGLES = (0, 15, 30, 45, 60)
TEST_ANGLES = (75, 90)
DEFAULT_PER_ENV = {"mnist": 1000, "fmnist": 10000}
ENV_CACHE_FORMAT = "causalfed.envcache.v1"


@dataclass(frozen=True)
class BaseData:
    """Grayscale images in [0, 1] with class labels and stable source ids."""

    images: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    name: str = "mnist"

    def __post_init__(self):
        if not (len(self.images) == len(self.labels) == len(self.ids)):
            raise ConsistencyError("images, labels and ids must have equal length")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "BaseData":
        idx = np.asarray(idx, dtype=np.int64)
        return BaseData(self.images[idx], self.labels[idx], self.ids[idx], self.name)


@dataclass(frozen=True)
class Example:
    pixels: np.ndarray
    label: int
    attrs: dict


@dataclass(frozen=True)
class Environment:
    """One domain's data, stored column-wise.

    ``color`` is -1 for uncoloured data; ``digit`` keeps the original base
    class (for Colored MNIST the training label is the binary digit>=5 bit).
    """

    x: np.ndarray
    y: np.ndarray
    domain_id: int
    shift_kind: str
    shift_param: float | tuple
    role: str
    source_ids: np.ndarray
    color: np.ndarray
    angle: np.ndarray
    digit: np.ndarray
    n_classes: int
    name: str = ""
    domain: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.y)
        if self.domain is None:
            object.__setattr__(self, "domain", np.full(n, self.domain_id, dtype=np.int64))
        for name in ("x", "y", "source_ids", "color", "angle", "digit", "domain"):
            arr = np.asarray(getattr(self, name))
            if len(arr) != n:
                raise ConsistencyError(f"column {name} has {len(arr)} rows, expected {n}")
            arr = arr.copy() if arr.flags.writeable else arr
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, i: int) -> Example:
        return Example(
            self.x[i],
            int(self.y[i]),
            {
                "color": {RED: "red", GREEN: "green"}.get(int(self.color[i])),
                "angle_deg": int(self.angle[i]) if self.angle[i] >= 0 else None,
                "domain_id": int(self.domain[i]),
            },
        )

    def __iter__(self) -> Iterator[Example]:
        return (self[i] for i in range(len(self)))

    @property
    def examples(self) -> list[Example]:
        return list(self)

    def subset(self, idx) -> "Environment":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self,
            x=self.x[idx],
            y=self.y[idx],
            source_ids=self.source_ids[idx],
            color=self.color[idx],
            angle=self.angle[idx],
            digit=self.digit[idx],
            domain=self.domain[idx],
        )

    def with_data(self, x=None, y=None) -> "Environment":
        return replace(self, x=self.x if x is None else x, y=self.y if y is None else y)


def concat_envs(envs: Sequence[Environment], domain_id: int, role: str, name: str = "") -> Environment:
    """Pools several environments; per-example ``domain`` keeps the origin."""
    if not envs:
        raise InputError("nothing to concatenate")
    return Environment(
        x=np.concatenate([e.x for e in envs]),
        y=np.concatenate([e.y for e in envs]),
        domain_id=domain_id,
        shift_kind=envs[0].shift_kind,
        shift_param=tuple(e.shift_param for e in envs),
        role=role,
        source_ids=np.concatenate([e.source_ids for e in envs]),
        color=np.concatenate([e.color for e in envs]),
        angle=np.concatenate([e.angle for e in envs]),
        digit=np.concatenate([e.digit for e in envs]),
        n_classes=envs[0].n_classes,
        name=name,
        domain=np.concatenate([e.domain for e in envs]),
    )


# --- IDX ---------------------------------------------------------------------


def _open(path: str | Path, mode: str = "rb"):
    path = Path(path)
    return gzip.open(path, mode) if path.suffix == ".gz" else open(path, mode)


def _read_idx(path: str | Path, magic: int, ndim: int) -> np.ndarray:
    with _open(path) as f:
        raw = f.read()
    header = 4 + 4 * ndim
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated magic number", offset=len(raw))
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}", offset=0)
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header < size:
        raise FormatError(f"{path}: payload truncated, need {size} bytes", offset=len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path: str | Path, labels_path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Reads an IDX image/label pair; images come back as float64 in [0, 1]."""
    images = _read_idx(images_path, IMAGE_MAGIC, 3)
    labels = _read_idx(labels_path, LABEL_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return images.astype(np.float64) / 255.0, labels.astype(np.int64)


def write_idx(images_path: str | Path, labels_path: str | Path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = np.clip(np.rint(np.asarray(images, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with _open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, *images.shape))
        f.write(images.tobytes())
    with _open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def load_base(images_path, labels_path, name: str = "mnist") -> BaseData:
    images, labels = load_idx(images_path, labels_path)
    return BaseData(images, labels, np.arange(len(labels)), name)


# --- procedural fallback -----------------------------------------------------


def _arc(cx, cy, rx, ry, start, stop, n=12):
    t = np.deg2rad(np.linspace(start, stop, n))
    return list(zip(cx + rx * np.cos(t), cy - ry * np.sin(t)))


# Stroke polylines in the unit square (x right, y down).
_DIGITS = {
    0: [_arc(0.5, 0.5, 0.3, 0.44, 0, 360, 17)],
    1: [[(0.32, 0.25), (0.55, 0.05), (0.55, 0.95)]],
    2: [_arc(0.5, 0.3, 0.3, 0.24, 160, -30) + [(0.18, 0.95), (0.85, 0.95)]],
    3: [_arc(0.48, 0.28, 0.28, 0.22, 150, -90) + _arc(0.48, 0.72, 0.32, 0.24, 90, -150)],
    4: [[(0.66, 0.95), (0.66, 0.05), (0.14, 0.66), (0.88, 0.66)]],
    5: [[(0.82, 0.05), (0.3, 0.05), (0.26, 0.45)] + _arc(0.5, 0.68, 0.3, 0.27, 130, -150)],
    6: [[(0.72, 0.05), (0.32, 0.42), (0.22, 0.7)], _arc(0.5, 0.7, 0.28, 0.24, 0, 360, 15)],
    7: [[(0.14, 0.05), (0.86, 0.05), (0.42, 0.95)]],
    8: [_arc(0.5, 0.27, 0.24, 0.21, 0, 360, 13), _arc(0.5, 0.72, 0.3, 0.24, 0, 360, 15)],
    9: [_arc(0.5, 0.3, 0.28, 0.24, 0, 360, 15), [(0.78, 0.3), (0.68, 0.95)]],
}

# Filled garment silhouettes, Fashion-MNIST class order.
_GARMENTS = {
    0: [(0.3, 0.1), (0.7, 0.1), (0.95, 0.3), (0.85, 0.42), (0.75, 0.35), (0.75, 0.95), (0.25, 0.95),
        (0.25, 0.35), (0.15, 0.42), (0.05, 0.3)],
    1: [(0.3, 0.05), (0.7, 0.05), (0.72, 0.95), (0.55, 0.95), (0.5, 0.35), (0.45, 0.95), (0.28, 0.95)],
    2: [(0.3, 0.1), (0.7, 0.1), (0.95, 0.35), (0.95, 0.9), (0.8, 0.9), (0.77, 0.4), (0.75, 0.95),
        (0.25, 0.95), (0.23, 0.4), (0.2, 0.9), (0.05, 0.9), (0.05, 0.35)],
    3: [(0.4, 0.05), (0.6, 0.05), (0.65, 0.35), (0.85, 0.95), (0.15, 0.95), (0.35, 0.35)],
    4: [(0.3, 0.05), (0.5, 0.15), (0.7, 0.05), (0.95, 0.3), (0.95, 0.95), (0.8, 0.95), (0.78, 0.45),
        (0.78, 0.98), (0.22, 0.98), (0.22, 0.45), (0.2, 0.95), (0.05, 0.95), (0.05, 0.3)],
    5: [(0.05, 0.85), (0.05, 0.65), (0.2, 0.5), (0.3, 0.7), (0.45, 0.45), (0.55, 0.7), (0.7, 0.45),
        (0.8, 0.65), (0.95, 0.65), (0.95, 0.85)],
    6: [(0.3, 0.1), (0.5, 0.25), (0.7, 0.1), (0.95, 0.35), (0.85, 0.6), (0.77, 0.5), (0.75, 0.95),
        (0.25, 0.95), (0.23, 0.5), (0.15, 0.6), (0.05, 0.35)],
    7: [(0.05, 0.6), (0.45, 0.45), (0.65, 0.6), (0.95, 0.7), (0.95, 0.85), (0.05, 0.85)],
    8: [(0.1, 0.35), (0.3, 0.35), (0.35, 0.15), (0.65, 0.15), (0.7, 0.35), (0.9, 0.35), (0.9, 0.9),
        (0.1, 0.9)],
    9: [(0.3, 0.1), (0.6, 0.1), (0.62, 0.55), (0.95, 0.7), (0.95, 0.9), (0.1, 0.9), (0.1, 0.6),
        (0.3, 0.55)],
}


def _segments(polylines) -> np.ndarray:
    segs = []
    for line in polylines:
        pts = np.asarray(line, dtype=np.float64)
        segs.extend(zip(pts[:-1], pts[1:]))
    return np.asarray(segs)  # S, 2, 2


def _polygon_segments(poly) -> np.ndarray:
    pts = np.asarray(poly, dtype=np.float64)
    return np.stack([pts, np.roll(pts, -1, axis=0)], axis=1)


_PIX = np.stack(np.meshgrid(np.arange(SIDE), np.arange(SIDE), indexing="xy"), -1).reshape(-1, 2).astype(np.float64)


def _random_affine(rng, n):
    rot = np.deg2rad(rng.uniform(-8, 8, n))
    shear = rng.uniform(-0.15, 0.15, n)
    sx, sy = rng.uniform(0.8, 1.05, n), rng.uniform(0.85, 1.05, n)
    c, s = np.cos(rot), np.sin(rot)
    # rotation @ shear @ scale, applied to centred glyph coordinates
    a = np.empty((n, 2, 2))
    a[:, 0, 0] = c * sx
    a[:, 0, 1] = (c * shear - s) * sy
    a[:, 1, 0] = s * sx
    a[:, 1, 1] = (s * shear + c) * sy
    shift = rng.uniform(-2.0, 2.0, (n, 2))
    return 20.0 * a, shift


def _segment_distance(segs: np.ndarray) -> np.ndarray:
    """segs: (n, S, 2, 2) in pixel coords -> (n, 784) min distance to any segment."""
    a = segs[:, :, None, 0, :]
    ab = segs[:, :, None, 1, :] - a
    ap = _PIX[None, None] - a
    denom = np.maximum((ab * ab).sum(-1), 1e-12)
    t = np.clip((ap * ab).sum(-1) / denom, 0.0, 1.0)
    diff = ap - t[..., None] * ab
    return np.sqrt((diff * diff).sum(-1)).min(axis=1)


def _inside(segs: np.ndarray) -> np.ndarray:
    """Crossing-number point-in-polygon test for each pixel centre."""
    a = segs[:, :, None, 0, :]
    b = segs[:, :, None, 1, :]
    px, py = _PIX[None, None, :, 0], _PIX[None, None, :, 1]
    straddle = (a[..., 1] > py) != (b[..., 1] > py)
    dy = np.where(straddle, b[..., 1] - a[..., 1], 1.0)
    x_cross = a[..., 0] + (py - a[..., 1]) * (b[..., 0] - a[..., 0]) / dy
    return ((straddle & (px < x_cross)).sum(axis=1) % 2) == 1


def _render_class(template: np.ndarray, n: int, rng, filled: bool) -> np.ndarray:
    mat, shift = _random_affine(rng, n)
    centred = template - 0.5  # S, 2, 2
    segs = np.einsum("nij,skj->nski", mat, centred) + (13.5 + shift)[:, None, None, :]
    dist = _segment_distance(segs)
    if filled:
        signed = np.where(_inside(segs), dist, -dist)
        ink = np.clip(0.5 + signed, 0.0, 1.0)
        ink *= rng.uniform(0.55, 1.0, (n, 1))
    else:
        half = rng.uniform(0.8, 1.5, (n, 1))
        ink = np.clip(half + 0.5 - dist, 0.0, 1.0)
    return ink.reshape(n, SIDE, SIDE)


def synth_fallback(n: int, seed: int, kind: str = "digits") -> BaseData:
    """Procedurally rendered 28x28 glyphs, deterministic in ``seed``.

    ``kind="digits"`` draws ten stroke templates, ``kind="fashion"`` ten
    filled garment silhouettes; both get random affine jitter and translation.
    """
    if n <= 0:
        raise InputError("n must be positive")
    if kind not in ("digits", "fashion"):
        raise ConfigurationError(f"unknown synthetic kind {kind!r}")
    rng = np.random.default_rng([seed, 0x5EED])
    labels = rng.integers(0, 10, n)
    images = np.zeros((n, SIDE, SIDE))
    for c in range(10):
        if kind == "digits":
            template = _segments(_DIGITS[c])
        else:
            template = _polygon_segments(_GARMENTS[c])
        idx = np.flatnonzero(labels == c)
        for start in range(0, len(idx), 512):
            chunk = idx[start:start + 512]
            images[chunk] = _render_class(template, len(chunk), rng, filled=(kind == "fashion"))
    return BaseData(images, labels.astype(np.int64), np.arange(n), "mnist" if kind == "digits" else "fmnist")


# --- Colored MNIST -----------------------------------------------------------


def make_colored_mnist(
    base: BaseData,
    n_per_env: int = 2000,
    correlation: float = 0.9,
    domain_id: int = 0,
    seed: int = 0,
    role: str = "client",
    label_noise: float = 0.0,
) -> Environment:
    """Binary label ``digit >= 5``; colour agrees with the label w.p. ``correlation``.

    Red (channel 0) is the canonical colour of label 0, green (channel 1) of
    label 1. ``label_noise`` flips training labels (0 disables it).
    """
    if not 0.0 <= correlation <= 1.0:
        raise InputError(f"correlation must be in [0, 1], got {correlation}")
    if len(base) < n_per_env:
        raise InputError(f"need {n_per_env} base samples, have {len(base)}")
    rng = np.random.default_rng([seed, domain_id, 0xC0])
    idx = rng.permutation(len(base))[:n_per_env]
    digit = base.labels[idx]
    y = (digit >= 5).astype(np.int64)
    if label_noise > 0:
        y = np.where(rng.random(n_per_env) < label_noise, 1 - y, y)
    agree = rng.random(n_per_env) < correlation
    color = np.where(agree, y, 1 - y).astype(np.int64)
    x = np.zeros((n_per_env, 2, SIDE, SIDE))
    x[np.arange(n_per_env), color] = base.images[idx]
    return Environment(
        x=x,
        y=y,
        domain_id=domain_id,
        shift_kind="colored",
        shift_param=float(correlation),
        role=role,
        source_ids=base.ids[idx],
        color=color,
        angle=np.full(n_per_env, -1),
        digit=digit,
        n_classes=2,
        name=f"colored_c{correlation:g}",
    )


def _partition(n_total: int, sizes: Sequence[int], rng) -> list[np.ndarray]:
    if sum(sizes) > n_total:
        raise InputError(f"need {sum(sizes)} base samples, have {n_total}")
    perm = rng.permutation(n_total)
    out, start = [], 0
    for s in sizes:
        out.append(np.sort(perm[start:start + s]))
        start += s
    return out


def make_colored_envs(
    base: BaseData,
    correlations: Sequence[float] = (0.9, 0.8),
    test_correlation: float = 0.1,
    n_per_env: int = 2000,
    seed: int = 0,
    label_noise: float = 0.0,
    with_test: bool = True,
) -> tuple[list[Environment], Environment | None]:
    """Client environments plus the server test domain, on disjoint base indices."""
    rng = np.random.default_rng([seed, 0xC1])
    parts = _partition(len(base), [n_per_env] * (len(correlations) + int(with_test)), rng)
    envs = [
        make_colored_mnist(base.subset(p), n_per_env, c, i, seed, "client", label_noise)
        for i, (p, c) in enumerate(zip(parts, correlations))
    ]
    test = None
    if with_test:
        test = make_colored_mnist(base.subset(parts[-1]), n_per_env, test_correlation, len(correlations), seed,
                                  "server_test", label_noise)
    return envs, test


def relabel_domain(env: Environment, domain_id: int, role: str | None = None) -> Environment:
    return replace(env, domain_id=domain_id, role=env.role if role is None else role,
                   domain=np.full(len(env), domain_id, dtype=np.int64))


# --- rotation ----------------------------------------------------------------

_EXACT_TRIG = {0: (1.0, 0.0), 90: (0.0, 1.0), 180: (-1.0, 0.0), 270: (0.0, -1.0)}


def rotate_image(pixels: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotates the trailing (H, W) axes about the centre, bilinear, zero fill.

    Works on a single image or any stack of them. Multiples of 90 degrees are
    exact pixel permutations.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    angle = float(angle_deg) % 360.0
    if angle == 0.0:
        return pixels.copy()
    hgt, wid = pixels.shape[-2:]
    if angle in _EXACT_TRIG:
        cos, sin = _EXACT_TRIG[int(angle)]
    else:
        rad = np.deg2rad(angle)
        cos, sin = np.cos(rad), np.sin(rad)
    cy, cx = (hgt - 1) / 2.0, (wid - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(hgt), np.arange(wid), indexing="ij")
    dx, dy = cols - cx, rows - cy
    # inverse map: output pixel -> source location (counter-clockwise on screen)
    src_x = cx + cos * dx - sin * dy
    src_y = cy + sin * dx + cos * dy
    x0, y0 = np.floor(src_x).astype(int), np.floor(src_y).astype(int)
    fx, fy = src_x - x0, src_y - y0
    flat = pixels.reshape(-1, hgt, wid)
    out = np.zeros_like(flat)
    for oy, ox, w in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)), (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        yy, xx = y0 + oy, x0 + ox
        valid = (yy >= 0) & (yy < hgt) & (xx >= 0) & (xx < wid) & (w != 0)
        contrib = np.zeros_like(flat)
        contrib[:, valid] = flat[:, yy[valid], xx[valid]] * w[valid]
        out += contrib
    return np.clip(out, 0.0, 1.0).reshape(pixels.shape)


def rotated_env(base: BaseData, angles: np.ndarray, domain_id: int, shift, role: str, name: str) -> Environment:
    x = np.empty((len(base), 1, SIDE, SIDE))
    for a in np.unique(angles):
        sel = angles == a
        x[sel, 0] = rotate_image(base.images[sel], a)
    return Environment(
        x=x,
        y=base.labels.copy(),
        domain_id=domain_id,
        shift_kind="rotated",
        shift_param=shift,
        role=role,
        source_ids=base.ids.copy(),
        color=np.full(len(base), NO_COLOR),
        angle=angles.astype(np.int64),
        digit=base.labels.copy(),
        n_classes=10,
        name=name,
    )


def make_rotated_envs(
    base: BaseData,
    dataset: str = "mnist",
    seed: int = 0,
    n_per_env: int | None = None,
    angles: Sequence[int] = TRAIN_ANGLES,
    test_angles: Sequence[int] = TEST_ANGLES,
    with_test: bool = True,
) -> tuple[list[Environment], Environment | None]:
    """One client environment per training angle plus a mixed-angle test domain."""
    if dataset not in DEFAULT_PER_ENV:
        raise ConfigurationError(f"unknown rotated dataset {dataset!r}")
    n = DEFAULT_PER_ENV[dataset] if n_per_env is None else int(n_per_env)
    rng = np.random.default_rng([seed, 0xA0])
    n_envs = len(angles) + (1 if with_test else 0)
    parts = _partition(len(base), [n] * n_envs, rng)
    envs = [
        rotated_env(base.subset(p), np.full(n, a), i, float(a), "client", f"{dataset}_rot{a}")
        for i, (p, a) in enumerate(zip(parts, angles))
    ]
    test = None
    if with_test:
        test = make_rotated_test_env(base.subset(parts[-1]), dataset, seed, n, test_angles, len(angles))
    return envs, test


def make_rotated_test_env(
    base: BaseData,
    dataset: str = "mnist",
    seed: int = 0,
    n: int | None = None,
    test_angles: Sequence[int] = TEST_ANGLES,
    domain_id: int = len(TRAIN_ANGLES),
) -> Environment:
    """Server test domain: ``n`` examples split evenly across ``test_angles``."""
    n = len(base) if n is None else int(n)
    if len(base) < n:
        raise InputError(f"need {n} base samples, have {len(base)}")
    rng = np.random.default_rng([seed, 0xA1])
    idx = np.sort(rng.permutation(len(base))[:n])
    angle = np.asarray(test_angles)[rng.permutation(n) % len(test_angles)]
    return rotated_env(base.subset(idx), angle, domain_id, tuple(float(a) for a in test_angles), "server_test",
                        f"{dataset}_rot" + "_".join(str(a) for a in test_angles))


# --- cache -------------------------------------------------------------------

_COLUMNS = ("x", "y", "source_ids", "color", "angle", "digit", "domain")


def save_env_cache(directory: str | Path, envs: Sequence[Environment]) -> Path:
    tensors, meta = {}, []
    for i, env in enumerate(envs):
        for col in _COLUMNS:
            tensors[f"{i}/{col}"] = getattr(env, col)
        meta.append({
            "name": env.name,
            "domain_id": env.domain_id,
            "shift": {"kind": env.shift_kind, "param": env.shift_param},
            "role": env.role,
            "n": len(env),
            "n_classes": env.n_classes,
        })
    return write_tensors(directory, ENV_CACHE_FORMAT, tensors, {"environments": meta})


def load_env_cache(directory: str | Path) -> list[Environment]:
    manifest, tensors = read_tensors(directory, ENV_CACHE_FORMAT)
    envs = []
    for i, m in enumerate(manifest["environments"]):
        cols = {c: tensors[f"{i}/{c}"] for c in _COLUMNS}
        param = m["shift"]["param"]
        envs.append(Environment(
            x=cols["x"],
            y=cols["y"].astype(np.int64),
            domain_id=m["domain_id"],
            shift_kind=m["shift"]["kind"],
            shift_param=tuple(param) if isinstance(param, list) else param,
            role=m["role"],
            source_ids=cols["source_ids"].astype(np.int64),
            color=cols["color"].astype(np.int64),
            angle=cols["angle"].astype(np.int64),
            digit=cols["digit"].astype(np.int64),
            n_classes=m["n_classes"],
            name=m["name"],
            domain=cols["domain"].astype(np.int64),
        ))
    return envs
