"""Datasets: the procedural mini-IEBench generator, PPM ingestion and the
EQDS binary container.

EQDS layout (little-endian)::

    header   magic "EQDS" | version u16 | count u32 | channels u8 | height u16 | width u16
    record   pixels u8[height * width * channels] (row-major, RGB interleaved)
             label u16 | n_latents u8 | latents f32[n_latents]
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from .views import hsv_to_rgb

MAGIC = b"EQDS"
VERSION = 1
_HEADER = struct.Struct("<4sHIBHH")
_LABEL = struct.Struct("<HB")

PathLike = Union[str, os.PathLike]


class FormatError(ValueError):
    """Malformed EQDS bytes; ``offset`` is where parsing failed."""

    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class IngestError(ValueError):
    def __init__(self, problems: dict[str, str]) -> None:
        lines = "\n".join(f"  {name}: {why}" for name, why in sorted(problems.items()))
        super().__init__(f"{len(problems)} file(s) could not be ingested:\n{lines}")
        self.problems = problems


@dataclass
class Dataset:
    """In-memory EQDS contents. ``images`` is uint8 (N, H, W, 3)."""

    images: np.ndarray
    labels: np.ndarray
    latents: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.images = np.ascontiguousarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.uint16)
        if not self.latents:
            self.latents = [np.zeros(0, np.float32) for _ in range(len(self.images))]
        self.latents = [np.asarray(z, dtype=np.float32) for z in self.latents]
        if not (len(self.images) == len(self.labels) == len(self.latents)):
            raise ValueError("images, labels and latents must have equal length")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def width(self) -> int:
        return self.images.shape[2]

    def as_float(self, index: Optional[Sequence[int]] = None) -> np.ndarray:
        """Pixels as float32 (N, 3, H, W) in [0, 1]."""
        imgs = self.images if index is None else self.images[np.asarray(index)]
        return imgs.transpose(0, 3, 1, 2).astype(np.float32) / np.float32(255.0)

    def subset(self, index: Sequence[int]) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.images[index], self.labels[index], [self.latents[i] for i in index])

    def latent_matrix(self) -> np.ndarray:
        return np.stack(self.latents)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            np.array_equal(self.images, other.images)
            and np.array_equal(self.labels, other.labels)
            and len(self.latents) == len(other.latents)
            and all(np.array_equal(a, b) for a, b in zip(self.latents, other.latents))
        )

    # -- serialisation ---------------------------------------------------
    def to_bytes(self) -> bytes:
        n, h, w, c = self.images.shape
        for i, z in enumerate(self.latents):
            if not np.all(np.isfinite(z)):
                raise ValueError(f"record {i}: non-finite latent parameters")
            if len(z) > 255:
                raise ValueError(f"record {i}: too many latents ({len(z)})")
        parts = [_HEADER.pack(MAGIC, VERSION, n, c, h, w)]
        for img, label, z in zip(self.images, self.labels, self.latents):
            parts.append(img.tobytes())
            parts.append(_LABEL.pack(int(label), len(z)))
            parts.append(z.astype("<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Dataset":
        if len(buf) < _HEADER.size:
            raise FormatError(f"truncated header: {len(buf)} of {_HEADER.size} bytes", len(buf))
        magic, version, n, c, h, w = _HEADER.unpack_from(buf, 0)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
        if version != VERSION:
            raise FormatError(f"unsupported version {version}", 4)
        if c != 3:
            raise FormatError(f"channels must be 3, got {c}", 10)
        npix = h * w * c
        images = np.empty((n, h, w, c), dtype=np.uint8)
        labels = np.empty(n, dtype=np.uint16)
        latents = []
        off = _HEADER.size
        for i in range(n):
            if off + npix + _LABEL.size > len(buf):
                raise FormatError(f"truncated record {i} of {n}", len(buf))
            images[i] = np.frombuffer(buf, np.uint8, npix, off).reshape(h, w, c)
            off += npix
            labels[i], k = _LABEL.unpack_from(buf, off)
            off += _LABEL.size
            if off + 4 * k > len(buf):
                raise FormatError(f"truncated latents in record {i} of {n}", len(buf))
            z = np.frombuffer(buf, "<f4", k, off).astype(np.float32)
            if not np.all(np.isfinite(z)):
                raise FormatError(f"non-finite latent in record {i}", off)
            latents.append(z)
            off += 4 * k
        if off != len(buf):
            raise FormatError(f"{len(buf) - off} trailing bytes after {n} declared records", off)
        return cls(images, labels, latents)


def save(dataset: Dataset, path: PathLike) -> None:
    Path(path).write_bytes(dataset.to_bytes())


def load(path: PathLike) -> Dataset:
    return Dataset.from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------------
# mini-IEBench
# --------------------------------------------------------------------------
@dataclass(frozen=True)
class MiniIEBenchConfig:
    image_size: int = 32
    min_vertices: int = 3
    max_vertices: int = 10
    samples_per_class: int = 100
    rotation_range: tuple[float, float] = (-90.0, 90.0)
    hue_range: tuple[float, float] = (0.0, 1.0)
    scale_range: tuple[float, float] = (0.5, 0.9)
    seed: int = 0
    background_seed: int = 1234
    supersample: int = 4

    def __post_init__(self) -> None:
        if self.image_size < 4:
            raise ValueError(f"image_size must be >= 4, got {self.image_size}")
        if not 3 <= self.min_vertices <= self.max_vertices:
            raise ValueError(f"min_vertices/max_vertices: need 3 <= {self.min_vertices} <= {self.max_vertices}")
        if self.samples_per_class < 1:
            raise ValueError(f"samples_per_class must be >= 1, got {self.samples_per_class}")
        for name in ("rotation_range", "hue_range", "scale_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name} must be nonempty, got ({lo}, {hi})")
        if not (0.0 < self.scale_range[0] and self.scale_range[1] <= 1.0):
            raise ValueError("scale_range must lie in (0, 1]")

    @property
    def classes(self) -> list[int]:
        return list(range(self.min_vertices, self.max_vertices + 1))


def value_noise(size: int, seed: int) -> np.ndarray:
    """Smooth two-octave RGB value noise in roughly [0.15, 0.65], (3, S, S)."""
    rng = np.random.default_rng(seed)
    out = np.zeros((3, size, size))
    for cells, amp in ((4, 0.35), (9, 0.15)):
        grid = rng.uniform(0.0, 1.0, size=(3, cells + 1, cells + 1))
        pos = (np.arange(size) + 0.5) / size * cells
        yy, xx = np.meshgrid(pos, pos, indexing="ij")
        for c in range(3):
            out[c] += amp * ndimage.map_coordinates(grid[c], [yy, xx], order=1, mode="nearest")
    return out + 0.15


def polygon_coverage(size: int, k: int, angle_deg: float, scale: float, supersample: int = 4) -> np.ndarray:
    """Fractional coverage (S, S) of a filled regular k-gon centred in the
    image with circumradius ``scale * S / 2``, rotated counter-clockwise."""
    c = size / 2.0
    radius = scale * size / 2.0
    th = math.radians(angle_deg)
    # first vertex points up (negative row direction)
    ang = np.array([th + 2.0 * math.pi * m / k for m in range(k)])
    vx = c - radius * np.sin(ang)
    vy = c - radius * np.cos(ang)
    sub = (np.arange(size * supersample) + 0.5) / supersample
    py, px = np.meshgrid(sub, sub, indexing="ij")
    inside = np.ones(py.shape, dtype=bool)
    for m in range(k):
        x0, y0 = vx[m], vy[m]
        x1, y1 = vx[(m + 1) % k], vy[(m + 1) % k]
        cross = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
        inside &= cross <= 0.0
    cov = inside.reshape(size, supersample, size, supersample).mean(axis=(1, 3))
    return cov


def render_polygon(cfg: MiniIEBenchConfig, k: int, latents: Sequence[float], background: Optional[np.ndarray] = None) -> np.ndarray:
    """uint8 (S, S, 3) image of a k-gon with latents (angle, hue, scale)."""
    theta, hue, scale = (float(x) for x in latents)
    if background is None:
        background = value_noise(cfg.image_size, cfg.background_seed)
    alpha = polygon_coverage(cfg.image_size, k, theta, scale, cfg.supersample)[None]
    rgb = hsv_to_rgb(np.array([hue, 0.85, 0.9]).reshape(3, 1, 1))
    img = background * (1.0 - alpha) + rgb * alpha
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def generate_mini_iebench(cfg: MiniIEBenchConfig) -> Dataset:
    """Record i has class ``classes[i % n_classes]`` and latents
    ``[angle_deg, hue, scale]`` drawn from a per-record seeded stream."""
    classes = cfg.classes
    n = len(classes) * cfg.samples_per_class
    background = value_noise(cfg.image_size, cfg.background_seed)
    images = np.empty((n, cfg.image_size, cfg.image_size, 3), dtype=np.uint8)
    labels = np.empty(n, dtype=np.uint16)
    latents = []
    for i in range(n):
        rng = np.random.default_rng([cfg.seed, i])
        k = classes[i % len(classes)]
        # round to f32 first: the stored latents are exactly what gets drawn
        z = np.array(
            [rng.uniform(*cfg.rotation_range), rng.uniform(*cfg.hue_range), rng.uniform(*cfg.scale_range)],
            dtype=np.float32,
        )
        images[i] = render_polygon(cfg, k, z, background)
        labels[i] = k
        latents.append(z)
    return Dataset(images, labels, latents)


# --------------------------------------------------------------------------
# PPM ingestion
# --------------------------------------------------------------------------
def read_ppm(path: PathLike) -> np.ndarray:
    """Parse a binary P6 PPM into uint8 (H, W, 3)."""
    buf = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise ValueError("truncated PPM header")
        if buf[pos : pos + 1] == b"#":
            end = buf.find(b"\n", pos)
            pos = len(buf) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    if tokens[0] != b"P6":
        raise ValueError(f"not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ValueError("malformed PPM header") from None
    if w <= 0 or h <= 0 or not 0 < maxval < 256:
        raise ValueError(f"unsupported PPM geometry {w}x{h} maxval {maxval}")
    pos += 1  # single whitespace after maxval
    need = w * h * 3
    if len(buf) - pos < need:
        raise ValueError(f"truncated PPM pixel data: {len(buf) - pos} of {need} bytes")
    img = np.frombuffer(buf, np.uint8, need, pos).reshape(h, w, 3)
    if maxval != 255:
        img = np.round(img.astype(np.float64) * (255.0 / maxval)).astype(np.uint8)
    return img


def write_ppm(path: PathLike, img: np.ndarray) -> None:
    """Write uint8 (H, W, 3) as P6."""
    img = np.ascontiguousarray(img, dtype=np.uint8)
    h, w, _ = img.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + img.tobytes())


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of (C, H, W) floats."""
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([ndimage.map_coordinates(img[i], [yy, xx], order=1, mode="nearest") for i in range(c)])


def read_labels(path: PathLike) -> dict[str, int]:
    labels = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            name, cls = line.rstrip("\n").split("\t")
            labels[name] = int(cls)
        except ValueError:
            raise ValueError(f"{path}:{lineno}: expected 'filename<TAB>class', got {line!r}") from None
    return labels


def ingest_ppm_dir(directory: PathLike, labels_file: PathLike, size: tuple[int, int] = (32, 32)) -> Dataset:
    """Load every ``*.ppm`` in ``directory`` (sorted by name), resize to
    ``size`` and attach labels.  Any bad file aborts the whole ingest."""
    labels = read_labels(labels_file)
    paths = sorted(Path(directory).glob("*.ppm"))
    problems: dict[str, str] = {}
    raw: list[tuple[str, np.ndarray]] = []
    for p in paths:
        try:
            raw.append((p.name, read_ppm(p)))
        except (OSError, ValueError) as exc:
            problems[p.name] = str(exc)
    if raw:
        shapes = [im.shape for _, im in raw]
        ref = max(set(shapes), key=shapes.count)
        for name, im in raw:
            if im.shape != ref:
                problems[name] = f"size {im.shape[1]}x{im.shape[0]} differs from {ref[1]}x{ref[0]}"
    for name, _ in raw:
        if name not in labels:
            problems.setdefault(name, "no entry in labels file")
    if problems:
        raise IngestError(problems)
    if not raw:
        raise IngestError({str(directory): "no .ppm files found"})
    out_h, out_w = size
    images = np.empty((len(raw), out_h, out_w, 3), dtype=np.uint8)
    for i, (_, im) in enumerate(raw):
        f = resize_bilinear(im.transpose(2, 0, 1).astype(np.float64) / 255.0, out_h, out_w)
        images[i] = np.round(np.clip(f, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    return Dataset(images, [labels[name] for name, _ in raw])
