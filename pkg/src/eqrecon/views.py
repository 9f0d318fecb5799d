"""Parameter-recording augmentations and view-pair construction.

Every augmentation draws explicit parameters, applies them, and keeps them
so an evaluation probe can later regress the transform that maps view 1 to
view 2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

FAMILIES: tuple[str, ...] = ("rotation", "color", "blur", "translation", "crop", "flip")

PARAM_NAMES: dict[str, tuple[str, ...]] = {
    "rotation": ("angle",),
    "color": ("brightness", "contrast", "saturation", "hue"),
    "blur": ("sigma",),
    "translation": ("dx", "dy"),
    "crop": ("scale", "cx", "cy"),
    "flip": ("flip",),
}

DEFAULT_RANGES: dict[str, tuple[float, float]] = {
    "rotation.angle": (-90.0, 90.0),
    "color.brightness": (0.6, 1.4),
    "color.contrast": (0.6, 1.4),
    "color.saturation": (0.6, 1.4),
    "color.hue": (-0.1, 0.1),
    "blur.sigma": (0.1, 2.0),
    "translation.dx": (-0.25, 0.25),
    "translation.dy": (-0.25, 0.25),
    "crop.scale": (0.2, 1.0),
    "crop.cx": (0.0, 1.0),
    "crop.cy": (0.0, 1.0),
}

IDENTITY: dict[str, tuple[float, ...]] = {
    "rotation": (0.0,),
    "color": (1.0, 1.0, 1.0, 0.0),
    "blur": (0.0,),
    "translation": (0.0, 0.0),
    "crop": (1.0, 0.5, 0.5),
    "flip": (0.0,),
}

# blur below this sigma is a no-op
MIN_BLUR_SIGMA = 0.1

_LUMA = np.array([0.299, 0.587, 0.114])


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class TransformSpec:
    families: tuple[str, ...] = FAMILIES
    ranges: dict[str, tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_RANGES))
    flip_prob: float = 0.5

    def __post_init__(self) -> None:
        fams = tuple(f for f in FAMILIES if f in self.families)
        unknown = set(self.families) - set(FAMILIES)
        if unknown:
            raise SpecError(f"unknown transform families: {sorted(unknown)}")
        if not fams:
            raise SpecError("at least one transform family must be enabled")
        object.__setattr__(self, "families", fams)
        ranges = dict(DEFAULT_RANGES)
        ranges.update(self.ranges)
        for key, (lo, hi) in ranges.items():
            if not lo <= hi:
                raise SpecError(f"range {key}: min {lo} > max {hi}")
        object.__setattr__(self, "ranges", ranges)
        if not 0.0 <= self.flip_prob <= 1.0:
            raise SpecError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")

    def param_keys(self) -> list[str]:
        return [f"{fam}.{p}" for fam in self.families for p in PARAM_NAMES[fam]]

    @property
    def dim(self) -> int:
        return len(self.param_keys())

    def normalize(self, params: "TransformParams") -> np.ndarray:
        out = []
        for key, v in zip(self.param_keys(), params.vector()):
            if key == "flip.flip":
                out.append(v)
            else:
                lo, hi = self.ranges[key]
                out.append(0.0 if hi == lo else 2.0 * (v - lo) / (hi - lo) - 1.0)
        return np.asarray(out, dtype=np.float64)

    def denormalize(self, vec: Sequence[float]) -> "TransformParams":
        raw = []
        for key, v in zip(self.param_keys(), vec):
            if key == "flip.flip":
                raw.append(float(v))
            else:
                lo, hi = self.ranges[key]
                raw.append(lo + (float(v) + 1.0) * 0.5 * (hi - lo))
        return TransformParams.from_vector(self.families, raw)


@dataclass(frozen=True)
class TransformParams:
    """Raw parameters for each enabled family, in canonical family order."""

    values: dict[str, tuple[float, ...]]

    @property
    def families(self) -> tuple[str, ...]:
        return tuple(f for f in FAMILIES if f in self.values)

    def vector(self) -> np.ndarray:
        return np.asarray([v for fam in self.families for v in self.values[fam]], dtype=np.float64)

    @classmethod
    def from_vector(cls, families: Iterable[str], vec: Sequence[float]) -> "TransformParams":
        vals, i = {}, 0
        for fam in (f for f in FAMILIES if f in tuple(families)):
            n = len(PARAM_NAMES[fam])
            vals[fam] = tuple(float(x) for x in vec[i : i + n])
            i += n
        return cls(vals)

    @classmethod
    def identity(cls, families: Iterable[str] = FAMILIES) -> "TransformParams":
        return cls({f: IDENTITY[f] for f in FAMILIES if f in tuple(families)})


def sample_params(spec: TransformSpec, seed) -> TransformParams:
    """Draw every enabled parameter uniformly from its range.

    ``seed`` is anything ``numpy.random.default_rng`` accepts, typically an
    int or a ``(seed, epoch, index, stream)`` tuple.
    """
    rng = np.random.default_rng(seed)
    vals = {}
    for fam in spec.families:
        if fam == "flip":
            vals[fam] = (float(rng.random() < spec.flip_prob),)
            continue
        vals[fam] = tuple(float(rng.uniform(*spec.ranges[f"{fam}.{p}"])) for p in PARAM_NAMES[fam])
    return TransformParams(vals)


# --------------------------------------------------------------------------
# transforms on (N, 3, H, W) float batches; scalars broadcast per item
# --------------------------------------------------------------------------
def bilinear_sample(imgs: np.ndarray, src_y: np.ndarray, src_x: np.ndarray) -> np.ndarray:
    """Sample ``imgs`` (N, C, H, W) at fractional pixel coordinates
    (N, H', W'); samples falling outside the image read as zero."""
    n, c, h, w = imgs.shape
    # a two-pixel zero border absorbs every out-of-range corner
    stride = w + 4
    src_y = np.clip(src_y, -1.5, h + 0.5).astype(np.float32) + 2
    src_x = np.clip(src_x, -1.5, w + 0.5).astype(np.float32) + 2
    y0 = np.floor(src_y)
    x0 = np.floor(src_x)
    wy = (src_y - y0)[:, None].astype(imgs.dtype)
    wx = (src_x - x0)[:, None].astype(imgs.dtype)
    padded = np.zeros((n, c, h + 4, stride), dtype=imgs.dtype)
    padded[:, :, 2:-2, 2:-2] = imgs
    flat = padded.reshape(-1)
    plane = (np.arange(n * c, dtype=np.int64) * ((h + 4) * stride)).reshape(n, c, 1, 1)
    top = plane + (y0.astype(np.int64) * stride + x0.astype(np.int64))[:, None]
    v00 = flat[top]
    v01 = flat[top + 1]
    v10 = flat[top + stride]
    v11 = flat[top + (stride + 1)]
    return (v00 + (v01 - v00) * wx) * (1 - wy) + (v10 + (v11 - v10) * wx) * wy


def _grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    return np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")


def _col(x, n: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(x, dtype=np.float64), (n,)).reshape(n, 1, 1)


def _batched(fn):
    """Let a batch transform also accept a single (3, H, W) image."""

    def wrapper(imgs, *args, **kwargs):
        if imgs.ndim == 3:
            return fn(imgs[None], *args, **kwargs)[0]
        return fn(imgs, *args, **kwargs)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_batched
def rotate(imgs: np.ndarray, angle, exact_right_angles: bool = True) -> np.ndarray:
    """Counter-clockwise rotation about the image centre, zero fill.

    At +90 degrees on an N x N image, ``out[i, j] == img[j, N - 1 - i]``.
    Multiples of 90 degrees are exact index permutations.
    """
    n, _, h, w = imgs.shape
    angle = np.broadcast_to(np.asarray(angle, dtype=np.float64), (n,))
    out = imgs.copy()
    todo = np.ones(n, dtype=bool)
    if exact_right_angles:
        for i in np.flatnonzero(angle % 90.0 == 0.0):
            k = int(angle[i] // 90.0) % 4
            if k % 2 == 0 or h == w:
                out[i] = np.rot90(imgs[i], k=k, axes=(-2, -1))
                todo[i] = False
    idx = np.flatnonzero(todo)
    if idx.size:
        th = np.radians(angle[idx]).reshape(-1, 1, 1)
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        ii, jj = _grid(h, w)
        y, x = ii - cy, jj - cx
        c, s = np.cos(th), np.sin(th)
        out[idx] = bilinear_sample(imgs[idx], cy + c * y + s * x, cx - s * y + c * x)
    return out


@_batched
def translate(imgs: np.ndarray, dx, dy) -> np.ndarray:
    """Shift content right by ``dx * W`` and down by ``dy * H``, zero fill."""
    n, _, h, w = imgs.shape
    ii, jj = _grid(h, w)
    return bilinear_sample(imgs, ii - _col(dy, n) * h, jj - _col(dx, n) * w)


@_batched
def crop_resize(imgs: np.ndarray, scale, cx, cy) -> np.ndarray:
    """Square crop covering ``scale`` of the image area centred at
    ``(cx, cy)`` (fractions of width/height), resized back bilinearly."""
    n, _, h, w = imgs.shape
    r = np.sqrt(_col(scale, n))
    ii, jj = _grid(h, w)
    src_y = (_col(cy, n) + ((ii + 0.5) / h - 0.5) * r) * h - 0.5
    src_x = (_col(cx, n) + ((jj + 0.5) / w - 0.5) * r) * w - 0.5
    return bilinear_sample(imgs, src_y, src_x)


def hflip(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img[..., ::-1])


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """RGB in [0, 1] along axis -3 to HSV, hue as a fraction of a turn."""
    r, g, b = rgb[..., 0, :, :], rgb[..., 1, :, :], rgb[..., 2, :, :]
    mx = np.maximum(np.maximum(r, g), b)
    mn = np.minimum(np.minimum(r, g), b)
    delta = mx - mn
    safe = np.where(delta > 0, delta, 1)
    h = np.where(mx == r, (g - b) / safe, np.where(mx == g, (b - r) / safe + 2, (r - g) / safe + 4))
    h = np.where(h < 0, h + 6, h)
    h = np.where(delta > 0, h / 6, 0)
    s = np.where(mx > 0, delta / np.where(mx > 0, mx, 1), 0)
    return np.stack([h, s, mx], axis=-3)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0, :, :], hsv[..., 1, :, :], hsv[..., 2, :, :]
    h6 = (h - np.floor(h)) * 6
    vs = v * s
    chans = []
    for n in (5, 3, 1):
        k = h6 + n
        k = np.where(k >= 6, k - 6, k)
        chans.append(v - vs * np.clip(np.minimum(k, 4 - k), 0, 1))
    return np.stack(chans, axis=-3)


def _luma(imgs: np.ndarray) -> np.ndarray:
    w = _LUMA.astype(imgs.dtype)
    return w[0] * imgs[:, 0] + w[1] * imgs[:, 1] + w[2] * imgs[:, 2]


def _per_item(x, n: int, dtype) -> np.ndarray:
    return np.broadcast_to(np.asarray(x, dtype=np.float64), (n,)).astype(dtype).reshape(n, 1, 1, 1)


def _update(out: np.ndarray, mask: np.ndarray, fn) -> None:
    if mask.all():
        out[...] = fn(out, slice(None))
    elif mask.any():
        idx = np.flatnonzero(mask)
        out[idx] = fn(out[idx], idx)


@_batched
def color_jitter(imgs: np.ndarray, brightness, contrast, saturation, hue) -> np.ndarray:
    """Brightness, contrast, saturation, hue, in that order; clamps after
    each step.  A factor of exactly 1 (hue shift 0) skips its step."""
    n, dt = len(imgs), imgs.dtype
    b = _per_item(brightness, n, dt)
    c = _per_item(contrast, n, dt)
    s = _per_item(saturation, n, dt)
    hs = _per_item(hue, n, dt)
    out = imgs.copy()
    _update(out, b.ravel() != 1, lambda x, i: np.clip(x * b[i], 0, 1))

    def _contrast(x, i):
        m = _luma(x).mean(axis=(1, 2)).reshape(-1, 1, 1, 1)
        return np.clip((x - m) * c[i] + m, 0, 1)

    def _saturation(x, i):
        gray = _luma(x)[:, None]
        return np.clip((x - gray) * s[i] + gray, 0, 1)

    def _hue(x, i):
        hsv = rgb_to_hsv(x)
        hh = hsv[:, 0] + hs[i][:, 0]
        hsv[:, 0] = hh - np.floor(hh)
        return np.clip(hsv_to_rgb(hsv), 0, 1)

    _update(out, c.ravel() != 1, _contrast)
    _update(out, s.ravel() != 1, _saturation)
    _update(out, hs.ravel() != 0, _hue)
    return out


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian blur over the two trailing axes; sigma below 0.1 is a no-op."""
    if sigma < MIN_BLUR_SIGMA:
        return img.copy()
    sig = (0.0,) * (img.ndim - 2) + (sigma, sigma)
    return ndimage.gaussian_filter(img, sigma=sig, mode="reflect", truncate=3.0)


def apply_batch(images: np.ndarray, params: Sequence[TransformParams]) -> np.ndarray:
    """Apply per-item params to (N, 3, H, W).

    Fixed order: crop, rotation, translation, flip, colour, blur.  Items
    whose parameters are the identity for a family pass through untouched,
    so identity parameters reproduce the input exactly.
    """
    if len(params) != len(images):
        raise ValueError(f"{len(params)} parameter sets for {len(images)} images")
    out = np.array(images, copy=True)
    if not len(params):
        return out

    def table(fam):
        rows = [p.values.get(fam) for p in params]
        has = np.array([r is not None for r in rows])
        ident = IDENTITY[fam]
        arr = np.array([r if r is not None else ident for r in rows], dtype=np.float64)
        return arr, has & np.any(arr != np.asarray(ident), axis=1)

    arr, act = table("crop")
    if act.any():
        i = np.flatnonzero(act)
        out[i] = crop_resize(out[i], arr[i, 0], arr[i, 1], arr[i, 2])
    arr, act = table("rotation")
    if act.any():
        i = np.flatnonzero(act)
        out[i] = rotate(out[i], arr[i, 0])
    arr, act = table("translation")
    if act.any():
        i = np.flatnonzero(act)
        out[i] = translate(out[i], arr[i, 0], arr[i, 1])
    arr, _ = table("flip")
    i = np.flatnonzero(arr[:, 0] >= 0.5)
    if i.size:
        out[i] = out[i][..., ::-1]
    arr, act = table("color")
    if act.any():
        i = np.flatnonzero(act)
        out[i] = color_jitter(out[i], arr[i, 0], arr[i, 1], arr[i, 2], arr[i, 3])
    arr, act = table("blur")
    for i in np.flatnonzero(act & (arr[:, 0] >= MIN_BLUR_SIGMA)):
        out[i] = gaussian_blur(out[i], arr[i, 0])
    np.clip(out, 0.0, 1.0, out=out)
    return out


def apply_one(img: np.ndarray, params: TransformParams) -> np.ndarray:
    return apply_batch(img[None], [params])[0]


def apply(images: np.ndarray, params) -> np.ndarray:
    """Apply params to an image (3, H, W) or batch (N, 3, H, W).

    For a batch, ``params`` may be one TransformParams (shared) or a
    sequence with one entry per image.
    """
    if images.ndim == 3:
        return apply_one(images, params)
    if isinstance(params, TransformParams):
        params = [params] * len(images)
    return apply_batch(images, params)


# --------------------------------------------------------------------------
# view pairs
# --------------------------------------------------------------------------
@dataclass
class ViewPair:
    v1: np.ndarray
    v2: np.ndarray
    params: list[TransformParams]
    spec: TransformSpec

    def targets(self) -> np.ndarray:
        """Normalised relative parameters, shape (N, spec.dim)."""
        return np.stack([self.spec.normalize(p) for p in self.params])


def item_seed(seed: int, epoch: int, index: int, stream: int) -> tuple[int, int, int, int]:
    return (int(seed), int(epoch), int(index), int(stream))


def make_view_pair(
    images: np.ndarray,
    spec: TransformSpec,
    seed: int,
    epoch: int = 0,
    indices: Optional[Sequence[int]] = None,
    first_spec: Optional[TransformSpec] = None,
) -> ViewPair:
    """v1 = apply(image, p1); v2 = apply(v1, p_rel); p_rel is recorded.

    Per-item randomness depends only on (seed, epoch, dataset index), so
    batching and ordering do not change any pair.
    """
    if indices is None:
        indices = range(len(images))
    first_spec = first_spec or spec
    p1 = [sample_params(first_spec, item_seed(seed, epoch, i, 0)) for i in indices]
    rel = [sample_params(spec, item_seed(seed, epoch, i, 1)) for i in indices]
    v1 = apply_batch(images, p1)
    v2 = apply_batch(v1, rel)
    return ViewPair(v1, v2, rel, spec)
