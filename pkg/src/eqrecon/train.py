"""Adam training loop, EQRC checkpoints and per-epoch metrics.

EQRC layout (little-endian)::

    magic "EQRC" | version u16 | step u64 | next_epoch u32 | seed u64
    meta_len u32 | meta (UTF-8 JSON: model config and run settings)
    n_tensors u32
    per tensor: name_len u16 | name | dtype u8 (1 = f32) | ndim u8 | dims u32[ndim]
                crc32 u32 | payload (f32, row-major)

All randomness during training derives from ``(seed, epoch, item index)``,
so ``seed`` and ``next_epoch`` are the complete generator state.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from .dataset import Dataset
from .gradcore import Tape, backward, no_grad
from .losses import LossWeights, recon_loss, total_loss, vicreg_loss, weighted_ssl
from .model import EquivariantReconstructionModel, ModelConfig
from .views import TransformSpec, make_view_pair

log = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

MAGIC = b"EQRC"
VERSION = 1
_HEAD = struct.Struct("<4sHQIQ")
_DTYPES = {1: np.dtype("<f4")}

METRICS_HEADER = "epoch,loss_total,loss_inv,loss_var,loss_cov,loss_recon,lr,seconds"

# the learning rate reference batch for linear scaling
REFERENCE_BATCH = 2048


class NumericalError(RuntimeError):
    def __init__(self, message: str, step: int) -> None:
        super().__init__(f"{message} (step {step})")
        self.step = step


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    epochs: int = 50
    lr: float = 1e-4
    linear_lr_scaling: bool = False
    weight_decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_interval: int = 10
    log_wall_time: bool = False
    weights: LossWeights = LossWeights()
    views: TransformSpec = field(default_factory=lambda: TransformSpec(("rotation", "color")))

    def __post_init__(self) -> None:
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.checkpoint_interval < 0:
            raise ValueError("checkpoint_interval must be >= 0")

    @property
    def effective_lr(self) -> float:
        if self.linear_lr_scaling:
            return self.lr * self.batch_size / REFERENCE_BATCH
        return self.lr

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["views"] = {"families": list(self.views.families), "ranges": {k: list(v) for k, v in self.views.ranges.items()}, "flip_prob": self.views.flip_prob}
        return d


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------
@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    t: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """In-place Adam update with bias correction and decoupled weight decay
    (``p *= 1 - lr * wd`` before the moment update).  Only names present in
    ``grads`` are touched."""
    if t < 1:
        raise ValueError(f"Adam step index must be >= 1, got {t}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}", t)
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype)
    state.t = t


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------
@dataclass
class Checkpoint:
    step: int
    next_epoch: int
    seed: int
    meta: dict[str, Any]
    tensors: dict[str, np.ndarray]


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    meta = json.dumps(ck.meta, sort_keys=True).encode()
    parts = [_HEAD.pack(MAGIC, VERSION, ck.step, ck.next_epoch, ck.seed), struct.pack("<I", len(meta)), meta]
    parts.append(struct.pack("<I", len(ck.tensors)))
    for name in sorted(ck.tensors):
        arr = np.asarray(ck.tensors[name], dtype="<f4", order="C")
        raw = name.encode()
        payload = arr.tobytes()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", 1, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<I", zlib.crc32(payload)))
        parts.append(payload)
    return b"".join(parts)


def parse_checkpoint(buf: bytes) -> Checkpoint:
    def need(off: int, n: int, what: str) -> None:
        if off + n > len(buf):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte offset {off}")

    need(0, _HEAD.size, "header")
    magic, version, step, next_epoch, seed = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = _HEAD.size
    need(off, 4, "metadata length")
    (mlen,) = struct.unpack_from("<I", buf, off)
    off += 4
    need(off, mlen, "metadata")
    try:
        meta = json.loads(buf[off : off + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint metadata: {exc}") from None
    off += mlen
    need(off, 4, "tensor count")
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    for _ in range(count):
        need(off, 2, "tensor name length")
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        need(off, nlen + 2, "tensor name")
        name = buf[off : off + nlen].decode(errors="replace")
        off += nlen
        code, ndim = struct.unpack_from("<BB", buf, off)
        off += 2
        if code not in _DTYPES:
            raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}")
        need(off, 4 * ndim + 4, f"shape of tensor {name!r}")
        dims = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        (crc,) = struct.unpack_from("<I", buf, off)
        off += 4
        nbytes = int(np.prod(dims, dtype=np.int64)) * 4
        need(off, nbytes, f"payload of tensor {name!r}")
        payload = buf[off : off + nbytes]
        if zlib.crc32(payload) != crc:
            raise CheckpointError(f"checksum mismatch in tensor {name!r}")
        tensors[name] = np.frombuffer(payload, _DTYPES[code]).reshape(dims).astype(np.float32)
        off += nbytes
    if off != len(buf):
        raise CheckpointError(f"{len(buf) - off} trailing bytes in checkpoint")
    return Checkpoint(step, next_epoch, seed, meta, tensors)


def save_checkpoint(path: PathLike, ck: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ck))
    os.replace(tmp, path)


def load_checkpoint(path: PathLike) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


def model_from_checkpoint(ck: Checkpoint) -> EquivariantReconstructionModel:
    try:
        cfg = ModelConfig.from_dict(ck.meta["model"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint has no usable model config: {exc}") from None
    model = EquivariantReconstructionModel(cfg)
    state = {k[len("param/") :]: v for k, v in ck.tensors.items() if k.startswith("param/")}
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint does not match its model config: {exc}") from None
    return model


def make_checkpoint(model, opt: AdamState, next_epoch: int, cfg: TrainConfig) -> Checkpoint:
    tensors = {f"param/{k}": v for k, v in model.state_dict().items()}
    tensors.update({f"adam_m/{k}": v for k, v in opt.m.items()})
    tensors.update({f"adam_v/{k}": v for k, v in opt.v.items()})
    meta = {"model": model.cfg.to_dict(), "train": cfg.to_dict()}
    return Checkpoint(opt.t, next_epoch, cfg.seed, meta, tensors)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------
@dataclass
class StepLosses:
    invariance: float
    variance: float
    covariance: float
    reconstruction: float
    total: float


def forward_losses(model: EquivariantReconstructionModel, v1: np.ndarray, v2: np.ndarray, w: LossWeights):
    """Build the composite loss for one view pair batch.

    A branch whose lambda is zero is evaluated without recording, so its
    parameters receive no gradient at all.  Returns the loss Tensor and a
    :class:`StepLosses` of python floats.
    """
    r1, r2 = model.encode(v1), model.encode(v2)
    e1, e2 = model.project(r1), model.project(r2)
    if w.lambda_ssl > 0:
        inv, var, cov = vicreg_loss(e1.z_inv, e2.z_inv, w)
        ssl = weighted_ssl(inv, var, cov, w)
    else:
        with no_grad():
            inv, var, cov = vicreg_loss(e1.z_inv, e2.z_inv, w)
        ssl = None
    if w.lambda_recon > 0:
        rec = recon_loss(model.decode(e1.z_equi, e2.z_equi), v2)
    else:
        with no_grad():
            rec = recon_loss(model.decode(e1.z_equi, e2.z_equi), v2)
    parts = StepLosses(float(inv.data), float(var.data), float(cov.data), float(rec.data), 0.0)
    ssl_val = w.sim_coeff * parts.invariance + w.var_coeff * parts.variance + w.cov_coeff * parts.covariance
    parts.total = total_loss(ssl_val, parts.reconstruction, w)
    if ssl is not None and w.lambda_recon > 0:
        loss = total_loss(ssl, rec, w)
    elif ssl is not None:
        loss = ssl * w.lambda_ssl
    else:
        loss = rec * w.lambda_recon
    return loss, parts


def _fmt(x: float) -> str:
    return repr(float(x))


def metrics_row(epoch: int, means: StepLosses, lr: float, seconds: float) -> str:
    vals = [means.total, means.invariance, means.variance, means.covariance, means.reconstruction, lr, seconds]
    return ",".join([str(epoch)] + [_fmt(v) for v in vals])


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng([seed, epoch, 0x5EED]).permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    return [b for b in batches if len(b) >= 2]


class Trainer:
    """Runs epochs, writes ``metrics.csv`` and checkpoints into ``out_dir``."""

    def __init__(self, model: EquivariantReconstructionModel, cfg: TrainConfig, out_dir: Optional[PathLike] = None) -> None:
        self.model = model
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.opt = AdamState()
        self.next_epoch = 1
        self.history: list[StepLosses] = []

    @classmethod
    def resume(cls, path: PathLike, cfg: TrainConfig, out_dir: Optional[PathLike] = None) -> "Trainer":
        ck = load_checkpoint(path)
        model = model_from_checkpoint(ck)
        tr = cls(model, cfg, out_dir)
        tr.opt.t = ck.step
        for k, v in ck.tensors.items():
            kind, _, name = k.partition("/")
            if kind == "adam_m":
                tr.opt.m[name] = v.copy()
            elif kind == "adam_v":
                tr.opt.v[name] = v.copy()
        tr.next_epoch = ck.next_epoch
        if ck.seed != cfg.seed:
            raise CheckpointError(f"checkpoint seed {ck.seed} differs from config seed {cfg.seed}")
        return tr

    def checkpoint(self) -> Checkpoint:
        return make_checkpoint(self.model, self.opt, self.next_epoch, self.cfg)

    def _write_checkpoint(self, name: str) -> None:
        if self.out_dir is not None:
            save_checkpoint(self.out_dir / name, self.checkpoint())

    def step(self, v1: np.ndarray, v2: np.ndarray) -> StepLosses:
        w = self.cfg.weights
        params = dict(self.model.named_parameters())
        for p in params.values():
            p.grad = None
        with Tape() as tape:
            loss, parts = forward_losses(self.model, v1, v2, w)
        t = self.opt.t + 1
        if not np.isfinite(parts.total) or not np.isfinite(float(loss.data)):
            self._write_checkpoint("last_good.eqrc")
            raise NumericalError("non-finite loss", t)
        backward(loss, tape)
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
        try:
            adam_step(
                {k: p.data for k, p in params.items()},
                grads,
                self.opt,
                t,
                self.cfg.effective_lr,
                self.cfg.beta1,
                self.cfg.beta2,
                self.cfg.eps,
                self.cfg.weight_decay,
            )
        except NumericalError:
            self._write_checkpoint("last_good.eqrc")
            raise
        return parts

    def run_epoch(self, dataset: Dataset, epoch: int) -> StepLosses:
        cfg = self.cfg
        sums = np.zeros(5)
        count = 0
        for idx in epoch_batches(len(dataset), cfg.batch_size, cfg.seed, epoch):
            pair = make_view_pair(dataset.as_float(idx), cfg.views, cfg.seed, epoch, indices=idx)
            parts = self.step(pair.v1, pair.v2)
            sums += [parts.invariance, parts.variance, parts.covariance, parts.reconstruction, parts.total]
            count += 1
        m = sums / max(count, 1)
        return StepLosses(*(float(x) for x in m))

    def fit(self, dataset: Dataset, epochs: Optional[int] = None) -> list[str]:
        """Train up to epoch ``epochs`` (default ``cfg.epochs``); returns the
        metrics rows written during this call."""
        if len(dataset) < 2:
            raise ValueError("training needs at least two images")
        last = epochs or self.cfg.epochs
        metrics_path = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            metrics_path = self.out_dir / "metrics.csv"
            if self.next_epoch == 1 or not metrics_path.exists():
                metrics_path.write_text(METRICS_HEADER + "\n")
            else:
                _truncate_metrics(metrics_path, self.next_epoch - 1)
        rows = []
        while self.next_epoch <= last:
            epoch = self.next_epoch
            t0 = time.perf_counter()
            means = self.run_epoch(dataset, epoch)
            self.history.append(means)
            secs = time.perf_counter() - t0 if self.cfg.log_wall_time else 0.0
            row = metrics_row(epoch, means, self.cfg.effective_lr, secs)
            rows.append(row)
            log.info("epoch %d total=%.5f recon=%.5f inv=%.5f", epoch, means.total, means.reconstruction, means.invariance)
            self.next_epoch = epoch + 1
            if metrics_path is not None:
                with metrics_path.open("a") as fh:
                    fh.write(row + "\n")
            if self.cfg.checkpoint_interval and epoch % self.cfg.checkpoint_interval == 0:
                self._write_checkpoint(f"epoch_{epoch:04d}.eqrc")
        self._write_checkpoint("final.eqrc")
        return rows


def _truncate_metrics(path: Path, epochs_done: int) -> None:
    lines = path.read_text().splitlines()
    keep = [lines[0]] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) <= epochs_done]
    path.write_text("\n".join(keep) + "\n")


def read_metrics(path: PathLike) -> list[dict[str, float]]:
    lines = Path(path).read_text().splitlines()
    keys = lines[0].split(",")
    return [dict(zip(keys, (float(x) for x in ln.split(",")))) for ln in lines[1:]]


def train(dataset: Dataset, model: EquivariantReconstructionModel, cfg: TrainConfig, out_dir: Optional[PathLike] = None) -> Trainer:
    tr = Trainer(model, cfg, out_dir)
    tr.fit(dataset)
    return tr
