"""Frozen-encoder evaluation: transform regression R² and linear classification."""

from __future__ import annotations

import io
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .dataset import Dataset
from .gradcore import ContractError, Linear, MLP, Module, Tape, Tensor, backward, no_grad
from .gradcore import functions as F
from .model import EquivariantReconstructionModel
from .train import AdamState, adam_step
from .views import PARAM_NAMES, TransformSpec, ViewPair, make_view_pair

log = logging.getLogger(__name__)

# view pairs for evaluation use this epoch index; training epochs start at 1
EVAL_EPOCH = 0
FEATURE_BATCH = 256


class R2Warning(UserWarning):
    pass


def r_squared(y_true: np.ndarray, y_pred: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-dimension R² and their mean.

    Dimensions whose target has zero variance are undefined; they come back
    as NaN, are left out of the mean and trigger an :class:`R2Warning`.
    """
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.ndim == 1:
        y_true, y_pred = y_true[:, None], y_pred.reshape(-1, 1)
    if y_true.shape != y_pred.shape:
        raise ContractError(f"r_squared: shapes {y_true.shape} and {y_pred.shape} differ")
    if y_true.shape[0] < 2:
        raise ContractError("r_squared needs at least two samples")
    ss_res = np.sum((y_true - y_pred) ** 2, axis=0)
    ss_tot = np.sum((y_true - y_true.mean(axis=0)) ** 2, axis=0)
    valid = ss_tot > 0
    r2 = np.full(y_true.shape[1], np.nan)
    r2[valid] = 1.0 - ss_res[valid] / ss_tot[valid]
    if not valid.all():
        warnings.warn(f"r_squared: target dims {np.flatnonzero(~valid).tolist()} have zero variance and are excluded", R2Warning, stacklevel=2)
    if not valid.any():
        raise ContractError("r_squared: every target dimension has zero variance")
    return r2, float(np.mean(r2[valid]))


@dataclass(frozen=True)
class ProbeConfig:
    hidden: int = 256
    layers: int = 3
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 256
    val_fraction: float = 0.2
    representation: str = "equi"  # or "full"

    def __post_init__(self) -> None:
        if self.hidden < 1 or self.layers < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("probe widths, depth, epochs and batch size must be positive")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if self.representation not in ("equi", "full"):
            raise ValueError(f"representation must be 'equi' or 'full', got {self.representation!r}")


@dataclass
class R2Report:
    families: dict[str, float]
    params: dict[str, float]
    mean: float
    n_train: int
    n_val: int
    excluded: list[str] = field(default_factory=list)
    train_mean: float = float("nan")

    def to_csv(self) -> str:
        rows = ["family,r2"] + [f"{k},{v!r}" for k, v in self.families.items()] + [f"mean,{self.mean!r}"]
        return "\n".join(rows) + "\n"

    def table(self) -> str:
        out = io.StringIO()
        out.write(f"{'family':<12} {'R2':>8}\n")
        for k, v in self.families.items():
            out.write(f"{k:<12} {v:>8.4f}\n")
        out.write(f"{'mean':<12} {self.mean:>8.4f}\n")
        out.write(f"(train {self.n_train}, held-out {self.n_val})\n")
        return out.getvalue()


@dataclass
class ClassificationReport:
    accuracy: float
    n_train: int
    n_val: int
    n_classes: int

    def to_csv(self) -> str:
        return f"metric,value\naccuracy,{self.accuracy!r}\n"

    def table(self) -> str:
        return f"top-1 accuracy {self.accuracy:.4f} ({self.n_classes} classes, train {self.n_train}, held-out {self.n_val})\n"


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------
def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng([seed, 0xE7A1]).permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    if n - n_val < 2:
        raise ContractError(f"need at least 3 samples for a train/validation split, got {n}")
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _standardize(train: np.ndarray, *others: np.ndarray) -> list[np.ndarray]:
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd[sd < 1e-8] = 1.0
    return [((x - mu) / sd).astype(np.float32) for x in (train, *others)]


def _fit(module: Module, loss_fn: Callable[[Tensor, np.ndarray], Tensor], x: np.ndarray, y: np.ndarray, cfg: ProbeConfig, seed: int) -> None:
    rng = np.random.default_rng([seed, 0x9B0E])
    params = dict(module.named_parameters())
    opt = AdamState()
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(x))
        for i in range(0, len(x), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            for p in params.values():
                p.grad = None
            with Tape() as tape:
                loss = loss_fn(module(Tensor(x[idx])), y[idx])
            backward(loss, tape)
            step += 1
            adam_step({k: p.data for k, p in params.items()}, {k: p.grad for k, p in params.items() if p.grad is not None}, opt, step, cfg.lr)


def _predict(module: Module, x: np.ndarray) -> np.ndarray:
    with no_grad():
        return np.concatenate([module(Tensor(x[i : i + FEATURE_BATCH])).data for i in range(0, len(x), FEATURE_BATCH)])


def encode_features(model: EquivariantReconstructionModel, images: np.ndarray, representation: str = "equi") -> np.ndarray:
    """Frozen-encoder features, batched and without recording gradients."""
    out = []
    with no_grad():
        for i in range(0, len(images), FEATURE_BATCH):
            rep = model.encode(images[i : i + FEATURE_BATCH])
            feats = rep.y_equi if representation == "equi" else rep.full()
            out.append(feats.data)
    return np.concatenate(out).astype(np.float64)


def eval_view_pairs(dataset: Dataset, spec: TransformSpec, seed: int) -> ViewPair:
    pairs = []
    for i in range(0, len(dataset), FEATURE_BATCH):
        idx = np.arange(i, min(i + FEATURE_BATCH, len(dataset)))
        pairs.append(make_view_pair(dataset.as_float(idx), spec, seed, EVAL_EPOCH, indices=idx))
    return ViewPair(
        np.concatenate([p.v1 for p in pairs]),
        np.concatenate([p.v2 for p in pairs]),
        [q for p in pairs for q in p.params],
        spec,
    )


# --------------------------------------------------------------------------
# evaluations
# --------------------------------------------------------------------------
def eval_equivariance(
    model: Optional[EquivariantReconstructionModel],
    dataset: Dataset,
    spec: TransformSpec,
    probe: ProbeConfig = ProbeConfig(),
    seed: int = 0,
    feature_fn: Optional[Callable[[ViewPair], np.ndarray]] = None,
) -> R2Report:
    """Regress the normalised relative transform parameters from frozen
    features of both views with an MLP probe; R² on the held-out split.

    ``feature_fn`` replaces the encoder (used for probe-correctness oracles).
    """
    pair = eval_view_pairs(dataset, spec, seed)
    targets = pair.targets()
    if feature_fn is not None:
        feats = np.asarray(feature_fn(pair), dtype=np.float64)
    else:
        if model is None:
            raise ContractError("eval_equivariance needs a model or a feature_fn")
        feats = np.concatenate(
            [encode_features(model, pair.v1, probe.representation), encode_features(model, pair.v2, probe.representation)], axis=1
        )
    tr, va = split_indices(len(feats), probe.val_fraction, seed)
    x_tr, x_va = _standardize(feats[tr], feats[va])
    y_tr = targets[tr].astype(np.float32)
    dims = [x_tr.shape[1]] + [probe.hidden] * (probe.layers - 1) + [targets.shape[1]]
    mlp = MLP(np.random.default_rng([seed, 0x3A1]), dims)
    _fit(mlp, F.mse, x_tr, y_tr, probe, seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", R2Warning)
        per_dim, mean = r_squared(targets[va], _predict(mlp, x_va))
        train_mean = r_squared(targets[tr], _predict(mlp, x_tr))[1]
    keys = spec.param_keys()
    params = {k: float(v) for k, v in zip(keys, per_dim)}
    excluded = [k for k, v in params.items() if math.isnan(v)]
    if excluded:
        warnings.warn(f"eval_equivariance: parameters {excluded} are constant on the held-out split and excluded", R2Warning, stacklevel=2)
    families = {}
    for fam in spec.families:
        vals = [params[f"{fam}.{p}"] for p in PARAM_NAMES[fam] if not math.isnan(params[f"{fam}.{p}"])]
        families[fam] = float(np.mean(vals)) if vals else float("nan")
    return R2Report(families, params, mean, len(tr), len(va), excluded, train_mean)


def eval_classification(
    model: Optional[EquivariantReconstructionModel],
    dataset: Dataset,
    seed: int = 0,
    probe: ProbeConfig = ProbeConfig(),
    feature_fn: Optional[Callable[[Dataset], np.ndarray]] = None,
    allow_single_class: bool = False,
) -> ClassificationReport:
    """Linear layer on the pooled full representation of unaugmented images,
    trained with cross-entropy; top-1 accuracy on the held-out split.

    A dataset with one class is a contract error unless
    ``allow_single_class`` is set (harness smoke tests only).
    """
    classes, labels = np.unique(dataset.labels, return_inverse=True)
    if len(classes) < 2 and not allow_single_class:
        raise ContractError(f"classification needs at least two classes, dataset has {len(classes)}")
    if feature_fn is not None:
        feats = np.asarray(feature_fn(dataset), dtype=np.float64)
    else:
        if model is None:
            raise ContractError("eval_classification needs a model or a feature_fn")
        feats = encode_features(model, dataset.as_float(), "full")
    tr, va = split_indices(len(feats), probe.val_fraction, seed)
    x_tr, x_va = _standardize(feats[tr], feats[va])
    n_out = max(len(classes), 2)
    layer = Linear(np.random.default_rng([seed, 0xC1A5]), x_tr.shape[1], n_out)
    # zero start: every class begins equally likely, so the fit is init-free
    for p in layer.parameters():
        p.data[...] = 0.0
    _fit(layer, F.cross_entropy, x_tr, labels[tr], probe, seed)
    pred = _predict(layer, x_va).argmax(axis=1)
    acc = float(np.mean(pred == labels[va]))
    return ClassificationReport(acc, len(tr), len(va), len(classes))
