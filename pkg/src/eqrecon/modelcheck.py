"""Finite-difference gradient cases for the full model on tiny configs."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .gradcore import Tensor
from .gradcore import functions as F
from .gradcore.gradcheck import Case
from .losses import LossWeights, recon_loss, total_loss, vicreg_loss, weighted_ssl
from .model import DecoderConfig, EncoderConfig, EquivariantReconstructionModel, HeadConfig, ModelConfig

TINY = ModelConfig(
    encoder=EncoderConfig(image_size=4, patch_size=2, token_dim=4, depth=1, heads=2, mlp_ratio=1.0, rep_dim=8),
    head=HeadConfig(hidden_dim=4, embed_dim=4),
    decoder=DecoderConfig(blocks=2, embed_dim=4, heads=2, mlp_ratio=1.0),
    seed=3,
)
BATCH = 4


def tiny_model(cfg: ModelConfig = TINY) -> EquivariantReconstructionModel:
    return EquivariantReconstructionModel(cfg).astype(np.float64)


def _images(rng: np.random.Generator, n: int = BATCH) -> tuple[np.ndarray, np.ndarray]:
    size = TINY.encoder.image_size
    return rng.uniform(0, 1, (n, 3, size, size)), rng.uniform(0, 1, (n, 3, size, size))


def _params(module) -> list[Tensor]:
    return list(module.parameters())


def _encoder_case(rng: np.random.Generator):
    model = tiny_model()
    v1, _ = _images(rng)
    w = rng.normal(size=(BATCH, TINY.encoder.rep_dim))
    return (lambda: F.sum(F.mul(model.encode(v1).full(), w))), _params(model.encoder)


def _heads_case(rng: np.random.Generator):
    model = tiny_model()
    v1, _ = _images(rng)
    rep = model.encode(v1)
    wi = rng.normal(size=(BATCH, TINY.head.embed_dim))
    we = rng.normal(size=(BATCH, TINY.head.embed_dim))

    def fn() -> Tensor:
        e = model.project(rep)
        return F.add(F.sum(F.mul(e.z_inv, wi)), F.sum(F.mul(e.z_equi, we)))

    return fn, _params(model.heads)


def _decoder_case(rng: np.random.Generator):
    model = tiny_model()
    d = TINY.decoder.embed_dim
    z1 = Tensor(rng.normal(size=(BATCH, d)), requires_grad=True, dtype=np.float64)
    z2 = Tensor(rng.normal(size=(BATCH, d)), requires_grad=True, dtype=np.float64)
    _, target = _images(rng)
    return (lambda: recon_loss(model.decode(z1, z2), target)), _params(model.decoder) + [z1, z2]


def _full_loss_case(rng: np.random.Generator):
    model = tiny_model()
    v1, v2 = _images(rng)
    w = LossWeights()

    def fn() -> Tensor:
        e1, e2 = model.project(model.encode(v1)), model.project(model.encode(v2))
        inv, var, cov = vicreg_loss(e1.z_inv, e2.z_inv, w)
        return total_loss(weighted_ssl(inv, var, cov, w), recon_loss(model.decode(e1.z_equi, e2.z_equi), v2), w)

    return fn, _params(model)


MODEL_CASES: dict[str, Case] = {
    "model.encoder": _encoder_case,
    "model.heads": _heads_case,
    "model.decoder": _decoder_case,
    "model.full_loss": _full_loss_case,
}
