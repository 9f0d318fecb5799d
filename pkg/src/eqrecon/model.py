"""Encoder, split heads and the cross-attention reconstruction decoder."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Any, Optional, Union

import numpy as np

from .gradcore import LayerNorm, Linear, MLP, Module, Parameter, Tensor
from .gradcore import functions as F
from .gradcore.tensor import DEFAULT_DTYPE, DimensionError

ArrayOrTensor = Union[np.ndarray, Tensor]


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 4
    token_dim: int = 512
    depth: int = 6
    heads: int = 8
    mlp_ratio: float = 4.0
    # pooled output width; a linear map is added when it differs from token_dim
    rep_dim: int = 512

    def __post_init__(self) -> None:
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.token_dim % self.heads:
            raise ValueError(f"token_dim {self.token_dim} not divisible by heads {self.heads}")
        if self.rep_dim % 2:
            raise ValueError(f"rep_dim must be even to split in halves, got {self.rep_dim}")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size**2


@dataclass(frozen=True)
class HeadConfig:
    hidden_dim: int = 256
    embed_dim: int = 192


@dataclass(frozen=True)
class DecoderConfig:
    blocks: int = 6
    embed_dim: int = 192
    heads: int = 4
    mlp_ratio: float = 4.0
    attention_scaling: bool = True

    def __post_init__(self) -> None:
        if self.blocks < 1:
            raise ValueError("decoder needs at least one block")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = EncoderConfig()
    head: HeadConfig = HeadConfig()
    decoder: DecoderConfig = DecoderConfig()
    seed: int = 0

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        return cls(
            encoder=EncoderConfig(**d["encoder"]),
            head=HeadConfig(**d["head"]),
            decoder=DecoderConfig(**d["decoder"]),
            seed=d.get("seed", 0),
        )


# --------------------------------------------------------------------------
# patches
# --------------------------------------------------------------------------
def patchify(images: ArrayOrTensor, patch: int) -> ArrayOrTensor:
    """(N, 3, H, W) -> (N, P, 3 * patch**2), patches in row-major grid
    order, each flattened as (row, col, channel)."""
    n, c, h, w = images.shape
    if h % patch or w % patch:
        raise DimensionError(f"image {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    shape6 = (n, c, gh, patch, gw, patch)
    axes = (0, 2, 4, 3, 5, 1)
    if isinstance(images, Tensor):
        x = F.transpose(F.reshape(images, shape6), axes)
        return F.reshape(x, (n, gh * gw, patch * patch * c))
    return np.ascontiguousarray(images.reshape(shape6).transpose(axes)).reshape(n, gh * gw, patch * patch * c)


def unpatchify(tokens: ArrayOrTensor, patch: int, height: int, width: int) -> ArrayOrTensor:
    """Inverse of :func:`patchify`."""
    n, p, d = tokens.shape
    c = d // (patch * patch)
    gh, gw = height // patch, width // patch
    if gh * gw != p or c * patch * patch != d:
        raise DimensionError(f"{p} tokens of width {d} do not tile a {height}x{width} image with patch {patch}")
    shape6 = (n, gh, gw, patch, patch, c)
    axes = (0, 5, 1, 3, 2, 4)
    if isinstance(tokens, Tensor):
        x = F.transpose(F.reshape(tokens, shape6), axes)
        return F.reshape(x, (n, c, height, width))
    return np.ascontiguousarray(tokens.reshape(shape6).transpose(axes)).reshape(n, c, height, width)


# --------------------------------------------------------------------------
# attention
# --------------------------------------------------------------------------
def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, t, d = x.shape
    return F.transpose(F.reshape(x, (n, t, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    n, h, t, dh = x.shape
    return F.reshape(F.transpose(x, (0, 2, 1, 3)), (n, t, h * dh))


def cross_attention(
    queries: Tensor,
    keys_values: Tensor,
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    heads: int = 1,
    scaled: bool = True,
    return_weights: bool = False,
):
    """softmax((Q W_q)(K W_k)^T) (K W_v), per head.

    ``queries`` is (N, Tq, D) and ``keys_values`` is (N, Tk, D); the result is
    (N, Tq, D).  Logits are divided by sqrt(D / heads) when ``scaled``.
    """
    if queries.ndim != 3 or keys_values.ndim != 3:
        raise DimensionError(f"cross_attention expects 3-d token batches, got {queries.shape} and {keys_values.shape}")
    if queries.shape[0] != keys_values.shape[0] or queries.shape[2] != keys_values.shape[2]:
        raise DimensionError(f"cross_attention: query {queries.shape} and key/value {keys_values.shape} disagree")
    d = w_q.shape[1]
    if d % heads:
        raise DimensionError(f"projection width {d} not divisible by {heads} heads")
    q = _split_heads(F.matmul(queries, w_q), heads)
    k = _split_heads(F.matmul(keys_values, w_k), heads)
    v = _split_heads(F.matmul(keys_values, w_v), heads)
    logits = F.matmul(q, F.transpose(k, (0, 1, 3, 2)))
    if scaled:
        logits = F.mul(logits, 1.0 / math.sqrt(d // heads))
    attn = F.softmax(logits, axis=-1)
    out = _merge_heads(F.matmul(attn, v))
    return (out, attn) if return_weights else out


class Attention(Module):
    def __init__(self, rng: np.random.Generator, dim: int, heads: int, scaled: bool = True) -> None:
        self.w_q = Parameter(_xavier(rng, dim, dim))
        self.w_k = Parameter(_xavier(rng, dim, dim))
        self.w_v = Parameter(_xavier(rng, dim, dim))
        self.proj = Linear(rng, dim, dim)
        self.heads = heads
        self.scaled = scaled

    def forward(self, x: Tensor, context: Optional[Tensor] = None) -> Tensor:
        ctx = x if context is None else context
        y = cross_attention(x, ctx, self.w_q, self.w_k, self.w_v, self.heads, self.scaled)
        return self.proj(y)


class Block(Module):
    """Pre-norm transformer block; with ``cross=True`` the attention reads
    keys and values from a separate (separately normalised) context."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, mlp_ratio: float, cross: bool = False, scaled: bool = True) -> None:
        self.norm1 = LayerNorm(dim)
        self.norm_ctx = LayerNorm(dim) if cross else None
        self.attn = Attention(rng, dim, heads, scaled)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(rng, [dim, int(dim * mlp_ratio), dim])
        self.cross = cross

    def forward(self, x: Tensor, context: Optional[Tensor] = None) -> Tensor:
        if self.cross:
            if context is None:
                raise ValueError("cross-attention block needs a context")
            x = F.add(x, self.attn(self.norm1(x), self.norm_ctx(context)))
        else:
            x = F.add(x, self.attn(self.norm1(x)))
        return F.add(x, self.mlp(self.norm2(x)))


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(DEFAULT_DTYPE)


def _pos_embed(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    return (0.02 * rng.standard_normal((n, dim))).astype(DEFAULT_DTYPE)


# --------------------------------------------------------------------------
# networks
# --------------------------------------------------------------------------
@dataclass
class SplitRepresentation:
    y_inv: Tensor
    y_equi: Tensor

    def full(self) -> Tensor:
        return F.concat([self.y_inv, self.y_equi], axis=-1)


@dataclass
class EmbeddingPair:
    z_inv: Tensor
    z_equi: Tensor


class Encoder(Module):
    """Patch embedding, learned positions, pre-norm blocks, mean pooling."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator) -> None:
        self.cfg = cfg
        self.patch_embed = Linear(rng, cfg.patch_dim, cfg.token_dim)
        self.pos = Parameter(_pos_embed(rng, cfg.num_patches, cfg.token_dim))
        self.blocks = [Block(rng, cfg.token_dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.token_dim)
        self.out_proj = Linear(rng, cfg.token_dim, cfg.rep_dim) if cfg.rep_dim != cfg.token_dim else None

    def forward(self, images: ArrayOrTensor) -> SplitRepresentation:
        cfg = self.cfg
        if tuple(images.shape[1:]) != (3, cfg.image_size, cfg.image_size):
            raise DimensionError(f"encoder expects (N, 3, {cfg.image_size}, {cfg.image_size}), got {tuple(images.shape)}")
        tokens = patchify(images, cfg.patch_size)
        if not isinstance(tokens, Tensor):
            tokens = Tensor(tokens.astype(self.pos.dtype, copy=False))
        x = F.add(self.patch_embed(tokens), self.pos)
        for blk in self.blocks:
            x = blk(x)
        pooled = F.mean(self.norm(x), axis=1)
        if self.out_proj is not None:
            pooled = self.out_proj(pooled)
        half = cfg.rep_dim // 2
        return SplitRepresentation(pooled[:, :half], pooled[:, half:])


class Heads(Module):
    def __init__(self, rep_half: int, cfg: HeadConfig, rng: np.random.Generator) -> None:
        self.g_inv = MLP(rng, [rep_half, cfg.hidden_dim, cfg.embed_dim])
        self.g_equi = MLP(rng, [rep_half, cfg.hidden_dim, cfg.embed_dim])

    def forward(self, rep: SplitRepresentation) -> EmbeddingPair:
        return EmbeddingPair(self.g_inv(rep.y_inv), self.g_equi(rep.y_equi))


class Decoder(Module):
    """Block 1 cross-attends from view-2 queries to view-1 keys/values;
    the remaining blocks self-attend.  Tokens are the per-image embedding
    broadcast over patch positions plus a learned positional embedding."""

    def __init__(self, cfg: DecoderConfig, num_patches: int, patch_dim: int, rng: np.random.Generator) -> None:
        self.cfg = cfg
        self.pos = Parameter(_pos_embed(rng, num_patches, cfg.embed_dim))
        self.blocks = [
            Block(rng, cfg.embed_dim, cfg.heads, cfg.mlp_ratio, cross=(i == 0), scaled=cfg.attention_scaling)
            for i in range(cfg.blocks)
        ]
        self.norm = LayerNorm(cfg.embed_dim)
        self.out = Linear(rng, cfg.embed_dim, patch_dim)

    def tokens(self, z: Tensor) -> Tensor:
        n, d = z.shape
        if d != self.cfg.embed_dim:
            raise DimensionError(f"decoder expects {self.cfg.embed_dim}-d embeddings, got {d}")
        return F.add(F.reshape(z, (n, 1, d)), self.pos)

    def forward(self, z_equi_v1: Tensor, z_equi_v2: Tensor) -> Tensor:
        """Patch tokens (N, P, 3 * patch**2) reconstructing view 2."""
        x = self.tokens(z_equi_v2)
        ctx = self.tokens(z_equi_v1)
        x = self.blocks[0](x, ctx)
        for blk in self.blocks[1:]:
            x = blk(x)
        return self.out(self.norm(x))


class EquivariantReconstructionModel(Module):
    """Shared encoder for both views, split heads, reconstruction decoder."""

    def __init__(self, cfg: ModelConfig = ModelConfig()) -> None:
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        enc = cfg.encoder
        self.encoder = Encoder(enc, rng)
        self.heads = Heads(enc.rep_dim // 2, cfg.head, rng)
        self.decoder = Decoder(cfg.decoder, enc.num_patches, enc.patch_dim, rng)

    def encode(self, images: ArrayOrTensor) -> SplitRepresentation:
        return self.encoder(images)

    def project(self, rep: SplitRepresentation) -> EmbeddingPair:
        return self.heads(rep)

    def decode(self, z_equi_v1: Tensor, z_equi_v2: Tensor) -> Tensor:
        enc = self.cfg.encoder
        tokens = self.decoder(z_equi_v1, z_equi_v2)
        return unpatchify(tokens, enc.patch_size, enc.image_size, enc.image_size)

    def parameter_groups(self) -> dict[str, list[str]]:
        names = [n for n, _ in self.named_parameters()]
        return {
            "encoder": [n for n in names if n.startswith("encoder.")],
            "g_inv": [n for n in names if n.startswith("heads.g_inv.")],
            "g_equi": [n for n in names if n.startswith("heads.g_equi.")],
            "decoder": [n for n in names if n.startswith("decoder.")],
        }
