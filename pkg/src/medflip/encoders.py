"""Patch vision transformer and text transformer producing projected embeddings."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .masking import MaskPlan, apply_masks
from .tensor import ShapeError, Tensor


class VocabularyError(ValueError):
    pass


# -- layers -------------------------------------------------------------------

class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


def _param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        limit = math.sqrt(6.0 / (d_in + d_out))
        self.weight = _param(rng.uniform(-limit, limit, size=(d_in, d_out)))
        self.bias = _param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        y = T.matmul(T.reshape(x, (-1, x.shape[-1])), self.weight)
        if self.bias is not None:
            y = y + self.bias
        return T.reshape(y, (*lead, y.shape[-1]))


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = _param(np.ones(dim))
        self.beta = _param(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ShapeError(f"embed_dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        n, length, d = x.shape
        return T.permute(T.reshape(x, (n, length, self.heads, d // self.heads)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        n, length, d = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(d // self.heads))
        mask = None if key_mask is None else key_mask[:, None, None, :]
        attn = T.softmax_rows(scores, 1.0, mask=mask)
        y = T.reshape(T.permute(T.matmul(attn, v), (0, 2, 1, 3)), (n, length, d))
        return self.out(y)


class Block(Module):
    """Pre-norm transformer block with a GELU MLP."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, mlp_ratio * dim, rng)
        self.fc2 = Linear(mlp_ratio * dim, dim, rng)

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        x = x + self.attn(self.norm1(x), key_mask)
        return x + self.fc2(T.gelu(self.fc1(self.norm2(x))))


# -- patches --------------------------------------------------------------------

def patchify(image, patch_size: int) -> np.ndarray:
    """(H, W, C) or (N, H, W, C) -> (L, p*p*C) or (N, L, p*p*C), row-major patch order."""
    x = image.data if isinstance(image, Tensor) else np.asarray(image)
    single = x.ndim == 3
    if single:
        x = x[None]
    n, h, w, c = x.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
    x = x.reshape(n, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(n, (h // p) * (w // p), p * p * c)
    return x[0] if single else x


def unpatchify(tokens, patch_size: int, height: int, width: int) -> np.ndarray:
    x = tokens.data if isinstance(tokens, Tensor) else np.asarray(tokens)
    single = x.ndim == 2
    if single:
        x = x[None]
    n, length, dim = x.shape
    p = patch_size
    c = dim // (p * p)
    x = x.reshape(n, height // p, width // p, p, p, c).transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(n, height, width, c)
    return x[0] if single else x


# -- encoders -------------------------------------------------------------------

@dataclass
class VisionEncoderConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 1
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    projection_dim: int = 32
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ShapeError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ShapeError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def num_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass
class TextEncoderConfig:
    vocab_size: int = 64
    max_length: int = 32
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    projection_dim: int = 32
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ShapeError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")


class VisionEncoder(Module):
    def __init__(self, cfg: VisionEncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        patch_dim = cfg.patch_size ** 2 * cfg.channels
        self.patch_embed = Linear(patch_dim, cfg.embed_dim, rng)
        self.pos_embed = _param(rng.normal(0.0, 0.02, size=(cfg.num_tokens, cfg.embed_dim)))
        self.blocks = [Block(cfg.embed_dim, cfg.heads, rng, cfg.mlp_ratio) for _ in range(cfg.depth)]
        self.proj = Linear(cfg.embed_dim, cfg.projection_dim, rng)

    def __call__(self, images: np.ndarray, plans: Sequence[MaskPlan] | None = None) -> Tensor:
        tokens = Tensor(patchify(images, self.cfg.patch_size))
        x = self.patch_embed(tokens) + self.pos_embed  # positions index the full grid
        if plans is not None:
            x = apply_masks(x, list(plans))
        for block in self.blocks:
            x = block(x)
        return self.proj(T.mean(x, axis=1))


class TextEncoder(Module):
    def __init__(self, cfg: TextEncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.token_embed = _param(rng.normal(0.0, 0.02, size=(cfg.vocab_size, cfg.embed_dim)))
        self.pos_embed = _param(rng.normal(0.0, 0.02, size=(cfg.max_length, cfg.embed_dim)))
        self.blocks = [Block(cfg.embed_dim, cfg.heads, rng, cfg.mlp_ratio) for _ in range(cfg.depth)]
        self.proj = Linear(cfg.embed_dim, cfg.projection_dim, rng)

    def __call__(self, ids: np.ndarray, attention_mask: np.ndarray) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        mask = np.asarray(attention_mask, dtype=bool)
        if ids.size and (ids.max() >= self.cfg.vocab_size or ids.min() < 0):
            raise VocabularyError(f"token id outside vocabulary of size {self.cfg.vocab_size}")
        if ids.shape[1] > self.cfg.max_length:
            raise ShapeError(f"sequence length {ids.shape[1]} exceeds max_length {self.cfg.max_length}")
        x = T.embedding(self.token_embed, ids) + self.pos_embed[: ids.shape[1]]
        for block in self.blocks:
            x = block(x, key_mask=mask)
        weights = mask / np.maximum(mask.sum(axis=1, keepdims=True), 1)
        pooled = T.sum(x * Tensor(weights[:, :, None]), axis=1)
        return self.proj(pooled)


@dataclass
class EmbeddingPair:
    v_p: Tensor
    t_p: Tensor
    v_norm: Tensor
    t_norm: Tensor


class MedFLIPModel(Module):
    def __init__(self, vision: VisionEncoderConfig, text: TextEncoderConfig, seed: int = 0):
        if vision.projection_dim != text.projection_dim:
            raise ShapeError("vision and text projection_dim must match")
        rng = np.random.default_rng(seed)
        self.vision = VisionEncoder(vision, rng)
        self.text = TextEncoder(text, rng)

    def embed(self, images: np.ndarray, plans, ids: np.ndarray, attention_mask: np.ndarray) -> EmbeddingPair:
        v_p = self.vision(images, plans)
        t_p = self.text(ids, attention_mask)
        return EmbeddingPair(v_p, t_p, T.l2_normalize_rows(v_p), T.l2_normalize_rows(t_p))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            missing = sorted(set(params) ^ set(state))
            raise KeyError(f"parameter names differ: {missing[:5]}")
        for name, p in params.items():
            if p.data.shape != state[name].shape:
                raise ShapeError(f"{name}: expected shape {p.data.shape}, got {state[name].shape}")
            p.data = np.array(state[name], dtype=np.float64)
