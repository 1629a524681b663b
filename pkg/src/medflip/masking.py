"""Random patch-token masking.

Mask plans are drawn from xoshiro256** seeded through SplitMix64, both
implemented here on Python integers so a plan depends only on
``(total_tokens, mask_ratio, seed)`` and is identical on every platform and
numpy version.

Algorithm for a plan with ``L`` tokens and ``k = L - floor(ratio * L)``
visible tokens:

1. state = four successive SplitMix64 outputs starting from ``seed``;
2. partial Fisher-Yates over ``[0, 1, ..., L-1]``: for ``i`` in ``0..k-1``
   draw ``j`` uniformly from ``[i, L)`` (rejection sampling on the top bits of
   xoshiro256** output, no modulo bias) and swap positions ``i`` and ``j``;
3. the first ``k`` entries, sorted ascending, are the visible indices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import DomainError, ShapeError, Tensor, gather_rows

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> tuple[int, int]:
    """One SplitMix64 step: returns (next_state, output)."""
    x = (x + GOLDEN_GAMMA) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return x, z ^ (z >> 31)


def mix_seed(*parts: int) -> int:
    """Fold integers into one 64-bit seed: h <- splitmix64_out(h ^ part)."""
    h = 0
    for part in parts:
        _, h = splitmix64(h ^ (part & MASK64))
    return h


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256:
    """xoshiro256** 1.0 (Blackman & Vigna)."""

    def __init__(self, seed: int):
        state = seed & MASK64
        s = []
        for _ in range(4):
            state, out = splitmix64(state)
            s.append(out)
        self.s = s

    def next_u64(self) -> int:
        s = self.s
        result = (_rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def below(self, bound: int) -> int:
        """Uniform integer in [0, bound) by rejection on the top bits."""
        if bound <= 1:
            return 0
        bits = (bound - 1).bit_length()
        while True:
            r = self.next_u64() >> (64 - bits)
            if r < bound:
                return r


def visible_count(total_tokens: int, mask_ratio: float) -> int:
    return total_tokens - math.floor(mask_ratio * total_tokens)


@dataclass(frozen=True)
class MaskPlan:
    total_tokens: int
    mask_ratio: float
    visible_indices: tuple[int, ...]
    seed: int

    @property
    def n_visible(self) -> int:
        return len(self.visible_indices)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.visible_indices, dtype=np.int64)


def make_mask_plan(total_tokens: int, mask_ratio: float, seed: int) -> MaskPlan:
    if not 0.0 <= mask_ratio < 1.0:
        raise DomainError(f"mask_ratio must lie in [0, 1), got {mask_ratio}")
    if total_tokens < 1:
        raise DomainError(f"total_tokens must be >= 1, got {total_tokens}")
    k = visible_count(total_tokens, mask_ratio)
    if k == total_tokens:
        return MaskPlan(total_tokens, mask_ratio, tuple(range(total_tokens)), seed)
    rng = Xoshiro256(seed)
    perm = list(range(total_tokens))
    for i in range(k):
        j = i + rng.below(total_tokens - i)
        perm[i], perm[j] = perm[j], perm[i]
    return MaskPlan(total_tokens, mask_ratio, tuple(sorted(perm[:k])), seed)


def plan_seed(global_seed: int, epoch: int, sample_index: int) -> int:
    """Per-image mask seed; ``sample_index`` counts draws within the epoch."""
    return mix_seed(global_seed, epoch, sample_index)


def apply_mask(tokens: Tensor, plan: MaskPlan) -> Tensor:
    """Keep the visible rows of an (L, d) token matrix, in index order."""
    if tokens.ndim != 2 or tokens.shape[0] != plan.total_tokens:
        raise ShapeError(f"plan expects {plan.total_tokens} tokens, got tensor of shape {tokens.shape}")
    return gather_rows(tokens, plan.as_array())


def apply_masks(tokens: Tensor, plans: list[MaskPlan]) -> Tensor:
    """Batched ``apply_mask`` for (N, L, d) tokens; all plans share one visible count."""
    if tokens.ndim != 3 or len(plans) != tokens.shape[0]:
        raise ShapeError(f"need one plan per image, got {len(plans)} plans for shape {tokens.shape}")
    counts = {p.n_visible for p in plans}
    if len(counts) != 1 or any(p.total_tokens != tokens.shape[1] for p in plans):
        raise ShapeError("mask plans disagree on token or visible counts")
    index = np.stack([p.as_array() for p in plans])
    return gather_rows(tokens, index)
