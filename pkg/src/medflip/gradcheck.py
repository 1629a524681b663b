"""Central finite-difference checks for every differentiable op.

Each case builds fresh random inputs from a seed and reduces the op output to
a scalar with a random weighting, so the whole Jacobian is exercised. The
error reported is ``max|analytic - numeric| / max(max|analytic|, max|numeric|, floor)``
with ``floor = 1e-8`` for single ops.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .losses import compute_loss
from .tensor import Tensor

OP_TOL = 1e-4
COMPOSITE_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tolerance


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` with respect to ``x``, perturbed in place."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check(build: Callable[..., Tensor], inputs: list[np.ndarray], h: float = 1e-5) -> float:
    """Worst relative error over all inputs of the scalar returned by ``build``."""
    tensors = [Tensor(x, requires_grad=True) for x in inputs]
    build(*tensors).backward()
    worst = 0.0
    for t in tensors:
        def f():
            with T.no_grad():
                return build(*[Tensor(u.data) for u in tensors]).item()

        worst = max(worst, rel_error(t.grad, numeric_grad(f, t.data, h)))
    return worst


def _weighted(rng: np.random.Generator):
    """Reduce any output to a scalar with a fixed random weighting."""
    cache = {}

    def reduce(y: Tensor) -> Tensor:
        if y.shape not in cache:
            cache[y.shape] = Tensor(rng.normal(size=y.shape))
        return T.sum(T.mul(y, cache[y.shape]))

    return reduce


def _cases(rng: np.random.Generator) -> list[tuple[str, Callable, list[np.ndarray], float]]:
    w = _weighted(rng)
    n = rng.normal
    ids = rng.integers(0, 6, size=(2, 3))
    rows = rng.integers(0, 4, size=3)
    batch_rows = np.stack([rng.permutation(5)[:3] for _ in range(2)])
    mask = np.ones((3, 4), dtype=bool)
    mask[:, -1] = False
    gap_matrix = n(size=(5, 4))
    labels_img = (rng.random((4, 5)) < 0.4).astype(float)
    labels_txt = (rng.random((4, 5)) < 0.4).astype(float)
    labels_img[np.arange(4), rng.integers(0, 5, 4)] = 1.0
    labels_txt[np.arange(4), rng.integers(0, 5, 4)] = 1.0

    def composite(mode):
        def build(vp, tp):
            pair = _Pair(T.l2_normalize_rows(vp), T.l2_normalize_rows(tp))
            return compute_loss(pair, labels_img, labels_txt, mode=mode).total
        return build

    return [
        ("add", lambda a, b: w(T.add(a, b)), [n(size=(3, 4)), n(size=(4,))], OP_TOL),
        ("sub", lambda a, b: w(T.sub(a, b)), [n(size=(3, 4)), n(size=(3, 1))], OP_TOL),
        ("mul", lambda a, b: w(T.mul(a, b)), [n(size=(3, 4)), n(size=(3, 4))], OP_TOL),
        ("scale", lambda a: w(T.scale(a, 1.7)), [n(size=(3, 4))], OP_TOL),
        ("exp", lambda a: w(T.exp(a)), [n(size=(3, 4))], OP_TOL),
        ("log", lambda a: w(T.log(a)), [rng.uniform(0.5, 2.0, size=(3, 4))], OP_TOL),
        ("gelu", lambda a: w(T.gelu(a)), [n(size=(3, 4))], OP_TOL),
        ("sum", lambda a: w(T.sum(a, axis=1, keepdims=True)), [n(size=(3, 4))], OP_TOL),
        ("mean", lambda a: w(T.mean(a, axis=0)), [n(size=(3, 4))], OP_TOL),
        ("reshape", lambda a: w(T.reshape(a, (4, 3))), [n(size=(3, 4))], OP_TOL),
        ("permute", lambda a: w(T.permute(a, (2, 0, 1))), [n(size=(2, 3, 4))], OP_TOL),
        ("transpose", lambda a: w(T.transpose(a)), [n(size=(2, 3, 4))], OP_TOL),
        ("getitem", lambda a: w(T.getitem(a, (slice(1, 3), rows))), [n(size=(3, 4))], OP_TOL),
        ("gather_rows", lambda a: w(T.gather_rows(a, batch_rows)), [n(size=(2, 5, 3))], OP_TOL),
        ("embedding", lambda a: w(T.embedding(a, ids)), [n(size=(6, 3))], OP_TOL),
        ("matmul", lambda a, b: w(T.matmul(a, b)), [n(size=(2, 3, 4)), n(size=(4, 5))], OP_TOL),
        ("softmax_rows", lambda a: w(T.softmax_rows(a, 0.5, mask)), [n(size=(3, 4))], OP_TOL),
        ("l2_normalize_rows", lambda a: w(T.l2_normalize_rows(a)), [n(size=(3, 4))], OP_TOL),
        ("layer_norm", lambda a, g, b: w(T.layer_norm(a, g, b)),
         [n(size=(3, 4)), n(size=(4,)), n(size=(4,))], OP_TOL),
        ("svd_sigma", lambda a: w(T.svd(a)[1]), [gap_matrix], OP_TOL),
        ("medflip_loss_soft_ce", composite("soft_ce"), [n(size=(4, 8)), n(size=(4, 8))], COMPOSITE_TOL),
        ("medflip_loss_verbatim", composite("verbatim"), [n(size=(4, 8)), n(size=(4, 8))], COMPOSITE_TOL),
    ]


@dataclass
class _Pair:
    v_norm: Tensor
    t_norm: Tensor


def run_suite(seeds=range(50), base_seed: int = 0) -> dict[str, CheckResult]:
    """Worst error per op over all seeds."""
    worst: dict[str, CheckResult] = {}
    for s in seeds:
        rng = np.random.default_rng([base_seed, s])
        for name, build, inputs, tol in _cases(rng):
            err = check(build, inputs)
            if name not in worst or err > worst[name].max_rel_error:
                worst[name] = CheckResult(name, err, tol)
    return worst


def encoder_check(seed: int = 0, mode: str = "soft_ce", mask_ratio: float = 0.5) -> dict[str, float]:
    """Relative error of dL/d(parameter) for every parameter of a tiny model on a 4-pair batch.

    Some gradients are exactly zero in theory (attention key biases shift every
    score in a row equally), so the denominator is floored at 1e-6 to keep
    finite-difference roundoff from reading as a relative error.
    """
    from .encoders import MedFLIPModel, TextEncoderConfig, VisionEncoderConfig
    from .masking import make_mask_plan

    rng = np.random.default_rng([seed, 0xE0])
    vis = VisionEncoderConfig(image_size=8, patch_size=4, embed_dim=8, depth=1, heads=2, projection_dim=4)
    txt = TextEncoderConfig(vocab_size=7, max_length=5, embed_dim=8, depth=1, heads=2, projection_dim=4)
    model = MedFLIPModel(vis, txt, seed=seed)
    images = rng.random((4, 8, 8, 1))
    plans = [make_mask_plan(vis.num_tokens, mask_ratio, seed * 4 + i) for i in range(4)]
    ids = rng.integers(0, 7, size=(4, 5))
    mask = np.arange(5)[None, :] < rng.integers(1, 6, size=4)[:, None]
    l_img = np.eye(5)[rng.integers(0, 5, 4)]
    l_txt = np.eye(5)[rng.integers(0, 5, 4)]

    def loss() -> Tensor:
        return compute_loss(model.embed(images, plans, ids, mask), l_img, l_txt, mode=mode).total

    model.zero_grad()
    loss().backward()
    errors = {}
    for name, p in model.named_parameters():
        def f():
            with T.no_grad():
                return loss().item()

        errors[name] = rel_error(p.grad, numeric_grad(f, p.data), floor=1e-6)
    return errors
