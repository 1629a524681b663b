"""Zero-shot classification, linear probing and image-to-report retrieval."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Dataset, Vocabulary, class_prompts, extract_entities
from .encoders import MedFLIPModel
from .optim import AdamW
from .tensor import Tensor


class ProtocolError(ValueError):
    pass


@dataclass
class EvalReport:
    protocol: str
    overall: float | None = None
    per_class: dict[str, float] = field(default_factory=dict)
    precision_at_k: dict[str, float] = field(default_factory=dict)
    n_eval: int = 0
    checkpoint_id: str = ""
    mask_ratio: float = 0.0
    seed: int | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)


def model_id(model: MedFLIPModel) -> str:
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()[:16]


def _normalize(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.where(n >= T.NORM_EPS, x / np.maximum(n, T.NORM_EPS), 0.0)


def embed_images(model: MedFLIPModel, images: np.ndarray, batch: int = 256) -> np.ndarray:
    """Unmasked projected image embeddings (no tape)."""
    with T.no_grad():
        out = [model.vision(images[i:i + batch]).data for i in range(0, len(images), batch)]
    return np.concatenate(out, axis=0)


def embed_texts(model: MedFLIPModel, vocab: Vocabulary, texts: Sequence[str], batch: int = 256) -> np.ndarray:
    out = []
    with T.no_grad():
        for i in range(0, len(texts), batch):
            ids, mask = vocab.encode_batch(texts[i:i + batch], model.text.cfg.max_length)
            out.append(model.text(ids, mask).data)
    return np.concatenate(out, axis=0)


def class_anchors(model: MedFLIPModel, vocab: Vocabulary, prompts: Sequence[Sequence[str]]) -> np.ndarray:
    """One unit vector per class: mean of normalised prompt embeddings, renormalised."""
    if not prompts or any(len(p) == 0 for p in prompts):
        raise ProtocolError("every class needs at least one prompt")
    anchors = [_normalize(embed_texts(model, vocab, list(p))).mean(axis=0) for p in prompts]
    return _normalize(np.stack(anchors))


def zero_shot_predict(image_emb: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """argmax cosine; np.argmax resolves ties to the lowest class index."""
    return np.argmax(_normalize(image_emb) @ _normalize(anchors).T, axis=1)


def single_label_rows(labels: np.ndarray) -> np.ndarray:
    return np.flatnonzero(labels.sum(axis=1) == 1)


def _accuracy_report(protocol: str, pred: np.ndarray, target: np.ndarray, class_names: Sequence[str],
                     **extra) -> EvalReport:
    per_class = {}
    for k, name in enumerate(class_names):
        sel = target == k
        per_class[name] = float((pred[sel] == k).mean()) if sel.any() else float("nan")
    overall = float((pred == target).mean()) if len(target) else float("nan")
    return EvalReport(protocol, overall=overall, per_class=per_class, n_eval=int(len(target)), **extra)


def zero_shot_classify(model: MedFLIPModel, vocab: Vocabulary, test: Dataset,
                       prompts: Sequence[Sequence[str]] | None = None, seed: int | None = None) -> EvalReport:
    """Single-label test samples only; multi-label samples have no single target."""
    names = test.manifest.class_names
    prompts = class_prompts(names) if prompts is None else prompts
    if len(prompts) != len(names):
        raise ProtocolError(f"{len(prompts)} prompt lists for {len(names)} classes")
    anchors = class_anchors(model, vocab, prompts)
    rows = single_label_rows(test.labels)
    pred = zero_shot_predict(embed_images(model, test.images[rows]), anchors)
    target = np.argmax(test.labels[rows], axis=1)
    return _accuracy_report("zero-shot", pred, target, names, checkpoint_id=model_id(model), seed=seed)


def fit_linear_probe(features: np.ndarray, targets: np.ndarray, n_classes: int,
                     epochs: int = 200, lr: float = 1e-2) -> tuple[np.ndarray, np.ndarray]:
    """Full-batch softmax regression trained with AdamW (no weight decay) from zero init."""
    w = Tensor(np.zeros((features.shape[1], n_classes)), requires_grad=True)
    b = Tensor(np.zeros(n_classes), requires_grad=True)
    opt = AdamW([w, b], lr=lr, weight_decay=0.0)
    x = Tensor(features)
    onehot = np.eye(n_classes)[targets]
    for _ in range(epochs):
        probs = T.softmax_rows(T.matmul(x, w) + b)
        loss = T.scale(T.sum(T.mul(Tensor(onehot), T.log(probs))), -1.0 / len(targets))
        opt.zero_grad()
        loss.backward()
        opt.step()
    return w.data.copy(), b.data.copy()


def linear_probe(model: MedFLIPModel, finetune: Dataset, test: Dataset, epochs: int = 200, lr: float = 1e-2,
                 seed: int | None = None) -> EvalReport:
    overlap = set(finetune.sample_ids.tolist()) & set(test.sample_ids.tolist())
    if overlap:
        raise ProtocolError(f"finetune and test splits share {len(overlap)} samples")
    names = test.manifest.class_names
    tr = single_label_rows(finetune.labels)
    te = single_label_rows(test.labels)
    w, b = fit_linear_probe(embed_images(model, finetune.images[tr]), np.argmax(finetune.labels[tr], axis=1),
                            len(names), epochs, lr)
    logits = embed_images(model, test.images[te]) @ w + b
    pred = np.argmax(logits, axis=1)
    return _accuracy_report("linear-probe", pred, np.argmax(test.labels[te], axis=1), names,
                            checkpoint_id=model_id(model), seed=seed)


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Per row, the k best columns ordered by (score desc, column asc).

    Uses a partition to find the k-th score and only sorts the candidates at
    or above it, so ties at the boundary resolve exactly as a full sort would.
    """
    n_rows, n_cols = scores.shape
    k = min(k, n_cols)
    kth = -np.partition(-scores, k - 1, axis=1)[:, k - 1]
    out = np.empty((n_rows, k), dtype=np.int64)
    for r in range(n_rows):
        cand = np.flatnonzero(scores[r] >= kth[r])
        order = np.lexsort((cand, -scores[r, cand]))
        out[r] = cand[order[:k]]
    return out


def precision_at_k(scores: np.ndarray, relevant: np.ndarray, ks: Sequence[int]) -> dict[int, float]:
    """Mean over query rows of (#relevant in the top K) / K, for every K from one ranking."""
    kmax = max(ks)
    top = top_k_indices(scores, kmax)
    hits = np.take_along_axis(relevant, top, axis=1).astype(np.int64)
    cum = np.cumsum(hits, axis=1)
    n = scores.shape[0]
    # integer hit totals divided once, so results are exact and order-independent
    return {k: int(cum[:, min(k, top.shape[1]) - 1].sum()) / (k * n) for k in ks}


def precision_at_k_bruteforce(scores: np.ndarray, relevant: np.ndarray, ks: Sequence[int]) -> dict[int, float]:
    rankings = [sorted(range(scores.shape[1]), key=lambda j: (-scores[r, j], j)) for r in range(scores.shape[0])]
    out = {}
    for k in ks:
        total = sum(int(bool(relevant[r, j])) for r, ranked in enumerate(rankings) for j in ranked[:k])
        out[k] = total / (k * scores.shape[0])
    return out


def retrieval_precision_at_k(model: MedFLIPModel, vocab: Vocabulary, test: Dataset,
                             ks: Sequence[int] = (1, 2, 5, 10), seed: int | None = None) -> EvalReport:
    """Image queries against all test reports; relevant = identical entity label vector."""
    if len(test) == 0:
        raise ProtocolError("retrieval needs a non-empty test split")
    img = _normalize(embed_images(model, test.images))
    txt = _normalize(embed_texts(model, vocab, test.reports))
    report_labels = np.stack([extract_entities(r, test.manifest.class_names) for r in test.reports])
    relevant = (test.labels[:, None, :] == report_labels[None, :, :]).all(axis=2)
    p = precision_at_k(img @ txt.T, relevant, ks)
    return EvalReport("retrieval", precision_at_k={f"P@{k}": v for k, v in p.items()}, n_eval=len(test),
                      checkpoint_id=model_id(model), seed=seed)
