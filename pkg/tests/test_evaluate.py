import hashlib
import math

import numpy as np
import pytest

from medflip.checkpoint import encode
from medflip.data import Vocabulary, synthesize
from medflip.evaluate import (ProtocolError, class_anchors, linear_probe, precision_at_k, precision_at_k_bruteforce,
                              retrieval_precision_at_k, top_k_indices, zero_shot_classify, zero_shot_predict)
from medflip.train import Trainer, build_model, make_checkpoint

from conftest import tiny_config

KS = (1, 2, 5, 10)


@pytest.fixture(scope="module")
def balanced():
    return synthesize(1000, multi_label_prob=0.0, noise_sigma=0.05, seed=21)


def test_untrained_zero_shot_is_chance(balanced):
    vocab = Vocabulary(balanced.manifest.vocabulary)
    test = balanced.split("test")
    accs = []
    for seed in range(10):
        cfg = tiny_config(seed=seed)
        accs.append(zero_shot_classify(build_model(cfg, len(vocab)), vocab, test).overall)
    # spread across seeds is dominated by which class an untrained model collapses onto
    sem = np.std(accs, ddof=1) / math.sqrt(len(accs))
    assert abs(np.mean(accs) - 0.2) <= 3 * max(sem, math.sqrt(0.16 / (len(accs) * len(test))))


def test_equal_anchors_predict_class_zero(rng):
    anchors = np.tile(rng.normal(size=(1, 8)), (5, 1))
    assert np.all(zero_shot_predict(rng.normal(size=(30, 8)), anchors) == 0)


def test_zero_shot_invariant_to_anchor_scale(rng):
    img, anchors = rng.normal(size=(50, 8)), rng.normal(size=(5, 8))
    scales = rng.uniform(0.01, 100, size=(5, 1))
    assert np.array_equal(zero_shot_predict(img, anchors), zero_shot_predict(img, anchors * scales))


def test_empty_prompts_rejected(small_dataset):
    vocab = Vocabulary(small_dataset.manifest.vocabulary)
    model = build_model(tiny_config(), len(vocab))
    with pytest.raises(ProtocolError):
        class_anchors(model, vocab, [["there is edema."], []])
    with pytest.raises(ProtocolError):
        zero_shot_classify(model, vocab, small_dataset.split("test"), prompts=[["x"]])


def test_zero_shot_report_fields(small_dataset):
    vocab = Vocabulary(small_dataset.manifest.vocabulary)
    report = zero_shot_classify(build_model(tiny_config(), len(vocab)), vocab, small_dataset.split("test"), seed=3)
    single = int((small_dataset.split("test").labels.sum(axis=1) == 1).sum())
    assert report.n_eval == single and report.mask_ratio == 0.0 and report.seed == 3
    assert set(report.per_class) == set(small_dataset.manifest.class_names)
    assert 0.0 <= report.overall <= 1.0 and len(report.checkpoint_id) == 16
    assert '"protocol": "zero-shot"' in report.to_json()


def test_probe_rejects_overlapping_splits(small_dataset):
    vocab = Vocabulary(small_dataset.manifest.vocabulary)
    model = build_model(tiny_config(), len(vocab))
    test = small_dataset.split("test")
    with pytest.raises(ProtocolError):
        linear_probe(model, test, test)


def test_random_encoder_probe_beats_chance(balanced):
    vocab = Vocabulary(balanced.manifest.vocabulary)
    model = build_model(tiny_config(), len(vocab))
    report = linear_probe(model, balanced.split("finetune"), balanced.split("test"))
    assert report.overall > 0.2 + 3 * math.sqrt(0.16 / report.n_eval)


def test_random_scores_give_chance_precision():
    rng = np.random.default_rng(0)
    n, trials = 200, 20
    cls = np.repeat(np.arange(5), n // 5)
    relevant = cls[:, None] == cls[None, :]
    p1 = [precision_at_k(rng.normal(size=(n, n)), relevant, [1])[1] for _ in range(trials)]
    assert abs(np.mean(p1) - 0.2) <= 3 * math.sqrt(0.16 / (n * trials))


def test_clustered_embeddings_give_perfect_precision(rng):
    cls = np.repeat(np.arange(5), 20)
    centers = np.eye(5, 8)
    emb = centers[cls] + 0.01 * rng.normal(size=(100, 8))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    relevant = cls[:, None] == cls[None, :]
    p = precision_at_k(emb @ emb.T, relevant, KS)
    assert p[1] == 1.0 and p[10] == 1.0


@pytest.mark.parametrize("seed", range(10))
def test_precision_matches_full_sort(seed):
    rng = np.random.default_rng(seed)
    n = 40
    # coarse scores force many ties, which the ranking must break by column index
    scores = np.round(rng.normal(size=(n, n)), 1)
    relevant = rng.random((n, n)) < 0.3
    assert precision_at_k(scores, relevant, KS) == precision_at_k_bruteforce(scores, relevant, KS)


def test_top_k_breaks_ties_by_index():
    scores = np.array([[1.0, 2.0, 2.0, 0.0, 2.0]])
    assert top_k_indices(scores, 3).tolist() == [[1, 2, 4]]
    assert top_k_indices(scores, 4).tolist() == [[1, 2, 4, 0]]


def test_retrieval_report(small_dataset):
    vocab = Vocabulary(small_dataset.manifest.vocabulary)
    model = build_model(tiny_config(), len(vocab))
    report = retrieval_precision_at_k(model, vocab, small_dataset.split("test"), KS)
    assert set(report.precision_at_k) == {"P@1", "P@2", "P@5", "P@10"}
    assert all(0 <= v <= 1 for v in report.precision_at_k.values())
    assert report.n_eval == 20
    empty = small_dataset.split("test")
    empty.reports, empty.images, empty.labels = [], empty.images[:0], empty.labels[:0]
    with pytest.raises(ProtocolError):
        retrieval_precision_at_k(model, vocab, empty)


def test_evaluation_never_mutates_parameters(small_dataset):
    trainer = Trainer(tiny_config(), small_dataset)
    trainer.run()
    digest = lambda: hashlib.sha256(encode(make_checkpoint(trainer.model, trainer.opt, 0, trainer.cfg,  # noqa: E731
                                                           trainer.vocabulary))).hexdigest()
    before = digest()
    vocab = Vocabulary(trainer.vocabulary)
    test = small_dataset.split("test")
    zero_shot_classify(trainer.model, vocab, test)
    linear_probe(trainer.model, small_dataset.split("finetune"), test, epochs=5)
    retrieval_precision_at_k(trainer.model, vocab, test)
    assert digest() == before
