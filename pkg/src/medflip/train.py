"""Pretraining loop with independent image/text batch sampling."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import Dataset, Vocabulary, extract_entities
from .encoders import MedFLIPModel
from .losses import compute_loss
from .masking import make_mask_plan, plan_seed
from .optim import AdamW

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


def build_model(cfg: RunConfig, vocab_size: int) -> MedFLIPModel:
    text = dataclasses.replace(cfg.model.text, vocab_size=vocab_size)
    return MedFLIPModel(cfg.model.vision, text, seed=cfg.train.seed)


def make_checkpoint(model: MedFLIPModel, opt: AdamW | None, step: int, cfg: RunConfig,
                    vocabulary: list[str]) -> Checkpoint:
    tensors = {f"param/{n}": p.data for n, p in model.named_parameters()}
    if opt is not None:
        names = [n for n, _ in model.named_parameters()]
        tensors.update({f"adam.m/{n}": m for n, m in zip(names, opt.m)})
        tensors.update({f"adam.v/{n}": v for n, v in zip(names, opt.v)})
    meta = {"step": step, "config": cfg.to_dict(), "vocabulary": vocabulary}
    return Checkpoint(tensors, meta)


def restore(ckpt: Checkpoint) -> tuple[MedFLIPModel, Vocabulary, RunConfig]:
    """Rebuild model, vocabulary and config from a checkpoint."""
    try:
        cfg = cfgmod.from_dict(ckpt.meta["config"])
        vocab = Vocabulary(ckpt.meta["vocabulary"])
    except KeyError as exc:
        raise CheckpointError(f"checkpoint metadata lacks {exc}") from exc
    model = build_model(cfg, len(vocab))
    try:
        model.load_state_dict(ckpt.params())
    except (KeyError, ValueError) as exc:
        raise CheckpointError(str(exc)) from exc
    return model, vocab, cfg


def restore_optimizer(ckpt: Checkpoint, model: MedFLIPModel, cfg: RunConfig) -> AdamW:
    opt = AdamW(model.parameters(), lr=cfg.train.learning_rate, weight_decay=cfg.train.weight_decay)
    for i, (name, _) in enumerate(model.named_parameters()):
        opt.m[i] = ckpt.tensors[f"adam.m/{name}"].copy()
        opt.v[i] = ckpt.tensors[f"adam.v/{name}"].copy()
    opt.step_count = ckpt.step
    return opt


@dataclass
class TrainResult:
    model: MedFLIPModel
    optimizer: AdamW
    vocabulary: list[str]
    config: RunConfig
    steps: int
    metrics: list[dict] = field(default_factory=list)
    checkpoint_path: Path | None = None
    log_path: Path | None = None
    seconds: float = 0.0

    def checkpoint(self) -> Checkpoint:
        return make_checkpoint(self.model, self.optimizer, self.steps, self.config, self.vocabulary)


def steps_per_epoch(n_pretrain: int, batch_size: int) -> int:
    return max(1, n_pretrain // batch_size)


class Trainer:
    """Holds the state of one pretraining run; ``run`` executes every step."""

    def __init__(self, cfg: RunConfig, dataset: Dataset, out_dir: str | Path | None = None):
        self.cfg = cfg.validate()
        self.pretrain = dataset.split("pretrain", cfg.train.pretrain_fraction)
        if len(self.pretrain) == 0:
            raise ValueError("dataset has an empty pretrain split")
        self.vocabulary = list(dataset.manifest.vocabulary)
        self.vocab = Vocabulary(self.vocabulary)
        self.model = build_model(cfg, len(self.vocab))
        self.params = self.model.parameters()
        self.opt = AdamW(self.params, lr=cfg.train.learning_rate, weight_decay=cfg.train.weight_decay)
        # text-side labels come from the extractor, image-side from ground truth
        self.text_labels = np.stack([extract_entities(r, dataset.manifest.class_names) for r in self.pretrain.reports])
        self.sampler = np.random.default_rng([cfg.train.seed, 0x5A])
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.step = 0
        self.metrics: list[dict] = []

    def total_steps(self) -> int:
        return self.cfg.train.epochs * steps_per_epoch(len(self.pretrain), self.cfg.train.batch_size)

    def draw_batch(self, epoch: int, step_in_epoch: int):
        t = self.cfg.train
        n = len(self.pretrain)
        img_idx = self.sampler.integers(0, n, t.batch_size)
        txt_idx = img_idx.copy() if self.cfg.sampling.paired else self.sampler.integers(0, n, t.batch_size)
        tokens = self.cfg.model.vision.num_tokens
        plans = [make_mask_plan(tokens, t.mask_ratio, plan_seed(t.seed, epoch, step_in_epoch * t.batch_size + k))
                 for k in range(t.batch_size)]
        return img_idx, txt_idx, plans

    def train_step(self, epoch: int, step_in_epoch: int) -> dict:
        c = self.cfg
        start = time.perf_counter()
        img_idx, txt_idx, plans = self.draw_batch(epoch, step_in_epoch)
        ids, mask = self.vocab.encode_batch([self.pretrain.reports[j] for j in txt_idx], c.model.text.max_length)
        pair = self.model.embed(self.pretrain.images[img_idx], plans, ids, mask)
        if not (np.isfinite(pair.v_p.data).all() and np.isfinite(pair.t_p.data).all()):
            self._dump_failure(epoch, step_in_epoch, img_idx, txt_idx, {"embeddings": "non-finite"})
        lb = compute_loss(pair, self.pretrain.labels[img_idx], self.text_labels[txt_idx],
                          mode=c.loss.mode, beta=c.loss.beta, temperature_T=c.loss.temperature_T, tau=c.loss.tau)
        values = lb.as_floats()
        if not all(math.isfinite(v) for v in values.values()):
            self._dump_failure(epoch, step_in_epoch, img_idx, txt_idx, values)
        self.opt.zero_grad()
        lb.total.backward()
        self.opt.step()
        for name, p in self.model.named_parameters():
            if not np.isfinite(p.data).all():
                self._dump_failure(epoch, step_in_epoch, img_idx, txt_idx, values, bad_param=name)
        self.step += 1
        elapsed = time.perf_counter() - start
        record = {
            "step": self.step,
            "contrastive": values["contrastive"],
            "svd": values["svd"],
            "total": values["total"],
            "sigma_top3": [float(s) for s in lb.sigma_spectrum[:3]],
            "img_per_sec": c.train.batch_size / elapsed if c.train.record_timing else None,
            "wall_ms": elapsed * 1e3 if c.train.record_timing else None,
        }
        self.metrics.append(record)
        return record

    def _dump_failure(self, epoch, step_in_epoch, img_idx, txt_idx, values, bad_param=None):
        info = {
            "step": self.step + 1,
            "epoch": epoch,
            "step_in_epoch": step_in_epoch,
            "seed": self.cfg.train.seed,
            "mask_seeds": [plan_seed(self.cfg.train.seed, epoch, step_in_epoch * self.cfg.train.batch_size + k)
                           for k in range(len(img_idx))],
            "image_ids": [int(self.pretrain.sample_ids[i]) for i in img_idx],
            "text_ids": [int(self.pretrain.sample_ids[j]) for j in txt_idx],
            "loss": values,
            "bad_parameter": bad_param,
        }
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "divergence.json").write_text(json.dumps(info, indent=1))
        raise TrainingDivergedError(f"non-finite training state at step {info['step']}: {info}")

    def save(self, name: str = "checkpoint.mfck") -> Path | None:
        if self.out_dir is None:
            return None
        ckpt = make_checkpoint(self.model, self.opt, self.step, self.cfg, self.vocabulary)
        return save_checkpoint(ckpt, self.out_dir / name)

    def run(self) -> TrainResult:
        c = self.cfg.train
        per_epoch = steps_per_epoch(len(self.pretrain), c.batch_size)
        log_path = None
        log_fh = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            log_path = self.out_dir / "metrics.jsonl"
            log_fh = open(log_path, "w")
            (self.out_dir / "config.json").write_text(json.dumps(self.cfg.to_dict(), indent=1, sort_keys=True) + "\n")
        log.info("training %d steps (%d epochs x %d), config %s", per_epoch * c.epochs, c.epochs, per_epoch,
                 self.cfg.to_json())
        start = time.perf_counter()
        try:
            for epoch in range(c.epochs):
                for k in range(per_epoch):
                    record = self.train_step(epoch, k)
                    if log_fh is not None:
                        log_fh.write(json.dumps(record) + "\n")
                    if c.eval_every and self.step % c.eval_every == 0:
                        self.save(f"checkpoint_step{self.step}.mfck")
                log.info("epoch %d done: step %d total %.5f", epoch + 1, self.step, record["total"])
        finally:
            if log_fh is not None:
                log_fh.close()
        ckpt_path = self.save()
        return TrainResult(self.model, self.opt, self.vocabulary, self.cfg, self.step, self.metrics,
                           ckpt_path, log_path, time.perf_counter() - start)


def train(cfg: RunConfig, dataset: Dataset, out_dir: str | Path | None = None) -> TrainResult:
    return Trainer(cfg, dataset, out_dir).run()


def load_model(path: str | Path) -> tuple[MedFLIPModel, Vocabulary, RunConfig]:
    return restore(load_checkpoint(path))
