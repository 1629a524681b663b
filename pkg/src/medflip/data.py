"""Synthetic chest-X-ray-like image/report pairs and their on-disk format.

Directory layout written by :func:`generate_dataset`::

    manifest.json   counts, class names, vocabulary, splits, generator settings
    images.bin      little-endian: b"MFLP", u32 version, u32 n, u32 h, u32 w,
                    u32 c, n*h*w*c float32 pixels (NHWC), u32 CRC32 of all
                    preceding bytes
    samples.jsonl   one {"sample_id", "report", "labels"} object per line

Reports are templated; :func:`extract_entities` is the rule-based stand-in
for knowledge extraction and inverts the templates exactly.
"""

from __future__ import annotations

import json
import re
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

FORMAT_VERSION = 1
MAGIC = b"MFLP"
_HEADER = struct.Struct("<4sIIIII")

CLASS_NAMES = ("atelectasis", "cardiomegaly", "consolidation", "edema", "pleural effusion")

# every surface form maps to exactly one class; no form appears in a distractor
SURFACE_FORMS: dict[str, tuple[str, ...]] = {
    "atelectasis": ("atelectasis", "collapsed lung segment"),
    "cardiomegaly": ("cardiomegaly", "enlarged cardiac silhouette"),
    "consolidation": ("consolidation", "airspace opacity"),
    "edema": ("edema", "vascular congestion"),
    "pleural effusion": ("pleural effusion", "fluid in the costophrenic angle"),
}

TEMPLATES = (
    "findings consistent with {entity}.",
    "evidence of {entity} is observed.",
    "there is {entity}.",
    "{entity} is present.",
)

DISTRACTORS = (
    "no acute osseous abnormality.",
    "the patient is rotated.",
    "comparison is made with the prior radiograph.",
    "support devices are unchanged.",
    "the trachea is midline.",
)

PAD, UNK = "<pad>", "<unk>"
_TOKEN_RE = re.compile(r"[a-z0-9]+")


class DatasetFormatError(Exception):
    pass


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def build_vocabulary() -> list[str]:
    words: set[str] = set()
    for forms in SURFACE_FORMS.values():
        for form in forms:
            words.update(tokenize(form))
    for template in TEMPLATES:
        words.update(tokenize(template.replace("{entity}", " ")))
    for sentence in DISTRACTORS:
        words.update(tokenize(sentence))
    return [PAD, UNK] + sorted(words)


def class_prompts(class_names: Sequence[str] = CLASS_NAMES) -> list[list[str]]:
    """All template x surface-form sentences for each class."""
    return [[t.format(entity=form) for t in TEMPLATES for form in SURFACE_FORMS[name]]
            for name in class_names]


def extract_entities(report: str, class_names: Sequence[str] = CLASS_NAMES) -> np.ndarray:
    """Multi-hot label vector: 1 where any surface form of the class occurs as a token run."""
    tokens = tokenize(report)
    out = np.zeros(len(class_names))
    for k, name in enumerate(class_names):
        for form in SURFACE_FORMS[name]:
            pattern = tokenize(form)
            n = len(pattern)
            if any(tokens[i:i + n] == pattern for i in range(len(tokens) - n + 1)):
                out[k] = 1.0
                break
    return out


def entity_signature(k: int, h: int, w: int) -> np.ndarray:
    """Deterministic geometric pattern for class index ``k`` (0-based), values in [0, 1]."""
    rows, cols = np.mgrid[0:h, 0:w]
    if k == 0:  # horizontal band
        return ((rows >= 3 * h // 8) & (rows < 5 * h // 8)).astype(float)
    if k == 1:  # centred disk
        r = min(h, w) / 4
        return ((rows - (h - 1) / 2) ** 2 + (cols - (w - 1) / 2) ** 2 <= r * r).astype(float)
    if k == 2:  # checkerboard in the lower-right quadrant
        cell = max(1, h // 8)
        board = ((rows // cell + cols // cell) % 2).astype(float)
        return board * ((rows >= h // 2) & (cols >= w // 2))
    if k == 3:  # left-to-right gradient
        return np.broadcast_to(np.arange(w) / max(w - 1, 1), (h, w)).copy()
    if k == 4:  # diagonal stripe
        return (np.abs(rows * (w / h) - cols) < max(1.5, w / 16)).astype(float)
    raise ValueError(f"no signature for class index {k}")


@dataclass
class SyntheticSample:
    sample_id: int
    image: np.ndarray
    report: str
    labels: np.ndarray


@dataclass
class DatasetManifest:
    n_samples: int
    class_names: list[str]
    vocabulary: list[str]
    splits: dict[str, list[int]]
    image_shape: list[int]
    generator: dict
    samples_crc32: int
    format_version: int = FORMAT_VERSION

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def to_json(self) -> dict:
        return {
            "format_version": self.format_version,
            "n_samples": self.n_samples,
            "n_classes": self.n_classes,
            "class_names": self.class_names,
            "vocabulary": self.vocabulary,
            "image_shape": self.image_shape,
            "generator": self.generator,
            "splits": self.splits,
            "samples_crc32": self.samples_crc32,
        }


@dataclass
class Dataset:
    manifest: DatasetManifest
    images: np.ndarray  # (n, h, w, c) float64 holding float32-representable values
    reports: list[str]
    labels: np.ndarray  # (n, K)
    sample_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.sample_ids is None:
            self.sample_ids = np.arange(len(self.reports))

    def __len__(self) -> int:
        return len(self.reports)

    def __iter__(self) -> Iterator[SyntheticSample]:
        for i in range(len(self)):
            yield self.sample(i)

    def sample(self, i: int) -> SyntheticSample:
        return SyntheticSample(int(self.sample_ids[i]), self.images[i], self.reports[i], self.labels[i])

    def split(self, name: str, fraction: float = 1.0) -> Dataset:
        """Subset for one split; ``fraction`` keeps the leading share of its ids."""
        ids = self.manifest.splits[name]
        ids = ids[: max(1, int(np.floor(fraction * len(ids))))] if fraction < 1.0 else ids
        idx = np.asarray(ids, dtype=np.int64)
        return Dataset(self.manifest, self.images[idx], [self.reports[i] for i in idx],
                       self.labels[idx], self.sample_ids[idx])


def _split_sizes(n: int) -> dict[str, int]:
    n_ft = n // 10
    n_test = n // 10
    return {"pretrain": n - n_ft - n_test, "finetune": n_ft, "test": n_test}


def _render(labels: np.ndarray, h: int, w: int, c: int, noise_sigma: float,
            rng: np.random.Generator) -> np.ndarray:
    img = np.zeros((h, w))
    for k in np.flatnonzero(labels):
        img += entity_signature(int(k), h, w)
    img = np.repeat(img[:, :, None], c, axis=2)
    if noise_sigma > 0:
        img = img + rng.normal(0.0, noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _write_report(labels: np.ndarray, rng: np.random.Generator) -> str:
    sentences = []
    for k in np.flatnonzero(labels):
        forms = SURFACE_FORMS[CLASS_NAMES[k]]
        template = TEMPLATES[rng.integers(len(TEMPLATES))]
        sentences.append(template.format(entity=forms[rng.integers(len(forms))]))
    for _ in range(int(rng.integers(0, 3))):
        pos = int(rng.integers(0, len(sentences) + 1))
        sentences.insert(pos, DISTRACTORS[rng.integers(len(DISTRACTORS))])
    return " ".join(sentences)


def synthesize(n_samples: int, multi_label_prob: float = 0.2, noise_sigma: float = 0.05,
               seed: int = 0, image_size: int = 32, channels: int = 1) -> Dataset:
    """Build a dataset in memory; each sample draws from its own stream seeded by (seed, sample_id)."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    k_classes = len(CLASS_NAMES)
    h = w = image_size
    images = np.empty((n_samples, h, w, channels), dtype=np.float32)
    labels = np.zeros((n_samples, k_classes))
    reports = []
    for sid in range(n_samples):
        rng = np.random.default_rng([seed, sid])
        lab = np.zeros(k_classes)
        lab[rng.integers(k_classes)] = 1.0
        extra = rng.random(k_classes) < multi_label_prob
        lab[extra] = 1.0
        labels[sid] = lab
        images[sid] = _render(lab, h, w, channels, noise_sigma, rng)
        reports.append(_write_report(lab, rng))

    sizes = _split_sizes(n_samples)
    bounds = np.cumsum([0, sizes["pretrain"], sizes["finetune"], sizes["test"]])
    splits = {name: list(range(int(bounds[i]), int(bounds[i + 1])))
              for i, name in enumerate(("pretrain", "finetune", "test"))}
    manifest = DatasetManifest(
        n_samples=n_samples,
        class_names=list(CLASS_NAMES),
        vocabulary=build_vocabulary(),
        splits=splits,
        image_shape=[h, w, channels],
        generator={"seed": seed, "multi_label_prob": multi_label_prob, "noise_sigma": noise_sigma},
        samples_crc32=0,
    )
    return Dataset(manifest, images.astype(np.float64), reports, labels)


def _samples_bytes(ds: Dataset) -> bytes:
    lines = [json.dumps({"sample_id": int(sid), "report": rep, "labels": [int(v) for v in lab]})
             for sid, rep, lab in zip(ds.sample_ids, ds.reports, ds.labels)]
    return ("\n".join(lines) + "\n").encode("utf-8")


def save_dataset(ds: Dataset, path: str | Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n, h, w, c = ds.images.shape
    blob = _HEADER.pack(MAGIC, FORMAT_VERSION, n, h, w, c) + ds.images.astype("<f4").tobytes()
    blob += struct.pack("<I", zlib.crc32(blob))
    samples = _samples_bytes(ds)
    ds.manifest.samples_crc32 = zlib.crc32(samples)
    (path / "images.bin").write_bytes(blob)
    (path / "samples.jsonl").write_bytes(samples)
    (path / "manifest.json").write_text(json.dumps(ds.manifest.to_json(), indent=1) + "\n")
    return path


def generate_dataset(path: str | Path, n_samples: int = 2500, multi_label_prob: float = 0.2,
                     noise_sigma: float = 0.05, seed: int = 0) -> Path:
    return save_dataset(synthesize(n_samples, multi_label_prob, noise_sigma, seed), path)


def _read_images(blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size + 4:
        raise DatasetFormatError(f"images.bin truncated: {len(blob)} bytes")
    magic, version, n, h, w, c = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise DatasetFormatError(f"images.bin has bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"images.bin format version {version}, expected {FORMAT_VERSION}")
    expected = _HEADER.size + 4 * n * h * w * c + 4
    if len(blob) != expected:
        raise DatasetFormatError(f"images.bin truncated: {len(blob)} bytes, header implies {expected}")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != crc:
        raise DatasetFormatError("images.bin checksum mismatch")
    pixels = np.frombuffer(blob, dtype="<f4", count=n * h * w * c, offset=_HEADER.size)
    return pixels.reshape(n, h, w, c).astype(np.float64)


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    try:
        meta = json.loads((path / "manifest.json").read_text())
        blob = (path / "images.bin").read_bytes()
        samples = (path / "samples.jsonl").read_bytes()
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"manifest.json is not valid JSON: {exc}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise DatasetFormatError(f"manifest format version {meta.get('format_version')}, expected {FORMAT_VERSION}")
    if zlib.crc32(samples) != meta["samples_crc32"]:
        raise DatasetFormatError("samples.jsonl checksum mismatch")
    images = _read_images(blob)
    records = [json.loads(line) for line in samples.decode("utf-8").splitlines() if line]
    if len(records) != meta["n_samples"] or images.shape[0] != meta["n_samples"]:
        raise DatasetFormatError(
            f"manifest lists {meta['n_samples']} samples, found {len(records)} reports and {images.shape[0]} images")
    manifest = DatasetManifest(
        n_samples=meta["n_samples"],
        class_names=meta["class_names"],
        vocabulary=meta["vocabulary"],
        splits={k: list(v) for k, v in meta["splits"].items()},
        image_shape=meta["image_shape"],
        generator=meta["generator"],
        samples_crc32=meta["samples_crc32"],
        format_version=meta["format_version"],
    )
    return Dataset(
        manifest,
        images,
        [r["report"] for r in records],
        np.array([r["labels"] for r in records], dtype=np.float64),
        np.array([r["sample_id"] for r in records], dtype=np.int64),
    )


class Vocabulary:
    def __init__(self, words: Sequence[str]):
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, text: str, max_length: int) -> list[int]:
        unk = self.index[UNK]
        ids = [self.index.get(tok, unk) for tok in tokenize(text)][:max_length]
        return ids or [unk]

    def encode_batch(self, texts: Sequence[str], max_length: int) -> tuple[np.ndarray, np.ndarray]:
        """Pad to the longest text in the batch; returns (ids, attention mask)."""
        encoded = [self.encode(t, max_length) for t in texts]
        width = max(len(e) for e in encoded)
        ids = np.zeros((len(texts), width), dtype=np.int64)
        mask = np.zeros((len(texts), width), dtype=bool)
        for i, e in enumerate(encoded):
            ids[i, : len(e)] = e
            mask[i, : len(e)] = True
        return ids, mask
