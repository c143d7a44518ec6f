"""Records, file formats, tokenization and the synthetic corpus generator.

File formats (all JSON lines, one record per line, UTF-8):

* region features: ``{"id", "width", "height", "regions": [{"box": [x1, y1, x2, y2], "feat": [...]}]}``
  with regions in descending detector confidence;
* captions: ``{"caption_id", "image_id", "text"}``;
* embeddings: ``{"id", "source", "vector": [...]}`` with ``source`` in ``image|caption``.

Splits are a JSON object ``{"train": [image ids], "val": [...], "test": [...]}``.
Floats are written with ``repr`` precision, so every write/read cycle is exact.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ArgumentError, ParseError, ValidationError

CLS_ID, OOV_ID, PAD_ID = 0, 1, 2
RESERVED_TOKENS = ("[CLS]", "[OOV]", "[PAD]")
SPLIT_NAMES = ("train", "val", "test")


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


@dataclass
class RegionSet:
    image_id: str
    width: float
    height: float
    boxes: np.ndarray  # (n, 4) as x1, y1, x2, y2 in pixels
    features: np.ndarray  # (n, d_r)

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1 and self.features.size == 0:
            self.features = self.features.reshape(0, 0)
        if self.features.ndim != 2 or len(self.features) != len(self.boxes):
            raise ValidationError(f"image {self.image_id}: {len(self.boxes)} boxes but features of shape {self.features.shape}")

    @property
    def n_regions(self) -> int:
        return len(self.boxes)

    def validate(self) -> "RegionSet":
        if not (self.width > 0 and self.height > 0):
            raise ValidationError(f"image {self.image_id}: width and height must be positive")
        b = self.boxes
        ok = ((0 <= b[:, 0]) & (b[:, 0] <= b[:, 2]) & (b[:, 2] <= self.width)
              & (0 <= b[:, 1]) & (b[:, 1] <= b[:, 3]) & (b[:, 3] <= self.height))
        if not np.all(ok):
            bad = int(np.flatnonzero(~ok)[0])
            raise ValidationError(
                f"image {self.image_id}: region {bad} box {b[bad].tolist()} lies outside "
                f"the {self.width}x{self.height} image")
        if not np.all(np.isfinite(self.features)):
            raise ValidationError(f"image {self.image_id}: non-finite region feature")
        return self

    def truncated(self, max_regions: int) -> "RegionSet":
        if self.n_regions <= max_regions:
            return self
        return RegionSet(self.image_id, self.width, self.height,
                         self.boxes[:max_regions], self.features[:max_regions])

    def to_json(self) -> dict:
        return {
            "id": self.image_id,
            "width": self.width,
            "height": self.height,
            "regions": [{"box": box.tolist(), "feat": feat.tolist()}
                        for box, feat in zip(self.boxes, self.features)],
        }


@dataclass
class CaptionRecord:
    caption_id: str
    image_id: str
    text: str


@dataclass
class TokenSequence:
    caption_id: str
    image_id: str
    tokens: tuple

    def __post_init__(self):
        self.tokens = tuple(int(t) for t in self.tokens)


@dataclass
class Embedding:
    id: str
    source: str
    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.source not in ("image", "caption"):
            raise ValidationError(f"embedding {self.id}: source must be 'image' or 'caption'")


# ---------------------------------------------------------------------------
# Vocabulary and tokenization
# ---------------------------------------------------------------------------

_PUNCT = re.compile(r"[^\w\s]|_")


def clean_words(text: str) -> list:
    """Lowercase, turn punctuation into separators, split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


@dataclass
class Vocabulary:
    token_to_id: dict = field(default_factory=dict)

    def __post_init__(self):
        for i, tok in enumerate(RESERVED_TOKENS):
            if self.token_to_id.get(tok, i) != i:
                raise ValidationError(f"reserved token {tok} must have id {i}")
            self.token_to_id[tok] = i
        ids = sorted(self.token_to_id.values())
        if ids != list(range(len(ids))):
            raise ValidationError("vocabulary ids must be dense 0..n-1")
        self.id_to_token = {i: t for t, i in self.token_to_id.items()}

    def __len__(self):
        return len(self.token_to_id)

    def to_json(self) -> list:
        return [self.id_to_token[i] for i in range(len(self))]

    @classmethod
    def from_json(cls, tokens: Sequence[str]) -> "Vocabulary":
        return cls({t: i for i, t in enumerate(tokens)})


def build_vocabulary(texts: Iterable[str], min_count: int = 1) -> Vocabulary:
    """Order by descending frequency, ties broken lexicographically."""
    counts = Counter(w for text in texts for w in clean_words(text))
    words = sorted((w for w, c in counts.items() if c >= min_count and w not in RESERVED_TOKENS),
                   key=lambda w: (-counts[w], w))
    mapping = {t: i for i, t in enumerate(RESERVED_TOKENS)}
    for w in words:
        mapping[w] = len(mapping)
    return Vocabulary(mapping)


def tokenize(text: str, vocab: Vocabulary) -> list:
    words = clean_words(text)
    if not words:
        raise ArgumentError(f"text {text!r} is empty after cleaning")
    return [vocab.token_to_id.get(w, OOV_ID) for w in words]


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    return " ".join(vocab.id_to_token[i] for i in ids)


def to_token_sequence(rec: CaptionRecord, vocab: Vocabulary) -> TokenSequence:
    return TokenSequence(rec.caption_id, rec.image_id, tokenize(rec.text, vocab))


# ---------------------------------------------------------------------------
# JSON-lines readers/writers
# ---------------------------------------------------------------------------


def _read_jsonl(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", path, lineno) from None
            if not isinstance(obj, dict):
                raise ParseError("expected a JSON object", path, lineno)
            yield lineno, obj


def _write_jsonl(path, records: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def _require(obj: dict, keys, path, lineno):
    missing = [k for k in keys if k not in obj]
    if missing:
        raise ParseError(f"missing field(s) {missing}", path, lineno)


def load_region_features(path) -> list:
    out = []
    for lineno, obj in _read_jsonl(path):
        _require(obj, ("id", "width", "height", "regions"), path, lineno)
        regions = obj["regions"]
        if not isinstance(regions, list):
            raise ParseError("'regions' must be a list", path, lineno)
        try:
            boxes = [r["box"] for r in regions]
            feats = [r["feat"] for r in regions]
            boxes = np.asarray(boxes, dtype=np.float64).reshape(len(regions), 4)
            feats = np.asarray(feats, dtype=np.float64).reshape(len(regions), -1 if regions else 0)
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad region entry for image {obj['id']}: {exc}", path, lineno) from None
        rs = RegionSet(str(obj["id"]), float(obj["width"]), float(obj["height"]), boxes, feats)
        out.append(rs.validate())
    return out


def write_region_features(path, region_sets: Iterable[RegionSet]) -> None:
    _write_jsonl(path, (rs.to_json() for rs in region_sets))


def load_captions(path) -> list:
    out = []
    for lineno, obj in _read_jsonl(path):
        _require(obj, ("caption_id", "image_id", "text"), path, lineno)
        out.append(CaptionRecord(str(obj["caption_id"]), str(obj["image_id"]), str(obj["text"])))
    return out


def write_captions(path, captions: Iterable[CaptionRecord]) -> None:
    _write_jsonl(path, ({"caption_id": c.caption_id, "image_id": c.image_id, "text": c.text}
                        for c in captions))


def load_embeddings(path) -> list:
    out = []
    for lineno, obj in _read_jsonl(path):
        _require(obj, ("id", "source", "vector"), path, lineno)
        try:
            out.append(Embedding(str(obj["id"]), obj["source"], obj["vector"]))
        except ValidationError as exc:
            raise ParseError(str(exc), path, lineno) from None
    return out


def write_embeddings(path, embeddings: Iterable[Embedding]) -> None:
    _write_jsonl(path, ({"id": e.id, "source": e.source, "vector": e.vector.tolist()}
                        for e in embeddings))


def load_splits(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON ({exc.msg})", path) from None
    unknown = set(data) - set(SPLIT_NAMES)
    if unknown:
        raise ParseError(f"unknown split names {sorted(unknown)}", path)
    splits = {name: [str(i) for i in data.get(name, [])] for name in SPLIT_NAMES}
    check_disjoint_splits(splits)
    return splits


def write_splits(path, splits: dict) -> None:
    Path(path).write_text(json.dumps({k: list(splits.get(k, [])) for k in SPLIT_NAMES}, indent=1) + "\n")


def check_disjoint_splits(splits: dict) -> None:
    seen = {}
    for name, ids in splits.items():
        for image_id in ids:
            if image_id in seen:
                raise ValidationError(f"image {image_id} appears in splits {seen[image_id]} and {name}")
            seen[image_id] = name


def split_pairs(region_sets: Sequence[RegionSet], captions: Sequence[CaptionRecord],
                image_ids: Iterable[str]) -> tuple:
    """Restrict to ``image_ids``; returns ``(region_sets, captions)`` in input order."""
    keep = set(image_ids)
    rs = [r for r in region_sets if r.image_id in keep]
    known = {r.image_id for r in rs}
    missing = sorted(keep - known)
    if missing:
        raise ValidationError(f"split references images without features: {missing[:10]}")
    caps = [c for c in captions if c.image_id in keep]
    return rs, caps


def captions_by_image(captions: Iterable[CaptionRecord]) -> dict:
    out: dict = {}
    for c in captions:
        out.setdefault(c.image_id, []).append(c)
    return out


# ---------------------------------------------------------------------------
# 5-fold 1K protocol
# ---------------------------------------------------------------------------


def fold_image_ids(image_ids: Sequence[str], n_folds: int = 5) -> list:
    """Cut the test images into ``n_folds`` contiguous, equally sized folds."""
    image_ids = list(image_ids)
    if n_folds < 1:
        raise ArgumentError("n_folds must be >= 1")
    if len(image_ids) % n_folds:
        raise ArgumentError(f"{len(image_ids)} images cannot be cut into {n_folds} equal folds")
    size = len(image_ids) // n_folds
    return [image_ids[i * size:(i + 1) * size] for i in range(n_folds)]


def average_fold_metrics(per_fold: Sequence[dict]) -> dict:
    """Mean of each numeric entry across folds (nested dicts are averaged per key)."""
    if not per_fold:
        raise ArgumentError("no folds to average")
    keys = per_fold[0].keys()
    out = {}
    for k in keys:
        vals = [f[k] for f in per_fold]
        if isinstance(vals[0], dict):
            out[k] = average_fold_metrics(vals)
        else:
            out[k] = float(np.mean(vals))
    return out


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------


@dataclass
class SyntheticDataset:
    region_sets: list
    captions: list
    splits: dict

    def write(self, out_dir) -> dict:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {
            "features": out_dir / "features.jsonl",
            "captions": out_dir / "captions.jsonl",
            "splits": out_dir / "splits.json",
        }
        write_region_features(paths["features"], self.region_sets)
        write_captions(paths["captions"], self.captions)
        write_splits(paths["splits"], self.splits)
        return paths


def gen_synthetic_dataset(seed: int, n_images: int, captions_per_image: int, n_regions: int,
                          d_r: int, vocab_size: int, concepts_per_image: int = 4,
                          n_val: int = 0, n_test: int = 0, noise: float = 0.5) -> SyntheticDataset:
    """Deterministic toy corpus where captions name the concepts present in regions.

    Each image owns ``concepts_per_image`` concept words (disjoint across
    images while the vocabulary allows it). Every region carries the prototype
    vector of one of its image's concepts plus Gaussian noise; every caption
    is a random ordering of a subset of those concept words.
    """
    for name, v in (("n_images", n_images), ("captions_per_image", captions_per_image),
                    ("n_regions", n_regions), ("d_r", d_r), ("vocab_size", vocab_size),
                    ("concepts_per_image", concepts_per_image)):
        if v < 1:
            raise ArgumentError(f"{name} must be >= 1, got {v}")
    if n_val < 0 or n_test < 0 or n_val + n_test > n_images:
        raise ArgumentError("n_val + n_test must lie in [0, n_images]")
    k = min(concepts_per_image, vocab_size)
    rng = np.random.default_rng(seed)
    width = len(str(vocab_size - 1))
    words = [f"w{i:0{width}d}" for i in range(vocab_size)]
    prototypes = rng.normal(size=(vocab_size, d_r))

    if vocab_size >= n_images * k:
        concept_table = rng.permutation(vocab_size)[: n_images * k].reshape(n_images, k)
    else:
        concept_table = np.stack([rng.choice(vocab_size, size=k, replace=False) for _ in range(n_images)])

    id_width = len(str(n_images - 1))
    region_sets, captions = [], []
    for i in range(n_images):
        image_id = f"img{i:0{id_width}d}"
        concepts = concept_table[i]
        W = float(rng.integers(320, 641))
        H = float(rng.integers(240, 481))
        boxes, feats = [], []
        for r in range(n_regions):
            c = concepts[r % k]
            x1 = round(float(rng.uniform(0, 0.7 * W)), 1)
            y1 = round(float(rng.uniform(0, 0.7 * H)), 1)
            x2 = round(float(rng.uniform(x1, W)), 1)
            y2 = round(float(rng.uniform(y1, H)), 1)
            boxes.append([x1, y1, x2, y2])
            feats.append(np.round(prototypes[c] + noise * rng.normal(size=d_r), 6))
        region_sets.append(RegionSet(image_id, W, H, np.array(boxes), np.array(feats)).validate())
        for j in range(captions_per_image):
            length = int(rng.integers(max(1, k - 1), k + 1))
            chosen = rng.permutation(concepts)[:length]
            text = " ".join(words[c] for c in chosen)
            captions.append(CaptionRecord(f"{image_id}_c{j}", image_id, text.capitalize() + "."))

    ids = [rs.image_id for rs in region_sets]
    n_train = n_images - n_val - n_test
    splits = {"train": ids[:n_train], "val": ids[n_train:n_train + n_val], "test": ids[n_train + n_val:]}
    return SyntheticDataset(region_sets, captions, splits)
