"""Retrieval metrics: ranking, Recall@K, DCG/NDCG@p, ROUGE-L relevance.

RelevanceMatrix binary layout (little-endian)::

    b"RELM"            magic
    u16                format version (currently 1)
    u32 rows, u32 cols
    rows x (u32 byte length, UTF-8 bytes)   query ids
    cols x (u32 byte length, UTF-8 bytes)   image ids
    rows*cols float32  values, row-major
"""

from __future__ import annotations

import io
import json
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .config import EvalConfig
from .errors import ArgumentError, ParseError

RELM_MAGIC = b"RELM"
RELM_VERSION = 1


# ---------------------------------------------------------------------------
# Ranking and Recall@K
# ---------------------------------------------------------------------------


@dataclass
class RankedList:
    query_id: str
    items: list  # (gallery_id, score), best first

    @property
    def ids(self) -> list:
        return [gid for gid, _ in self.items]


def _vec(e) -> np.ndarray:
    return np.asarray(getattr(e, "vector", e), dtype=np.float64)


def rank_gallery(query, gallery: Sequence, query_id: str | None = None) -> RankedList:
    """Brute-force cosine ranking, descending; equal scores ordered by gallery id."""
    if not gallery:
        raise ArgumentError("cannot rank an empty gallery")
    q = _vec(query)
    G = np.stack([_vec(g) for g in gallery])
    if G.shape[1] != q.shape[0]:
        raise ArgumentError(f"query dim {q.shape[0]} != gallery dim {G.shape[1]}")
    qn, gn = np.linalg.norm(q), np.linalg.norm(G, axis=1)
    if qn == 0 or np.any(gn == 0):
        raise ArgumentError("zero-norm vector in ranking")
    scores = (G @ q) / (gn * qn)
    ids = [getattr(g, "id", str(i)) for i, g in enumerate(gallery)]
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    qid = query_id if query_id is not None else getattr(query, "id", "")
    return RankedList(qid, [(ids[i], float(scores[i])) for i in order])


def recall_at_k(rankings: Sequence[RankedList], ground_truth: Mapping[str, str], k: int) -> float:
    """Fraction of queries whose ground-truth item is within the top ``k``."""
    if k < 1:
        raise ArgumentError("k must be >= 1")
    if not rankings:
        return 0.0
    hits = 0
    for r in rankings:
        if r.query_id not in ground_truth:
            raise ArgumentError(f"no ground truth for query {r.query_id}")
        hits += ground_truth[r.query_id] in r.ids[:k]
    return hits / len(rankings)


# ---------------------------------------------------------------------------
# DCG / NDCG
# ---------------------------------------------------------------------------


def dcg(rels: Sequence[float], p: int) -> float:
    """sum_{i=1..min(p, n)} rel_i / log2(i + 1)."""
    if p < 1:
        raise ArgumentError("p must be >= 1")
    rels = np.asarray(rels, dtype=np.float64)[:p]
    if np.any(rels < 0):
        raise ArgumentError("relevance values must be non-negative")
    discounts = np.log2(np.arange(2, len(rels) + 2))
    return float(np.sum(rels / discounts))


def ndcg(rels: Sequence[float], p: int) -> float:
    """DCG of the given order over DCG of the same values sorted descending.

    ``rels`` must be the relevance of the *whole* ranked list so the ideal
    ordering sees every candidate. All-zero relevance gives 0.
    """
    rels = np.asarray(rels, dtype=np.float64)
    ideal = dcg(np.sort(rels)[::-1], p)
    if ideal == 0:
        return 0.0
    actual = dcg(rels, p)
    if actual == ideal:
        return 1.0
    return min(1.0, actual / ideal)


# ---------------------------------------------------------------------------
# ROUGE-L and caption-set relevance
# ---------------------------------------------------------------------------


def lcs_length(a: Sequence, b: Sequence) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence, reference: Sequence, beta: float = 1.2) -> float:
    """LCS F-measure: (1 + b^2) R P / (R + b^2 P)."""
    if not candidate or not reference:
        raise ArgumentError("ROUGE-L needs non-empty token sequences")
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    r = lcs / len(reference)
    p = lcs / len(candidate)
    b2 = beta * beta
    return (1 + b2) * r * p / (r + b2 * p)


def tau(query: Sequence, caption_set: Sequence[Sequence], beta: float = 1.2, aggregation: str = "max") -> float:
    """Similarity of a query caption to an image's caption set."""
    if not caption_set:
        raise ArgumentError("caption set is empty")
    scores = [rouge_l(query, c, beta) for c in caption_set]
    if aggregation == "max":
        return max(scores)
    if aggregation == "mean":
        return float(np.mean(scores))
    raise ArgumentError(f"unknown aggregation {aggregation!r}")


@dataclass
class RelevanceMatrix:
    query_ids: list
    image_ids: list
    values: np.ndarray  # float32 (rows, cols)

    def __post_init__(self):
        self.query_ids = [str(q) for q in self.query_ids]
        self.image_ids = [str(i) for i in self.image_ids]
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.shape != (len(self.query_ids), len(self.image_ids)):
            raise ArgumentError(f"relevance values {self.values.shape} do not match "
                                f"{len(self.query_ids)} queries x {len(self.image_ids)} images")
        for what, ids in (("query", self.query_ids), ("image", self.image_ids)):
            if len(set(ids)) != len(ids):
                raise ArgumentError(f"duplicate {what} ids in relevance matrix")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ArgumentError("relevance values must be finite and non-negative")
        self._row = {q: i for i, q in enumerate(self.query_ids)}
        self._col = {g: j for j, g in enumerate(self.image_ids)}

    def row_index(self, query_id: str) -> int:
        return self._row[query_id]

    def col_index(self, image_id: str) -> int:
        return self._col[image_id]

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(RELM_MAGIC)
        buf.write(struct.pack("<HII", RELM_VERSION, len(self.query_ids), len(self.image_ids)))
        for ids in (self.query_ids, self.image_ids):
            for s in ids:
                raw = s.encode("utf-8")
                buf.write(struct.pack("<I", len(raw)))
                buf.write(raw)
        buf.write(self.values.astype("<f4").tobytes(order="C"))
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes, source: str = "<bytes>") -> "RelevanceMatrix":
        if data[:4] != RELM_MAGIC:
            raise ParseError("not a relevance matrix (bad magic)", source)
        try:
            version, rows, cols = struct.unpack_from("<HII", data, 4)
            if version != RELM_VERSION:
                raise ParseError(f"unsupported relevance format version {version}", source)
            off = 14
            tables = []
            for count in (rows, cols):
                ids = []
                for _ in range(count):
                    (n,) = struct.unpack_from("<I", data, off)
                    off += 4
                    ids.append(data[off:off + n].decode("utf-8"))
                    off += n
                tables.append(ids)
            need = rows * cols * 4
            if len(data) - off != need:
                raise ParseError(f"expected {need} value bytes, found {len(data) - off}", source)
            values = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=off).reshape(rows, cols)
        except (struct.error, UnicodeDecodeError) as exc:
            raise ParseError(f"truncated or corrupt relevance matrix: {exc}", source) from None
        return cls(tables[0], tables[1], values.astype(np.float32))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "RelevanceMatrix":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"no such relevance file: {path}")
        return cls.from_bytes(path.read_bytes(), str(path))


def _relevance_row(args):
    query, image_sets, beta, aggregation = args
    return [tau(query, caps, beta, aggregation) for caps in image_sets]


def build_relevance_matrix(queries: Sequence[tuple], images: Sequence[tuple], cfg: EvalConfig | None = None,
                           workers: int = 1) -> RelevanceMatrix:
    """tau(captions of image i, query j) for every query row and image column.

    ``queries`` is a sequence of ``(caption_id, tokens)``; ``images`` a sequence
    of ``(image_id, [tokens, ...])``. Rows are independent, so ``workers > 1``
    fans them out to processes without changing the result.
    """
    cfg = cfg or EvalConfig()
    if isinstance(images, Mapping):
        images = list(images.items())
    q_ids = [q for q, _ in queries]
    i_ids = [i for i, _ in images]
    for what, ids in (("query", q_ids), ("image", i_ids)):
        if len(set(ids)) != len(ids):
            dup = sorted({x for x in ids if ids.count(x) > 1})
            raise ArgumentError(f"duplicate {what} ids: {dup[:10]}")
    image_sets = [list(caps) for _, caps in images]
    for (iid, _), caps in zip(images, image_sets):
        if not caps:
            raise ArgumentError(f"image {iid} has no captions")
    jobs = [(list(tokens), image_sets, cfg.rouge_beta, cfg.tau_aggregation) for _, tokens in queries]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_relevance_row, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        rows = [_relevance_row(j) for j in jobs]
    values = np.array(rows, dtype=np.float64).reshape(len(q_ids), len(i_ids))
    return RelevanceMatrix(q_ids, i_ids, values)


# ---------------------------------------------------------------------------
# Evaluation report
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    n_queries: int
    n_images: int
    p: int
    recall: dict  # K -> value
    ndcg: dict  # relevance source -> mean NDCG@p
    per_query: list = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "n_queries": self.n_queries,
            "n_images": self.n_images,
            "p": self.p,
            "recall": {str(k): v for k, v in self.recall.items()},
            "ndcg": dict(self.ndcg),
        }

    def to_table(self) -> str:
        heads = [f"R@{k}" for k in self.recall] + [f"NDCG@{self.p} {src}" for src in self.ndcg]
        vals = [f"{100 * v:.1f}" for v in self.recall.values()] + [f"{v:.3f}" for v in self.ndcg.values()]
        widths = [max(len(h), len(v)) for h, v in zip(heads, vals)]
        line1 = " | ".join(h.rjust(w) for h, w in zip(heads, widths))
        line2 = "-+-".join("-" * w for w in widths)
        line3 = " | ".join(v.rjust(w) for v, w in zip(vals, widths))
        return f"image retrieval: {self.n_queries} caption queries, {self.n_images} images\n{line1}\n{line2}\n{line3}\n"

    def to_jsonl(self) -> str:
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.per_query)


def evaluate_retrieval(image_embs: Sequence, caption_queries: Sequence, relevance,
                       ground_truth: Mapping[str, str], cfg: EvalConfig | None = None,
                       ps: Sequence[int] | None = None) -> EvalReport:
    """Caption-to-image retrieval: Recall@K over ``cfg.ks`` and mean NDCG@p.

    ``relevance`` is one ``RelevanceMatrix`` or a mapping source name ->
    matrix (e.g. ``{"rouge_l": ..., "spice": ...}``). When ``ps`` is given,
    every per-query record also carries NDCG at each of those cutoffs.
    """
    cfg = cfg or EvalConfig()
    if isinstance(relevance, RelevanceMatrix):
        relevance = {"rouge_l": relevance}
    gallery = list(image_embs)
    if not gallery:
        raise ArgumentError("empty image gallery")
    gallery_ids = [g.id for g in gallery]
    query_ids = [q.id for q in caption_queries]
    for name, rel in relevance.items():
        missing_q = sorted(set(query_ids) - set(rel.query_ids))
        missing_i = sorted(set(gallery_ids) - set(rel.image_ids))
        if missing_q or missing_i:
            raise ArgumentError(f"relevance '{name}' misses queries {missing_q[:10]} and images {missing_i[:10]}")
    missing_gt = sorted(q for q in query_ids if q not in ground_truth)
    if missing_gt:
        raise ArgumentError(f"no ground truth for queries {missing_gt[:10]}")

    cols = {name: np.array([rel.col_index(g) for g in gallery_ids]) for name, rel in relevance.items()}
    pos = {g: j for j, g in enumerate(gallery_ids)}
    rankings, per_query = [], []
    ndcg_sums = {name: 0.0 for name in relevance}
    for q in caption_queries:
        ranked = rank_gallery(q, gallery)
        rankings.append(ranked)
        order = np.array([pos[g] for g in ranked.ids])
        gt = ground_truth[q.id]
        rec = {"query_id": q.id, "gt_image": gt,
               "gt_rank": ranked.ids.index(gt) + 1 if gt in pos else None,
               "top": ranked.ids[: min(cfg.p, len(ranked.ids))], "ndcg": {}}
        for name, rel in relevance.items():
            row = rel.values[rel.row_index(q.id)].astype(np.float64)[cols[name]]
            rels = row[order]
            v = ndcg(rels, cfg.p)
            ndcg_sums[name] += v
            rec["ndcg"][name] = v
            if ps:
                rec.setdefault("ndcg_at", {})[name] = [ndcg(rels, p) for p in ps]
        per_query.append(rec)
    n = len(caption_queries)
    recall = {k: recall_at_k(rankings, ground_truth, k) for k in cfg.ks}
    means = {name: (s / n if n else 0.0) for name, s in ndcg_sums.items()}
    return EvalReport(n, len(gallery), cfg.p, recall, means, per_query)


def ndcg_curve(report: EvalReport, ps: Sequence[int]) -> dict:
    """Mean NDCG at each cutoff in ``ps`` from a report built with the same ``ps``."""
    out = {}
    for rec in report.per_query:
        for name, vals in rec.get("ndcg_at", {}).items():
            acc = out.setdefault(name, np.zeros(len(ps)))
            acc += np.asarray(vals)
    n = max(1, len(report.per_query))
    return {name: (acc / n).tolist() for name, acc in out.items()}
