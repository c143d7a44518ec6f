"""TERN: two transformer-encoder pipelines meeting in weight-shared final layers.

Visual path: boxes -> 5-d geometry vector, concatenated with the region
feature and passed through a shared Linear-ReLU-Linear stack; a zero I-CLS
slot is prepended; non-shared visual TE layers; linear projection to the
common width; shared TE layers; slot 0 is L2-normalized.

Text path: T-CLS id prepended, learned token embeddings plus sinusoidal
positions, optional non-shared text TE layers, projection, the *same* shared
TE layer objects, slot 0, L2-normalized.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import numerics as nx
from .config import TernConfig
from .data_io import CLS_ID, PAD_ID, Embedding, RegionSet, TokenSequence
from .encoder import Linear, make_te_layer, te_stack_forward
from .errors import ArgumentError
from .numerics import Parameter, Tensor


def geometry_vector(box, width: float, height: float, mode: str = "conventional") -> np.ndarray:
    """Normalized box corners plus normalized area.

    ``paper-literal`` keeps the printed denominators (y1 over W, x2 over H).
    """
    if not (width > 0 and height > 0):
        raise ArgumentError(f"image size must be positive, got {width}x{height}")
    x1, y1, x2, y2 = (float(v) for v in box)
    area = (x2 - x1) * (y2 - y1) / (width * height)
    if mode == "conventional":
        return np.array([x1 / width, y1 / height, x2 / width, y2 / height, area])
    if mode == "paper-literal":
        return np.array([x1 / width, y1 / width, x2 / height, y2 / height, area])
    raise ArgumentError(f"unknown geometry mode {mode!r}")


def geometry_matrix(rs: RegionSet, mode: str = "conventional") -> np.ndarray:
    if not (rs.width > 0 and rs.height > 0):
        raise ArgumentError(f"image {rs.image_id}: size must be positive, got {rs.width}x{rs.height}")
    if rs.n_regions == 0:
        return np.zeros((0, 5))
    return np.stack([geometry_vector(b, rs.width, rs.height, mode) for b in rs.boxes])


def positional_encoding(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class TERN:
    def __init__(self, cfg: TernConfig, seed: int = 0):
        self.cfg = cfg.validate()
        rng = np.random.default_rng(seed)
        c = cfg
        self.spatial1 = Linear("visual.spatial.1", c.d_r + 5, c.d_visual, rng)
        self.spatial2 = Linear("visual.spatial.2", c.d_visual, c.d_visual, rng)
        self.visual_layers = [make_te_layer(f"visual.te.{i}", c.d_visual, c.heads, c.d_ff, c.dropout, rng)
                              for i in range(c.n_visual_te)]
        self.visual_proj = Linear("visual.proj", c.d_visual, c.d_common, rng)

        self.word_embedding = Parameter("text.embedding", rng.normal(0.0, c.d_text ** -0.5, (c.vocab_size, c.d_text)))
        self.text_layers = [make_te_layer(f"text.te.{i}", c.d_text, c.heads, c.d_ff, c.dropout, rng)
                            for i in range(c.n_text_te)]
        self.text_proj = Linear("text.proj", c.d_text, c.d_common, rng)

        shared = [make_te_layer(f"shared.te.{i}", c.d_common, c.heads, c.d_ff, c.dropout, rng)
                  for i in range(c.n_shared_te)]
        # one list object, referenced by both pipelines
        self.visual_shared = shared
        self.text_shared = shared
        self._positions = positional_encoding(c.max_tokens, c.d_text)

    # -- parameters -------------------------------------------------------
    def named_parameters(self) -> list:
        """Every parameter exactly once, in a fixed order."""
        groups = [self.spatial1.parameters(), self.spatial2.parameters()]
        groups += [layer.parameters() for layer in self.visual_layers]
        groups += [self.visual_proj.parameters(), [self.word_embedding]]
        groups += [layer.parameters() for layer in self.text_layers]
        groups += [self.text_proj.parameters()]
        groups += [layer.parameters() for layer in self.visual_shared]
        out, seen = [], set()
        for group in groups:
            for p in group:
                if id(p) not in seen:
                    seen.add(id(p))
                    out.append((p.name, p))
        return out

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        nx.zero_grads(self.parameters())

    def astype(self, dtype) -> "TERN":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    # -- forward ----------------------------------------------------------
    def forward_images(self, region_sets: Sequence[RegionSet], rng: np.random.Generator | None = None) -> Tensor:
        """Normalized image embeddings ``(B, d_common)``; ``rng`` enables dropout."""
        c = self.cfg
        if not region_sets:
            raise ArgumentError("no images to encode")
        batch = []
        for rs in region_sets:
            if rs.n_regions == 0:
                raise ArgumentError(f"image {rs.image_id} has no regions")
            if rs.features.shape[1] != c.d_r:
                raise ArgumentError(f"image {rs.image_id}: feature dim {rs.features.shape[1]} != d_r {c.d_r}")
            batch.append(rs.truncated(c.max_regions))
        dtype = self.spatial1.weight.dtype
        n = max(rs.n_regions for rs in batch)
        B = len(batch)
        x = np.zeros((B, n, c.d_r + 5), dtype=dtype)
        valid = np.zeros((B, n + 1), dtype=bool)
        valid[:, 0] = True
        for b, rs in enumerate(batch):
            k = rs.n_regions
            x[b, :k, :c.d_r] = rs.features
            x[b, :k, c.d_r:] = geometry_matrix(rs, c.geometry_mode)
            valid[b, 1:k + 1] = True
        regions = self.spatial2(nx.relu(self.spatial1(Tensor(x, dtype=dtype))))
        icls = Tensor(np.zeros((B, 1, c.d_visual), dtype=dtype), dtype=dtype)
        seq = nx.concat([icls, regions], axis=1)
        seq = te_stack_forward(seq, self.visual_layers, valid, rng)
        seq = self.visual_proj(seq)
        seq = te_stack_forward(seq, self.visual_shared, valid, rng)
        return nx.l2_normalize(seq[:, 0, :], axis=-1)

    def forward_captions(self, captions: Sequence[TokenSequence], rng: np.random.Generator | None = None) -> Tensor:
        """Normalized caption embeddings ``(B, d_common)``."""
        c = self.cfg
        if not captions:
            raise ArgumentError("no captions to encode")
        m = max(len(ts.tokens) for ts in captions) + 1
        if m > c.max_tokens:
            raise ArgumentError(f"caption of {m - 1} tokens exceeds max_tokens={c.max_tokens} (incl. T-CLS)")
        B = len(captions)
        ids = np.full((B, m), PAD_ID, dtype=np.int64)
        valid = np.zeros((B, m), dtype=bool)
        for b, ts in enumerate(captions):
            if not ts.tokens:
                raise ArgumentError(f"caption {ts.caption_id} is empty")
            toks = np.asarray(ts.tokens, dtype=np.int64)
            if toks.min() < 0 or toks.max() >= c.vocab_size:
                raise ArgumentError(f"caption {ts.caption_id}: token id outside vocabulary of size {c.vocab_size}")
            ids[b, 0] = CLS_ID
            ids[b, 1:len(toks) + 1] = toks
            valid[b, :len(toks) + 1] = True
        dtype = self.word_embedding.dtype
        seq = nx.embedding(self.word_embedding, ids) + self._positions[:m].astype(dtype)
        seq = te_stack_forward(seq, self.text_layers, valid, rng)
        seq = self.text_proj(seq)
        seq = te_stack_forward(seq, self.text_shared, valid, rng)
        return nx.l2_normalize(seq[:, 0, :], axis=-1)


def spatial_condition(rs: RegionSet, model: TERN) -> Tensor:
    """Geometry-aware region vectors ``(n, d_visual)`` before the I-CLS slot."""
    c = model.cfg
    geo = geometry_matrix(rs, c.geometry_mode)
    dtype = model.spatial1.weight.dtype
    x = Tensor(np.concatenate([rs.features, geo], axis=1), dtype=dtype)
    return model.spatial2(nx.relu(model.spatial1(x)))


def encode_images(region_sets: Sequence[RegionSet], model: TERN, batch_size: int = 64) -> list:
    out = []
    for i in range(0, len(region_sets), batch_size):
        chunk = region_sets[i:i + batch_size]
        vecs = model.forward_images(chunk).data
        out += [Embedding(rs.image_id, "image", v) for rs, v in zip(chunk, vecs)]
    return out


def encode_captions(captions: Sequence[TokenSequence], model: TERN, batch_size: int = 256) -> list:
    out = []
    for i in range(0, len(captions), batch_size):
        chunk = captions[i:i + batch_size]
        vecs = model.forward_captions(chunk).data
        out += [Embedding(ts.caption_id, "caption", v) for ts, v in zip(chunk, vecs)]
    return out


def encode_image(rs: RegionSet, model: TERN) -> Embedding:
    return encode_images([rs], model)[0]


def encode_caption(ts: TokenSequence, model: TERN) -> Embedding:
    return encode_captions([ts], model)[0]


def shared_layers_identity_check(model: TERN) -> bool:
    """True iff both pipelines run through one physical set of shared weights."""
    a, b = model.visual_shared, model.text_shared
    if len(a) != len(b):
        return False
    for la, lb in zip(a, b):
        if la is not lb:
            return False
        for pa, pb in zip(la.parameters(), lb.parameters()):
            if pa is not pb or not np.shares_memory(pa.data, pb.data):
                return False
    names = [n for n, _ in model.named_parameters()]
    return len(names) == len(set(names))
