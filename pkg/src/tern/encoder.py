"""Scaled dot-product attention and post-norm transformer-encoder layers.

All functions accept either a single sequence ``(s, d)`` or a padded batch
``(B, s, d)`` together with a boolean validity mask of shape ``(s,)`` or
``(B, s)``. Padded keys are pushed to ``MASK_VALUE`` before the softmax, so
they get (numerically) zero weight; padded query rows still produce output
but never influence the valid ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ArgumentError, ConfigError
from .numerics import Parameter, Tensor

MASK_VALUE = -1e9


def as_mask(valid, length: int) -> np.ndarray:
    """Validate a boolean mask; ``None`` means every position is real."""
    if valid is None:
        return np.ones(length, dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape[-1] != length:
        raise ArgumentError(f"mask length {valid.shape[-1]} != sequence length {length}")
    if not np.all(valid.any(axis=-1)):
        raise ArgumentError("attention mask has no valid position")
    return valid


def _mask_bias(valid: np.ndarray, dtype) -> np.ndarray:
    return np.where(valid, 0.0, MASK_VALUE).astype(dtype)


def scaled_dot_product_attention(Q: Tensor, K: Tensor, V: Tensor, mask=None, return_weights: bool = False):
    """softmax(Q K^T / sqrt(d_k)) V with padded keys excluded.

    ``mask`` covers the key axis and must broadcast against the leading axes
    of the logits ``(..., t, s)``.
    """
    Q, K, V = nx.as_tensor(Q), nx.as_tensor(K), nx.as_tensor(V)
    d_k = Q.shape[-1]
    if K.shape[-1] != d_k:
        raise ArgumentError(f"query/key dims differ: {Q.shape} vs {K.shape}")
    if K.shape[-2] != V.shape[-2]:
        raise ArgumentError(f"key/value lengths differ: {K.shape} vs {V.shape}")
    valid = as_mask(mask, K.shape[-2])
    logits = nx.matmul(Q, nx.transpose(K, _swap_last(K.ndim))) * (1.0 / math.sqrt(d_k))
    bias = _mask_bias(valid, logits.dtype)
    # (..., s) -> (..., 1, s) so it lines up with the query axis
    logits = logits + np.expand_dims(bias, -2)
    weights = nx.softmax(logits, axis=-1)
    out = nx.matmul(weights, V)
    return (out, weights) if return_weights else out


def _swap_last(ndim: int) -> tuple:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


class Linear:
    """Affine map ``x @ W + b`` with Xavier-uniform weights and zero bias."""

    def __init__(self, name: str, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = Parameter(f"{name}.weight", nx.xavier_uniform(rng, d_in, d_out))
        self.bias = Parameter(f"{name}.bias", np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ArgumentError(f"linear expects last dim {self.weight.shape[0]}, got {x.shape}")
        return nx.matmul(x, self.weight) + self.bias

    def parameters(self):
        return [self.weight, self.bias]


@dataclass
class TELayerParams:
    """Weights of one encoder layer.

    The per-head projections are stored as single ``d_i x d_i`` matrices whose
    column blocks of width ``d_i / heads`` are the individual heads.
    """

    d_model: int
    heads: int
    d_ff: int
    dropout: float
    wq: Linear
    wk: Linear
    wv: Linear
    wo: Linear
    ff1: Linear
    ff2: Linear
    ln1_gain: Parameter
    ln1_bias: Parameter
    ln2_gain: Parameter
    ln2_bias: Parameter

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads

    def parameters(self) -> list:
        out = []
        for lin in (self.wq, self.wk, self.wv, self.wo, self.ff1, self.ff2):
            out.extend(lin.parameters())
        out.extend([self.ln1_gain, self.ln1_bias, self.ln2_gain, self.ln2_bias])
        return out


def make_te_layer(name: str, d_model: int, heads: int, d_ff: int, dropout: float,
                  rng: np.random.Generator) -> TELayerParams:
    if heads < 1 or d_model % heads:
        raise ConfigError(f"d_model={d_model} is not divisible by heads={heads}")
    return TELayerParams(
        d_model=d_model, heads=heads, d_ff=d_ff, dropout=dropout,
        wq=Linear(f"{name}.attn.q", d_model, d_model, rng),
        wk=Linear(f"{name}.attn.k", d_model, d_model, rng),
        wv=Linear(f"{name}.attn.v", d_model, d_model, rng),
        wo=Linear(f"{name}.attn.out", d_model, d_model, rng),
        ff1=Linear(f"{name}.ff.1", d_model, d_ff, rng),
        ff2=Linear(f"{name}.ff.2", d_ff, d_model, rng),
        ln1_gain=Parameter(f"{name}.ln1.gain", np.ones(d_model)),
        ln1_bias=Parameter(f"{name}.ln1.bias", np.zeros(d_model)),
        ln2_gain=Parameter(f"{name}.ln2.gain", np.ones(d_model)),
        ln2_bias=Parameter(f"{name}.ln2.bias", np.zeros(d_model)),
    )


def _batched(X: Tensor, mask):
    """Lift a single sequence to a batch of one; return (X, mask, squeeze)."""
    X = nx.as_tensor(X)
    if X.ndim == 2:
        valid = as_mask(mask, X.shape[0])
        return nx.reshape(X, (1,) + X.shape), valid[None, :], True
    if X.ndim != 3:
        raise ArgumentError(f"expected (s, d) or (B, s, d) input, got {X.shape}")
    valid = as_mask(mask, X.shape[1])
    if valid.ndim == 1:
        valid = np.broadcast_to(valid, X.shape[:2])
    return X, valid, False


def _unbatch(Y: Tensor, squeeze: bool) -> Tensor:
    return nx.reshape(Y, Y.shape[1:]) if squeeze else Y


def multi_head_attention(X: Tensor, params: TELayerParams, mask=None) -> Tensor:
    """Self-attention: queries, keys and values all come from ``X``."""
    if params.d_model % params.heads:
        raise ConfigError(f"d_model={params.d_model} is not divisible by heads={params.heads}")
    X, valid, squeeze = _batched(X, mask)
    B, s, d = X.shape
    if d != params.d_model:
        raise ArgumentError(f"input width {d} != layer width {params.d_model}")
    h, dh = params.heads, params.d_head

    def split(t: Tensor) -> Tensor:
        return nx.transpose(nx.reshape(t, (B, s, h, dh)), (0, 2, 1, 3))

    q, k, v = split(params.wq(X)), split(params.wk(X)), split(params.wv(X))
    att = scaled_dot_product_attention(q, k, v, valid[:, None, :])
    merged = nx.reshape(nx.transpose(att, (0, 2, 1, 3)), (B, s, d))
    return _unbatch(params.wo(merged), squeeze)


def te_layer_forward(X: Tensor, params: TELayerParams, mask=None, rng: np.random.Generator | None = None) -> Tensor:
    """Post-norm encoder layer: LN(X + MHA(X)) then LN(. + FFN(.)).

    ``rng`` switches on training-mode dropout; ``None`` is evaluation mode.
    """
    X, valid, squeeze = _batched(X, mask)
    a = nx.dropout(multi_head_attention(X, params, valid), params.dropout, rng)
    h = nx.layer_norm(X + a, params.ln1_gain, params.ln1_bias)
    f = params.ff2(nx.relu(params.ff1(h)))
    f = nx.dropout(f, params.dropout, rng)
    out = nx.layer_norm(h + f, params.ln2_gain, params.ln2_bias)
    nx.check_finite(out, "transformer encoder layer")
    return _unbatch(out, squeeze)


def te_stack_forward(X: Tensor, layers, mask=None, rng: np.random.Generator | None = None) -> Tensor:
    """Apply ``layers`` in order and return the full output sequence."""
    widths = {p.d_model for p in layers}
    if len(widths) > 1:
        raise ConfigError(f"encoder stack mixes layer widths {sorted(widths)}")
    X = nx.as_tensor(X)
    if layers and X.shape[-1] != layers[0].d_model:
        raise ConfigError(f"input width {X.shape[-1]} != stack width {layers[0].d_model}")
    for p in layers:
        X = te_layer_forward(X, p, mask, rng)
    return X
