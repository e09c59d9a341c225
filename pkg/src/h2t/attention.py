"""Forward-only multi-head attention and 2D sinusoidal positional encoding.

This module is the reference semantics used to verify that weighted average
pooling approximates attention aggregation: with identity projections,
unit-norm rows, and a large score scale, each attention output row collapses
onto the input row nearest to the corresponding query row. Two inference-only
classifier stacks are provided: "t1" (one aggregation attention layer over a
fixed query bank, then a linear head) and "t2" (one self-attention layer
feeding the same aggregation). No residual connections or layer norms, and
no training: weights come from a tensor container.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .tensor_file import read_tensors, write_tensors

ENCODING_MAX_COORD = 10000.0


def positional_encoding(grid_x, grid_y, dim):
    """2D sine/cosine position vector of length ``dim`` (divisible by 4).

    Component group j (of dim/4) holds
    sin(x / e^(4j/d)), cos(x / e^((4j+1)/d)),
    sin(y / e^((4j+2)/d)), cos(y / e^((4j+3)/d))
    with e = 10000, the assumed maximum coordinate.
    """
    return positional_encoding_batch(np.array([[grid_x, grid_y]]), dim)[0]


def positional_encoding_batch(positions, dim):
    positions = np.asarray(positions, dtype=np.float64)
    if dim % 4 != 0 or dim <= 0:
        raise ConfigError(f"encoding dimension must be divisible by 4, got {dim}")
    if positions.min(initial=0) < 0 or positions.max(initial=0) >= ENCODING_MAX_COORD:
        raise DataError(f"grid coordinates must lie in [0, {ENCODING_MAX_COORD:g})")
    x = positions[:, 0:1]
    y = positions[:, 1:2]
    j4 = 4.0 * np.arange(dim // 4, dtype=np.float64)
    out = np.empty((len(positions), dim), dtype=np.float64)
    out[:, 0::4] = np.sin(x / ENCODING_MAX_COORD ** (j4 / dim))
    out[:, 1::4] = np.cos(x / ENCODING_MAX_COORD ** ((j4 + 1.0) / dim))
    out[:, 2::4] = np.sin(y / ENCODING_MAX_COORD ** ((j4 + 2.0) / dim))
    out[:, 3::4] = np.cos(y / ENCODING_MAX_COORD ** ((j4 + 3.0) / dim))
    return out


def softmax(scores, axis=-1):
    """Numerically stable softmax (shift by the row max before exponentiating)."""
    shifted = scores - scores.max(axis=axis, keepdims=True)
    expo = np.exp(shifted)
    return expo / expo.sum(axis=axis, keepdims=True)


@dataclass
class AttentionConfig:
    """Per-head projection weights for one attention layer.

    w_q: (heads, d_q, d_e), w_k: (heads, d_k, d_e), w_v: (heads, d_v, d_e),
    w_l: (heads * d_e, d_out), beta: positive score scale, r: optional fixed
    query bank (M x d_q) used when the layer aggregates instead of
    self-attending.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_l: np.ndarray
    beta: float
    r: np.ndarray | None = None

    def __post_init__(self):
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")
        if not (self.w_q.ndim == self.w_k.ndim == self.w_v.ndim == 3):
            raise ConfigError("per-head weights must be 3D (heads, d_in, d_e)")
        heads, _, d_e = self.w_q.shape
        if self.w_k.shape[0] != heads or self.w_v.shape[0] != heads:
            raise ConfigError("head count mismatch across w_q / w_k / w_v")
        if self.w_k.shape[2] != d_e:
            raise ConfigError("w_k projection width differs from w_q")
        if self.w_l.shape[0] != heads * self.w_v.shape[2]:
            raise ConfigError("w_l input width must be heads * d_e")

    @property
    def num_heads(self):
        return self.w_q.shape[0]

    @classmethod
    def identity(cls, dim, beta=None, heads=1):
        """Identity projections in ``dim`` dimensions (single combine block
        per head); default beta is 1/sqrt(dim)."""
        if beta is None:
            beta = 1.0 / np.sqrt(dim)
        eye = np.eye(dim)[None].repeat(heads, axis=0)
        w_l = np.concatenate([np.eye(dim)] * heads, axis=0) / heads
        return cls(w_q=eye, w_k=eye.copy(), w_v=eye.copy(), w_l=w_l, beta=beta)


def default_beta(d_k):
    """The usual inverse square root scaling on the key dimension."""
    return 1.0 / np.sqrt(d_k)


def mha_forward(r, y, config: AttentionConfig, return_attention=False):
    """Multi-head attention: softmax(beta * R Wq (Y Wk)^T) Y Wv per head,
    heads concatenated then combined by w_l.

    ``r`` may be None to use the config's fixed query bank. Row m of the
    output is a convex combination of the value-projected rows of ``y``.
    """
    if r is None:
        r = config.r
    if r is None:
        raise ConfigError("no query matrix: pass r or set config.r")
    r = np.asarray(r, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or len(y) < 1:
        raise DataError("y must be a non-empty 2D matrix")
    if not (np.isfinite(r).all() and np.isfinite(y).all()):
        raise NumericError("non-finite attention inputs")
    if r.shape[1] != config.w_q.shape[1]:
        raise DataError(f"query dim {r.shape[1]} does not match w_q input {config.w_q.shape[1]}")
    if y.shape[1] != config.w_k.shape[1]:
        raise DataError(f"key dim {y.shape[1]} does not match w_k input {config.w_k.shape[1]}")
    if y.shape[1] != config.w_v.shape[1]:
        raise DataError(f"value dim {y.shape[1]} does not match w_v input {config.w_v.shape[1]}")

    head_outputs = []
    attentions = []
    for h in range(config.num_heads):
        scores = config.beta * (r @ config.w_q[h]) @ (y @ config.w_k[h]).T
        attn = softmax(scores, axis=1)
        attentions.append(attn)
        head_outputs.append(attn @ (y @ config.w_v[h]))
    out = np.concatenate(head_outputs, axis=1) @ config.w_l
    if return_attention:
        return out, np.stack(attentions)
    return out


@dataclass
class TransformerWeights:
    """Weights for the inference-only classifier stacks.

    ``agg`` must carry a fixed query bank r; ``self_attn`` is present only
    for the two-layer variant. The linear head consumes the flattened
    aggregation output (M * d_out values).
    """

    agg: AttentionConfig
    fcn_w: np.ndarray       # classes x (M * d_out)
    fcn_b: np.ndarray       # classes
    self_attn: AttentionConfig | None = None

    @property
    def variant(self):
        return "t2" if self.self_attn is not None else "t1"


def transformer_forward(x, variant, weights: TransformerWeights):
    """Class logits for one input sequence (rows already carry any
    positional encoding the caller wants)."""
    if variant not in ("t1", "t2"):
        raise ConfigError(f"unknown transformer variant {variant!r}")
    x = np.asarray(x, dtype=np.float64)
    if variant == "t2":
        if weights.self_attn is None:
            raise ConfigError("t2 requires self-attention weights")
        x = mha_forward(x, x, weights.self_attn)
    if weights.agg.r is None:
        raise ConfigError("aggregation layer requires a fixed query bank r")
    pooled = mha_forward(None, x, weights.agg)
    flat = pooled.reshape(-1)
    if weights.fcn_w.shape[1] != flat.size:
        raise DataError(
            f"linear head expects {weights.fcn_w.shape[1]} inputs, aggregation produced {flat.size}"
        )
    return weights.fcn_w @ flat + weights.fcn_b


# ---------------------------------------------------------------------------
# Weight container round-trip
# ---------------------------------------------------------------------------

def _pack_layer(prefix, config):
    tensors = {
        f"{prefix}.w_q": config.w_q,
        f"{prefix}.w_k": config.w_k,
        f"{prefix}.w_v": config.w_v,
        f"{prefix}.w_l": config.w_l,
        f"{prefix}.beta": np.array([config.beta], dtype=np.float32),
    }
    if config.r is not None:
        tensors[f"{prefix}.r"] = config.r
    return tensors


def _unpack_layer(prefix, tensors):
    try:
        return AttentionConfig(
            w_q=tensors[f"{prefix}.w_q"].astype(np.float64),
            w_k=tensors[f"{prefix}.w_k"].astype(np.float64),
            w_v=tensors[f"{prefix}.w_v"].astype(np.float64),
            w_l=tensors[f"{prefix}.w_l"].astype(np.float64),
            beta=float(tensors[f"{prefix}.beta"][0]),
            r=tensors[f"{prefix}.r"].astype(np.float64) if f"{prefix}.r" in tensors else None,
        )
    except KeyError as exc:
        raise DataError(f"weight container missing tensor {exc}") from exc


def save_transformer_weights(weights: TransformerWeights, path):
    tensors = {}
    if weights.self_attn is not None:
        tensors.update(_pack_layer("self", weights.self_attn))
    tensors.update(_pack_layer("agg", weights.agg))
    tensors["fcn.w"] = weights.fcn_w
    tensors["fcn.b"] = weights.fcn_b
    write_tensors(path, tensors)


def load_transformer_weights(path) -> TransformerWeights:
    tensors = read_tensors(path)
    self_attn = _unpack_layer("self", tensors) if "self.w_q" in tensors else None
    try:
        fcn_w = tensors["fcn.w"].astype(np.float64)
        fcn_b = tensors["fcn.b"].astype(np.float64)
    except KeyError as exc:
        raise DataError(f"weight container missing tensor {exc}") from exc
    return TransformerWeights(
        agg=_unpack_layer("agg", tensors), fcn_w=fcn_w, fcn_b=fcn_b, self_attn=self_attn
    )
