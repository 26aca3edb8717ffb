"""Transformer and recurrent building blocks.

Parameters live in flat ``dict[str, Tensor]`` mappings; every block reads its
own entries through a name prefix so a whole model is one flat dictionary.
Matrices follow the row-vector convention ``x @ W``.

Two Transformer layouts are provided:

* :func:`vanilla_block` -- post-norm, ``LayerNorm(x + MHA(x))`` then
  ``LayerNorm(h + FF(h))``.
* :func:`reordered_block` -- normalisation moved inside the branch, a small
  LeakyReLU on each branch output, and a GRU-type gate replacing both
  residual additions.  The path from input to output never passes through a
  normalisation, so with zeroed branches and closed gates the block is close
  to the identity.
"""

from __future__ import annotations

import math

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

LN_EPS = 1e-5
LEAKY_SLOPE = 0.05
MAX_POSITIONS = 584
GATE_NAMES = ("W_r", "U_r", "W_z", "U_z", "W_g", "U_g")


# ---------------------------------------------------------------- init helpers

def _glorot(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_linear(rng, prefix, fan_in, fan_out, bias=True) -> dict:
    p = {f"{prefix}.w": Tensor(_glorot(rng, fan_in, fan_out), requires_grad=True)}
    if bias:
        p[f"{prefix}.b"] = Tensor(np.zeros(fan_out), requires_grad=True)
    return p


def init_layer_norm(prefix, d) -> dict:
    return {f"{prefix}.scale": Tensor(np.ones(d), requires_grad=True),
            f"{prefix}.shift": Tensor(np.zeros(d), requires_grad=True)}


def init_gate(rng, prefix, d, bias=5.0, spread=0.05) -> dict:
    p = {f"{prefix}.{n}": Tensor(rng.uniform(-spread, spread, size=(d, d)), requires_grad=True)
         for n in GATE_NAMES}
    p[f"{prefix}.b_g"] = Tensor(np.full(d, float(bias)), requires_grad=True)
    return p


def init_attention(rng, prefix, d) -> dict:
    p = {}
    for n in ("q", "k", "v", "o"):
        p.update(init_linear(rng, f"{prefix}.{n}", d, d))
    return p


def init_feed_forward(rng, prefix, d, ff_dim) -> dict:
    return {**init_linear(rng, f"{prefix}.ff1", d, ff_dim),
            **init_linear(rng, f"{prefix}.ff2", ff_dim, d)}


def init_block(rng, prefix, d, ff_dim, kind="reordered", gate_bias=5.0) -> dict:
    """Parameters for one vanilla or reordered Transformer block."""
    p = {**init_attention(rng, f"{prefix}.mha", d),
         **init_feed_forward(rng, prefix, d, ff_dim),
         **init_layer_norm(f"{prefix}.ln1", d),
         **init_layer_norm(f"{prefix}.ln2", d)}
    if kind == "reordered":
        p.update(init_gate(rng, f"{prefix}.gate1", d, gate_bias))
        p.update(init_gate(rng, f"{prefix}.gate2", d, gate_bias))
    elif kind != "vanilla":
        raise ValueError(f"unknown block kind {kind!r}")
    return p


def zero_branches(params: dict, prefix: str = "") -> dict:
    """Copy of ``params`` with attention and feed-forward weights set to zero."""
    out = {}
    for name, t in params.items():
        branch = ".mha." in name or ".ff1." in name or ".ff2." in name
        if name.startswith(prefix) and branch:
            out[name] = Tensor(np.zeros(t.shape), requires_grad=t.requires_grad)
        else:
            out[name] = t
    return out


def init_recurrent(rng, prefix, in_dim, d) -> dict:
    return {f"{prefix}.W": Tensor(_glorot(rng, in_dim, 3 * d), requires_grad=True),
            f"{prefix}.U": Tensor(_glorot(rng, d, 3 * d), requires_grad=True),
            f"{prefix}.b": Tensor(np.zeros(3 * d), requires_grad=True)}


# ---------------------------------------------------------------- primitives

def layer_norm(x, scale, shift, eps: float = LN_EPS) -> Tensor:
    x = dc.as_tensor(x)
    if x.shape[-1] < 2:
        raise dc.ShapeError(f"layer_norm needs feature dim >= 2, got {x.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = dc.square(centered).mean(axis=-1, keepdims=True)
    normed = centered / dc.sqrt(var + eps)
    return normed * scale + shift


def positional_encoding(length: int, d: int, max_len: int = MAX_POSITIONS) -> np.ndarray:
    """Sinusoidal table: sine on even feature indices, cosine on odd ones."""
    if length > max_len:
        raise ValueError(f"sequence length {length} exceeds positional maximum {max_len}")
    pos = np.arange(length)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _attention_bias(mask, batch_shape):
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    return np.where(mask, 0.0, -1e9)[:, None, None, :]


def multi_head_attention(x, p: dict, prefix: str, num_heads: int, mask=None,
                         return_weights: bool = False):
    """Unmasked scaled dot-product self-attention over ``x`` of shape (T, d) or (B, T, d).

    ``mask`` (B, T) marks valid positions; padded keys receive no weight.
    """
    x = dc.as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = dc.reshape(x, (1,) + x.shape)
    b, t, d = x.shape
    if d % num_heads:
        raise dc.ShapeError(f"d_model {d} not divisible by {num_heads} heads")
    dh = d // num_heads

    def heads(name):
        proj = dc.linear(x, p[f"{prefix}.{name}.w"], p[f"{prefix}.{name}.b"])
        return dc.transpose(dc.reshape(proj, (b, t, num_heads, dh)), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = dc.matmul(q, dc.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    bias = _attention_bias(mask, (b, t))
    if bias is not None:
        scores = scores + bias
    weights = dc.softmax(scores, axis=-1)
    ctx = dc.transpose(dc.matmul(weights, v), (0, 2, 1, 3))
    out = dc.linear(dc.reshape(ctx, (b, t, d)), p[f"{prefix}.o.w"], p[f"{prefix}.o.b"])
    if squeeze:
        out = dc.reshape(out, (t, d))
    return (out, weights) if return_weights else out


def feed_forward(x, p: dict, prefix: str, activation=dc.relu) -> Tensor:
    h = activation(dc.linear(x, p[f"{prefix}.ff1.w"], p[f"{prefix}.ff1.b"]))
    return dc.linear(h, p[f"{prefix}.ff2.w"], p[f"{prefix}.ff2.b"])


def gru_gate(x, y, p: dict, prefix: str) -> Tensor:
    """GRU-type interpolation between the residual ``x`` and branch output ``y``.

    r = sig(y W_r + x U_r); z = sig(y W_z + x U_z - b_g);
    h = tanh(y W_g + (r * x) U_g); out = (1 - z) * x + z * h.
    """
    x, y = dc.as_tensor(x), dc.as_tensor(y)
    if x.shape != y.shape:
        raise dc.ShapeError(f"gru_gate: shapes {x.shape} and {y.shape} differ")
    g = {n: p[f"{prefix}.{n}"] for n in GATE_NAMES + ("b_g",)}
    d = x.shape[-1]
    # the three y-projections and two x-projections run as two wide products
    from_y = dc.linear(y, dc.concat([g["W_r"], g["W_z"], g["W_g"]], axis=1))
    from_x = dc.linear(x, dc.concat([g["U_r"], g["U_z"]], axis=1))
    r = dc.sigmoid(from_y[..., :d] + from_x[..., :d])
    z = dc.sigmoid(from_y[..., d:2 * d] + from_x[..., d:] - g["b_g"])
    h = dc.tanh(from_y[..., 2 * d:] + dc.linear(r * x, g["U_g"]))
    return x + z * (h - x)


# ---------------------------------------------------------------- blocks

def vanilla_block(x, p: dict, prefix: str, num_heads: int, mask=None,
                  rng=None, dropout: float = 0.0) -> Tensor:
    """Post-norm Transformer encoder block."""
    a = dc.dropout(multi_head_attention(x, p, f"{prefix}.mha", num_heads, mask), dropout, rng)
    h = layer_norm(x + a, p[f"{prefix}.ln1.scale"], p[f"{prefix}.ln1.shift"])
    f = dc.dropout(feed_forward(h, p, prefix), dropout, rng)
    return layer_norm(h + f, p[f"{prefix}.ln2.scale"], p[f"{prefix}.ln2.shift"])


def reordered_block(x, p: dict, prefix: str, num_heads: int, mask=None,
                    rng=None, dropout: float = 0.0, slope: float = LEAKY_SLOPE,
                    activation=None) -> Tensor:
    """Pre-norm block with gated residuals; ``activation`` overrides the LeakyReLU."""
    act = activation or (lambda t: dc.leaky_relu(t, slope))
    n1 = layer_norm(x, p[f"{prefix}.ln1.scale"], p[f"{prefix}.ln1.shift"])
    y1 = act(dc.dropout(multi_head_attention(n1, p, f"{prefix}.mha", num_heads, mask),
                        dropout, rng))
    h1 = gru_gate(x, y1, p, f"{prefix}.gate1")
    n2 = layer_norm(h1, p[f"{prefix}.ln2.scale"], p[f"{prefix}.ln2.shift"])
    y2 = act(dc.dropout(feed_forward(n2, p, prefix), dropout, rng))
    return gru_gate(h1, y2, p, f"{prefix}.gate2")


def recurrent_encoder(x, p: dict, prefix: str, mask=None, return_last: bool = False):
    """Single-layer GRU over (T, F) or (B, T, F); padded steps carry the state forward."""
    x = dc.as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = dc.reshape(x, (1,) + x.shape)
    b, t, _ = x.shape
    if t < 1:
        raise ValueError("recurrent_encoder needs at least one step")
    W, U, bias = p[f"{prefix}.W"], p[f"{prefix}.U"], p[f"{prefix}.b"]
    d = U.shape[0]
    xw = dc.linear(x, W, bias)  # all input projections at once
    mask = np.ones((b, t), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    h = Tensor(np.zeros((b, d)))
    states = []
    for step in range(t):
        gx = xw[:, step, :]
        gh = dc.linear(h, U)
        r = dc.sigmoid(gx[:, :d] + gh[:, :d])
        z = dc.sigmoid(gx[:, d:2 * d] + gh[:, d:2 * d])
        cand = dc.tanh(gx[:, 2 * d:] + r * gh[:, 2 * d:])
        new = h + z * (cand - h)
        m = mask[:, step:step + 1].astype(np.float64)
        h = new if m.all() else new * m + h * (1.0 - m)
        states.append(h)
    seq = dc.stack(states, axis=1)
    if squeeze:
        seq = dc.reshape(seq, (t, d))
        h = dc.reshape(h, (d,))
    return (seq, h) if return_last else seq
