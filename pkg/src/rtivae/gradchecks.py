"""Finite-difference verification of every differentiable operation.

Each case reduces its op's output to a scalar through a fixed random
projection, so gradients are O(1) and the relative-error test is meaningful.
Inputs are drawn away from kinks (relu, clamps) where central differences
are undefined.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import blocks
from . import diffcore as dc
from . import distributions as D
from . import model as M
from .diffcore import Tensor

TOLERANCE = 1e-4


@dataclass
class CaseResult:
    name: str
    max_relative_error: float
    checked: int
    passed: bool


def _projected(fn, out_shape, rng):
    w = rng.normal(size=out_shape)
    return lambda x: (fn(x) * w).sum()


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _broken_tanh(a):
    # deliberately wrong derivative, used as a negative control
    a = dc.as_tensor(a)
    out = np.tanh(a.data)
    return dc._make(out, (a,), lambda g: (g * (1.0 - out * out) * 1.1,), "tanh")


def op_cases(seed: int = 0, sabotage: bool = False) -> dict:
    """name -> (scalar function of one tensor, point)."""
    rng = np.random.default_rng(seed)
    n = lambda *s: rng.normal(size=s)  # noqa: E731
    pos = lambda *s: rng.uniform(0.5, 2.0, size=s)  # noqa: E731
    other, wide, bias = n(3, 4), n(4, 5), n(5)
    cond = rng.random((3, 4)) > 0.5
    idx = rng.integers(0, 3, size=5)
    rows = rng.integers(0, 4, size=(3, 2))
    tanh = _broken_tanh if sabotage else dc.tanh
    cases = {
        "add": (lambda x: x + other, n(3, 4)),
        "sub": (lambda x: other - x, n(3, 4)),
        "mul": (lambda x: x * other, n(3, 4)),
        "div": (lambda x: other / x, pos(3, 4)),
        "neg": (lambda x: -x, n(3, 4)),
        "power": (lambda x: dc.power(x, 1.7), pos(3, 4)),
        "square": (dc.square, n(3, 4)),
        "sqrt": (dc.sqrt, pos(3, 4)),
        "exp": (dc.exp, n(3, 4)),
        "log": (dc.log, pos(3, 4)),
        "tanh": (tanh, n(3, 4)),
        "sigmoid": (dc.sigmoid, n(3, 4)),
        "relu": (dc.relu, _away_from_zero(rng, (3, 4))),
        "leaky_relu": (dc.leaky_relu, _away_from_zero(rng, (3, 4))),
        "clamp_min": (lambda x: dc.clamp_min(x, 0.0), _away_from_zero(rng, (3, 4))),
        "clamp_prob": (dc.clamp_prob, rng.uniform(0.05, 0.95, size=(3, 4))),
        "sum": (lambda x: dc.tsum(x, axis=1, keepdims=True), n(3, 4)),
        "mean": (lambda x: dc.mean(x, axis=0), n(3, 4)),
        "softmax": (lambda x: dc.softmax(x, axis=-1), n(3, 4)),
        "log_softmax": (lambda x: dc.log_softmax(x, axis=-1), n(3, 4)),
        "logsumexp": (lambda x: dc.logsumexp(x, axis=-1), n(3, 4)),
        "matmul": (lambda x: dc.matmul(x, wide), n(2, 3, 4)),
        "linear": (lambda x: dc.linear(x, wide, bias), n(2, 3, 4)),
        "reshape": (lambda x: dc.reshape(x, (4, 3)), n(3, 4)),
        "transpose": (lambda x: dc.transpose(x, (2, 0, 1)), n(2, 3, 4)),
        "swapaxes": (lambda x: dc.swapaxes(x, 0, 2), n(2, 3, 4)),
        "getitem": (lambda x: x[1:, ::2], n(3, 4)),
        "gather": (lambda x: dc.gather(x, idx, axis=0), n(3, 4)),
        "take_along": (lambda x: dc.take_along(x, rows), n(3, 4)),
        "concat": (lambda x: dc.concat([x, dc.square(x)], axis=0), n(3, 4)),
        "stack": (lambda x: dc.stack([x, dc.exp(x)], axis=1), n(3, 4)),
        "where": (lambda x: dc.where(cond, x, dc.square(x)), n(3, 4)),
        "dropout": (lambda x: dc.dropout(x, 0.3, np.random.default_rng(seed + 1)), n(3, 4)),
    }
    out = {}
    for name, (fn, point) in cases.items():
        shape = fn(Tensor(point)).shape
        out[name] = (_projected(fn, shape, rng), point)
    return out


def _tiny_config(variant):
    return M.ModelConfig(d_model=8, num_heads=2, ff_dim=16, token_dim=4, encoder_blocks=1,
                         decoder_blocks=1, qpsi_layers=2, qpsi_units=4, variant=variant,
                         mi_mode="joint", dropout=0.0)


def _tiny_batch(seed):
    rng = np.random.default_rng(seed)
    lengths = np.array([7, 5])
    n_tok = np.array([3, 2])
    frames = rng.uniform(0.0, 2.0, size=(2, 7, 16))
    mask = np.arange(7)[None] < lengths[:, None]
    frames = frames * mask[:, :, None]
    tokens = rng.integers(0, 16, size=(2, 3))
    tok_mask = np.arange(3)[None] < n_tok[:, None]
    return {"frames": frames, "mask": mask, "lengths": lengths, "tokens": tokens * tok_mask,
            "tok_mask": tok_mask, "n_tokens": n_tok, "y_o": np.array([0, 1])}


def end_to_end_case(variant: str, seed: int = 0):
    """L_total of a tiny model as a function of its flattened parameter vector.

    Log-variance head biases are lifted off their floors so the clamp is
    smooth at the check point.
    """
    config = _tiny_config(variant)
    params = M.init_params(config, seed)
    rng = np.random.default_rng(seed + 7)
    names = sorted(params)
    shapes = [params[k].shape for k in names]
    sizes = [int(np.prod(s)) for s in shapes]
    flat = np.concatenate([params[k].data.ravel() for k in names])
    flat = flat + rng.normal(0.0, 0.05, size=flat.shape)
    offset = 0
    for k, size in zip(names, sizes):
        if k.endswith("logvar.b") and k.startswith("enc."):
            flat[offset:offset + size] += 1.0
        offset += size
    batch = _tiny_batch(seed)
    noise = (rng.normal(size=(2, config.z_o_dim)), rng.normal(size=(2, config.z_l_dim)))
    bounds = np.cumsum([0] + sizes)

    def f(x):
        p = {k: dc.reshape(x[int(bounds[i]):int(bounds[i + 1])], shapes[i])
             for i, k in enumerate(names)}
        return M.forward_train(batch, config, p, noise=noise).l_total

    return f, flat


def composite_cases(seed: int = 0) -> dict:
    rng = np.random.default_rng(seed + 3)
    d, t = 8, 5
    blk = blocks.init_block(rng, "b", d, 16, "reordered", gate_bias=1.0)
    van = blocks.init_block(rng, "v", d, 16, "vanilla")
    rnn = blocks.init_recurrent(rng, "r", 4, d)
    mask = np.array([[True] * t, [True] * 3 + [False] * 2])
    y = rng.normal(size=(2, t, d))
    prior = D.MixturePrior(Tensor(rng.normal(size=(3, 3))), Tensor(rng.normal(-1, 0.3, (3, 3))),
                           np.full(3, 1 / 3))
    p_gauss = D.DiagonalGaussian(Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(4, 3))))
    q_cat = rng.dirichlet(np.ones(3), size=4)
    noise = rng.normal(size=(4, 3))
    labels = rng.integers(0, 2, size=4)
    zl_q = rng.normal(size=(4, 3))
    ln_scale, ln_shift = rng.normal(1.0, 0.1, d), rng.normal(0, 0.1, d)
    cases = {
        "layer_norm": (lambda x: blocks.layer_norm(x, ln_scale, ln_shift),
                       rng.normal(size=(2, t, d))),
        "multi_head_attention": (lambda x: blocks.multi_head_attention(x, blk, "b.mha", 2, mask),
                                 rng.normal(size=(2, t, d))),
        "feed_forward": (lambda x: blocks.feed_forward(x, blk, "b"), rng.normal(size=(2, t, d))),
        "gru_gate": (lambda x: blocks.gru_gate(x, y, blk, "b.gate1"), rng.normal(size=(2, t, d))),
        "vanilla_block": (lambda x: blocks.vanilla_block(x, van, "v", 2, mask),
                          rng.normal(size=(2, t, d))),
        "reordered_block": (lambda x: blocks.reordered_block(x, blk, "b", 2, mask),
                            rng.normal(size=(2, t, d))),
        "recurrent_encoder": (lambda x: blocks.recurrent_encoder(x, rnn, "r", mask),
                              rng.normal(size=(2, t, 4))),
        "reparameterize": (lambda x: D.reparameterize(D.DiagonalGaussian(x, x * 0.5), noise),
                           rng.normal(size=(4, 3))),
        "kl_diag_gaussians": (
            lambda x: D.kl_diag_gaussians(D.DiagonalGaussian(x, x * 0.3), p_gauss),
            rng.normal(size=(4, 3))),
        "kl_categorical": (
            lambda x: D.kl_categorical(D.CategoricalPosterior(dc.softmax(x)), q_cat),
            rng.normal(size=(4, 3))),
        "mixture_responsibilities": (lambda x: D.mixture_responsibilities(prior, x).probabilities,
                                     rng.normal(size=(4, 3))),
        "expected_mixture_kl": (lambda x: D.expected_mixture_kl(
            D.DiagonalGaussian(x, Tensor(zl_q)), D.mixture_responsibilities(prior, x), prior),
            rng.normal(size=(4, 3))),
        "l_mi": (lambda x: M.compute_l_mi(dc.softmax(x), labels), rng.normal(size=(4, 2))),
    }
    out = {}
    for name, (fn, point) in cases.items():
        shape = fn(Tensor(point)).shape
        out[name] = (_projected(fn, shape, rng), point)
    return out


def run_suite(seed: int = 0, sabotage: bool = False, tolerance: float = TOLERANCE,
              end_to_end_coords: int = 60) -> list:
    """Check every op, composite and end-to-end L_total; one CaseResult each."""
    results = []
    for group in (op_cases(seed, sabotage), composite_cases(seed)):
        for name, (f, point) in group.items():
            rep = dc.grad_check(f, point, tolerance=tolerance)
            results.append(CaseResult(name, rep.max_relative_error, rep.checked, rep.passed))
    for variant in M.VARIANTS:
        f, point = end_to_end_case(variant, seed)
        with dc.no_grad():
            scale = max(1.0, abs(float(f(Tensor(point)).data)))
        rep = dc.grad_check(f, point, tolerance=tolerance, coords=end_to_end_coords,
                            rng=np.random.default_rng(seed), floor=1e-6 * scale)
        results.append(CaseResult(f"l_total[{variant}]", rep.max_relative_error, rep.checked,
                                  rep.passed))
    return results
