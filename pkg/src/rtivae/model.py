"""The style VAE: encoder heads, mixture priors, the q_psi probe network,
a length-regulated decoder, and the decomposed training objective.

Batches are dictionaries produced by :func:`collate`::

    frames   (B, T, F)   zero padded
    mask     (B, T)      True on valid frames
    lengths  (B,)
    tokens   (B, N)      zero padded content ids
    tok_mask (B, N)
    y_o      (B,)
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import blocks
from . import diffcore as dc
from .diffcore import Tensor
from .distributions import (CategoricalPosterior, DiagonalGaussian, MixturePrior,
                            expected_mixture_kl, kl_categorical, kl_diag_gaussians,
                            marginal_prior_stats, mixture_responsibilities, reparameterize)

VARIANTS = ("recurrent", "vanilla", "reordered")
MI_MODES = ("joint", "split", "adversarial")


@dataclass
class ModelConfig:
    z_l_dim: int = 3
    z_o_dim: int = 2
    n_components: int = 3
    n_classes: int = 2
    n_channels: int = 16
    vocab_size: int = 16
    token_dim: int = 16
    d_model: int = 64
    num_heads: int = 4
    ff_dim: int = 256
    encoder_blocks: int = 2
    decoder_blocks: int = 2
    variant: str = "reordered"
    beta: float = 1.0
    gamma: float = 1.0
    mi_mode: str = "joint"
    qpsi_layers: int = 4
    qpsi_units: int = 8
    zl_logvar_floor: float = -4.0
    zo_logvar_floor: float = -6.0
    zl_prior_means: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    zl_prior_logvar: float = -4.0
    zo_prior_means: tuple = ((-0.5, -0.5), (0.5, 0.5))
    zo_prior_logvar: float = -5.0
    gate_bias: float = 5.0
    dropout: float = 0.1
    max_positions: int = 584

    def __post_init__(self):
        self.zl_prior_means = tuple(tuple(float(v) for v in row) for row in self.zl_prior_means)
        self.zo_prior_means = tuple(tuple(float(v) for v in row) for row in self.zo_prior_means)
        self.validate()

    def validate(self):
        dims = ("z_l_dim", "z_o_dim", "n_components", "n_classes", "n_channels", "vocab_size",
                "token_dim", "d_model", "num_heads", "ff_dim", "qpsi_layers", "qpsi_units")
        for name in dims:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.mi_mode not in MI_MODES:
            raise ValueError(f"mi_mode must be one of {MI_MODES}, got {self.mi_mode!r}")
        if self.beta < 0 or self.gamma < 0:
            raise ValueError("beta and gamma must be non-negative")
        if self.d_model % self.num_heads:
            raise ValueError("d_model must be divisible by num_heads")
        if np.shape(self.zl_prior_means) != (self.n_components, self.z_l_dim):
            raise ValueError("zl_prior_means must be n_components x z_l_dim")
        if np.shape(self.zo_prior_means) != (self.n_classes, self.z_o_dim):
            raise ValueError("zo_prior_means must be n_classes x z_o_dim")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["zl_prior_means"] = [list(r) for r in self.zl_prior_means]
        d["zo_prior_means"] = [list(r) for r in self.zo_prior_means]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Posteriors:
    q_zo: DiagonalGaussian
    q_zl: DiagonalGaussian
    q_yl: CategoricalPosterior
    z_o: Tensor
    z_l: Tensor


@dataclass
class LossBreakdown:
    l_mel: Tensor
    kl_zo: Tensor
    kl_zl_mixture: Tensor
    kl_yl: Tensor
    l_kl: Tensor
    l_mi: Tensor
    l_cond: Tensor
    l_total: Tensor
    l_frames: Tensor | None = None
    l_dur: Tensor | None = None
    qpsi_true_prob: np.ndarray | None = field(default=None, repr=False)

    def values(self) -> dict:
        names = ("l_mel", "kl_zo", "kl_zl_mixture", "kl_yl", "l_kl", "l_mi", "l_cond", "l_total",
                 "l_frames", "l_dur")
        return {n: float(getattr(self, n).data) for n in names if getattr(self, n) is not None}


# ---------------------------------------------------------------- batches

def collate(samples) -> dict:
    """Pad a list of StyledSample into batch arrays."""
    lengths = np.array([s.frames.shape[0] for s in samples])
    n_tok = np.array([len(s.tokens) for s in samples])
    b, f = len(samples), samples[0].frames.shape[1]
    frames = np.zeros((b, lengths.max(), f))
    tokens = np.zeros((b, n_tok.max()), dtype=np.int64)
    for i, s in enumerate(samples):
        frames[i, :lengths[i]] = s.frames
        tokens[i, :n_tok[i]] = s.tokens
    return {"frames": frames, "mask": np.arange(lengths.max())[None] < lengths[:, None],
            "lengths": lengths, "tokens": tokens,
            "tok_mask": np.arange(n_tok.max())[None] < n_tok[:, None],
            "n_tokens": n_tok, "y_o": np.array([s.y_o for s in samples], dtype=np.int64)}


def alignment_from_lengths(lengths, n_tokens) -> np.ndarray:
    """Teacher-forced frame->token map: frame t of a length-T sample reads token floor(t n / T)."""
    t_max = int(np.max(lengths))
    idx = np.zeros((len(lengths), t_max), dtype=np.int64)
    for i, (t, n) in enumerate(zip(lengths, n_tokens)):
        idx[i, :t] = (np.arange(t) * n) // t
    return idx


def alignment_from_counts(counts, tok_mask) -> tuple:
    """Frame->token map from integer repeat counts; returns (index, lengths)."""
    counts = np.where(tok_mask, counts, 0)
    lengths = counts.sum(axis=1)
    idx = np.zeros((len(counts), int(lengths.max())), dtype=np.int64)
    for i in range(len(counts)):
        rep = np.repeat(np.arange(counts.shape[1]), counts[i])
        idx[i, :len(rep)] = rep
    return idx, lengths


# ---------------------------------------------------------------- model

def init_params(config: ModelConfig, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    c, d = config, config.d_model
    p = {}
    if c.variant == "recurrent":
        p.update(blocks.init_recurrent(rng, "enc.rnn", c.n_channels, d))
    else:
        p.update(blocks.init_linear(rng, "enc.in", c.n_channels, d))
        for i in range(c.encoder_blocks):
            p.update(blocks.init_block(rng, f"enc.block{i}", d, c.ff_dim, c.variant, c.gate_bias))
    for name, dim, floor in (("zo", c.z_o_dim, c.zo_prior_logvar),
                             ("zl", c.z_l_dim, c.zl_prior_logvar)):
        p.update(blocks.init_linear(rng, f"enc.{name}.mean", d, dim))
        p.update(blocks.init_linear(rng, f"enc.{name}.logvar", d, dim))
        p[f"enc.{name}.logvar.w"] = Tensor(p[f"enc.{name}.logvar.w"].data * 0.1,
                                           requires_grad=True)
        p[f"enc.{name}.logvar.b"] = Tensor(np.full(dim, floor), requires_grad=True)

    p["prior.zl.means"] = Tensor(np.array(c.zl_prior_means), requires_grad=True)
    p["prior.zl.logvar"] = Tensor(np.full((c.n_components, c.z_l_dim), c.zl_prior_logvar),
                                  requires_grad=True)
    p["prior.zo.means"] = Tensor(np.array(c.zo_prior_means), requires_grad=True)
    p["prior.zo.logvar"] = Tensor(np.full((c.n_classes, c.z_o_dim), c.zo_prior_logvar),
                                  requires_grad=True)

    width = c.z_l_dim
    for i in range(c.qpsi_layers):
        p.update(blocks.init_linear(rng, f"qpsi.l{i}", width, c.qpsi_units))
        width = c.qpsi_units
    p.update(blocks.init_linear(rng, "qpsi.out", width, c.n_classes))

    p["dec.tok_emb"] = Tensor(rng.normal(0.0, 1.0, (c.vocab_size, c.token_dim)),
                              requires_grad=True)
    p.update(blocks.init_linear(rng, "dec.dur", c.token_dim + c.z_l_dim, 1))
    p["dec.dur.b"] = Tensor(np.array([math.log(8.0)]), requires_grad=True)
    p.update(blocks.init_linear(rng, "dec.in", c.token_dim + c.z_o_dim + c.z_l_dim + 1, d))
    for i in range(c.decoder_blocks):
        p.update(blocks.init_block(rng, f"dec.block{i}", d, c.ff_dim, "reordered", c.gate_bias))
    p.update(blocks.init_linear(rng, "dec.out", d, c.n_channels))
    for name, t in p.items():
        t.name = name
    return p


def zl_prior(params) -> MixturePrior:
    return MixturePrior.uniform(params["prior.zl.means"], params["prior.zl.logvar"])


def zo_prior(params, y_o) -> DiagonalGaussian:
    return DiagonalGaussian(dc.gather(params["prior.zo.means"], y_o),
                            dc.gather(params["prior.zo.logvar"], y_o))


def _encoder_summary(frames, mask, config: ModelConfig, params, rng=None) -> Tensor:
    frames = dc.as_tensor(frames)
    if frames.shape[1] < 1:
        raise ValueError("cannot encode an empty sequence")
    drop = config.dropout if rng is not None else 0.0
    if config.variant == "recurrent":
        _, last = blocks.recurrent_encoder(frames, params, "enc.rnn", mask, return_last=True)
        return last
    t = frames.shape[1]
    h = dc.linear(frames, params["enc.in.w"], params["enc.in.b"])
    h = h + blocks.positional_encoding(t, config.d_model, config.max_positions)
    block = blocks.reordered_block if config.variant == "reordered" else blocks.vanilla_block
    for i in range(config.encoder_blocks):
        h = block(h, params, f"enc.block{i}", config.num_heads, mask, rng=rng, dropout=drop)
    m = np.asarray(mask, dtype=np.float64)[:, :, None]
    return (h * m).sum(axis=1) / m.sum(axis=1)


def encode(frames, mask, config: ModelConfig, params, noise_rng=None, rng=None,
           noise=None) -> Posteriors:
    """Posterior heads over a padded batch; ``noise`` = (eps_o, eps_l) overrides ``noise_rng``."""
    summary = _encoder_summary(frames, mask, config, params, rng)

    def head(name, floor):
        mean = dc.linear(summary, params[f"enc.{name}.mean.w"], params[f"enc.{name}.mean.b"])
        lv = dc.linear(summary, params[f"enc.{name}.logvar.w"], params[f"enc.{name}.logvar.b"])
        return DiagonalGaussian.with_floor(mean, lv, floor)

    q_zo = head("zo", config.zo_logvar_floor)
    q_zl = head("zl", config.zl_logvar_floor)
    if noise is None:
        noise_rng = noise_rng if noise_rng is not None else np.random.default_rng(0)
        noise = (noise_rng.standard_normal(q_zo.mean.shape),
                 noise_rng.standard_normal(q_zl.mean.shape))
    z_o = reparameterize(q_zo, noise[0])
    z_l = reparameterize(q_zl, noise[1])
    q_yl = mixture_responsibilities(zl_prior(params), z_l)
    return Posteriors(q_zo, q_zl, q_yl, z_o, z_l)


def classify_q_psi(z_l, params, config: ModelConfig | None = None,
                   detach_params: bool = False) -> Tensor:
    """Class probabilities from z_l: tanh MLP then softmax."""
    take = (lambda t: dc.stop_gradient(t)) if detach_params else (lambda t: t)
    layers = sorted(int(k[len("qpsi.l"):].split(".")[0]) for k in params
                    if k.startswith("qpsi.l") and k.endswith(".w"))
    h = dc.as_tensor(z_l)
    for i in layers:
        h = dc.tanh(dc.linear(h, take(params[f"qpsi.l{i}.w"]), take(params[f"qpsi.l{i}.b"])))
    logits = dc.linear(h, take(params["qpsi.out.w"]), take(params["qpsi.out.b"]))
    return dc.softmax(logits, axis=-1)


def encode_samples(samples, config: ModelConfig, params, batch_size: int = 64) -> dict:
    """Posterior means for a list of samples, in input order.

    Returns arrays ``z_o``, ``z_l`` (means), ``y_o`` and ``qpsi`` (q_psi class
    probabilities evaluated at the z_l means).
    """
    order = np.argsort([s.length for s in samples], kind="stable")
    z_o = np.zeros((len(samples), config.z_o_dim))
    z_l = np.zeros((len(samples), config.z_l_dim))
    with dc.no_grad():
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            batch = collate([samples[j] for j in idx])
            zeros = (np.zeros((len(idx), config.z_o_dim)), np.zeros((len(idx), config.z_l_dim)))
            post = encode(batch["frames"], batch["mask"], config, params, noise=zeros)
            z_o[idx], z_l[idx] = post.q_zo.mean.data, post.q_zl.mean.data
        qpsi = classify_q_psi(z_l, params).data
    y_o = np.array([s.y_o for s in samples], dtype=np.int64)
    return {"z_o": z_o, "z_l": z_l, "y_o": y_o, "qpsi": qpsi}


def _one_hot(labels, n) -> np.ndarray:
    return np.eye(n)[np.asarray(labels, dtype=np.int64)]


def mi_entropy_term(probs) -> Tensor:
    """sum_a p_a log p_a per row, with 0 log 0 = 0."""
    probs = dc.as_tensor(probs)
    return (probs * dc.log(dc.clamp_prob(probs))).sum(axis=-1)


def compute_l_mi(probs, observed) -> Tensor:
    """sum_a p_a log p_a - p_observed (per row when batched)."""
    probs = dc.as_tensor(probs)
    onehot = _one_hot(observed, probs.shape[-1])
    return mi_entropy_term(probs) - (probs * onehot).sum(axis=-1)


def mi_loss(z_l, y_o, params, config: ModelConfig) -> tuple:
    """Per-sample L_MI with the gradient routing selected by ``config.mi_mode``.

    joint: both terms reach encoder and q_psi.  split: the prediction term
    only reaches q_psi.  adversarial: the entropy term only reaches the
    encoder and the prediction term only q_psi.  The value is identical in
    every mode.
    """
    onehot = _one_hot(y_o, config.n_classes)
    if config.mi_mode == "joint":
        probs = classify_q_psi(z_l, params)
        return mi_entropy_term(probs) - (probs * onehot).sum(axis=-1), probs
    probs_pred = classify_q_psi(dc.stop_gradient(z_l), params)
    probs_ent = classify_q_psi(z_l, params, detach_params=config.mi_mode == "adversarial")
    return mi_entropy_term(probs_ent) - (probs_pred * onehot).sum(axis=-1), probs_pred


def duration_logits(tokens, z_l, params) -> Tensor:
    """Per-token log repeat count from the token embedding and z_l."""
    emb = dc.gather(params["dec.tok_emb"], tokens)
    b, n = np.shape(tokens)
    zl = dc.as_tensor(z_l)
    zl_b = dc.reshape(zl, (b, 1, zl.shape[-1])) * np.ones((1, n, 1))
    feats = dc.concat([emb, zl_b], axis=-1)
    return dc.reshape(dc.linear(feats, params["dec.dur.w"], params["dec.dur.b"]), (b, n))


def repeat_counts(log_durations, tok_mask=None) -> np.ndarray:
    """Integer counts of at least 1 per token, rounded on the running total.

    Rounding the cumulative duration keeps the sequence length within half a
    frame of the summed durations instead of drifting by up to n / 2.
    """
    d = np.maximum(1.0, np.exp(np.asarray(log_durations, dtype=np.float64)))
    if tok_mask is not None:
        d = np.where(tok_mask, d, 0.0)
    ends = np.floor(np.cumsum(d, axis=-1) + 0.5)
    return np.diff(ends, axis=-1, prepend=0.0).astype(np.int64)


def decode_frames(tokens, alignment, lengths, z_o, z_l, config: ModelConfig, params,
                  rng=None) -> Tensor:
    """Frames (B, T, F) for a given frame->token alignment."""
    b, t = alignment.shape
    drop = config.dropout if rng is not None else 0.0
    emb = dc.gather(params["dec.tok_emb"], tokens)
    frame_emb = dc.take_along(emb, alignment)
    lengths = np.asarray(lengths)
    mask = np.arange(t)[None] < lengths[:, None]
    rel = (np.arange(t)[None] / np.maximum(lengths[:, None], 1))[:, :, None] * mask[:, :, None]
    ones = np.ones((1, t, 1))
    zo = dc.reshape(dc.as_tensor(z_o), (b, 1, config.z_o_dim)) * ones
    zl = dc.reshape(dc.as_tensor(z_l), (b, 1, config.z_l_dim)) * ones
    h = dc.linear(dc.concat([frame_emb, zo, zl, Tensor(rel)], axis=-1),
                  params["dec.in.w"], params["dec.in.b"])
    h = h + blocks.positional_encoding(t, config.d_model, config.max_positions)
    for i in range(config.decoder_blocks):
        h = blocks.reordered_block(h, params, f"dec.block{i}", config.num_heads, mask,
                                   rng=rng, dropout=drop)
    return dc.linear(h, params["dec.out.w"], params["dec.out.b"])


def decode(tokens, z_o, z_l, config: ModelConfig, params) -> list:
    """Free-running synthesis; returns one (T_i, F) array per batch row."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    if tokens.shape[1] < 1:
        raise ValueError("decode needs at least one token")
    z_o = np.atleast_2d(dc.as_tensor(z_o).data)
    z_l = np.atleast_2d(dc.as_tensor(z_l).data)
    tok_mask = np.ones(tokens.shape, dtype=bool)
    with dc.no_grad():
        counts = repeat_counts(duration_logits(tokens, z_l, params).data, tok_mask)
        idx, lengths = alignment_from_counts(counts, tok_mask)
        out = decode_frames(tokens, idx, lengths, z_o, z_l, config, params).data
    return [out[i, :lengths[i]] for i in range(len(lengths))]


def _align_to(pred: np.ndarray | Tensor, target_t: int) -> Tensor:
    pred = dc.as_tensor(pred)
    t = pred.shape[1]
    if t == target_t:
        return pred
    if t > target_t:
        return pred[:, :target_t]
    pad = Tensor(np.zeros((pred.shape[0], target_t - t, pred.shape[2])))
    return dc.concat([pred, pad], axis=1)


def forward_train(batch: dict, config: ModelConfig, params, noise_rng=None, rng=None,
                  noise=None, teacher_forcing: bool = True, posteriors=None) -> LossBreakdown:
    """Batch-mean loss decomposition.

    L_mel is the frame MSE (mean over valid frames and channels) plus the MSE
    of predicted log repeat counts against log(T / n_tokens).
    """
    mask = batch["mask"]
    post = posteriors or encode(batch["frames"], mask, config, params, noise_rng, rng, noise)
    y_o = batch["y_o"]

    log_dur = duration_logits(batch["tokens"], post.z_l, params)
    target = np.log(batch["lengths"] / batch["n_tokens"])[:, None]
    tm = batch["tok_mask"].astype(np.float64)
    l_dur = (dc.square(log_dur - target) * tm).sum(axis=1) / tm.sum(axis=1)

    if teacher_forcing:
        idx = alignment_from_lengths(batch["lengths"], batch["n_tokens"])
        pred = decode_frames(batch["tokens"], idx, batch["lengths"], post.z_o, post.z_l,
                             config, params, rng)
    else:
        counts = repeat_counts(log_dur.data, batch["tok_mask"])
        idx, lens = alignment_from_counts(counts, batch["tok_mask"])
        pred = decode_frames(batch["tokens"], idx, lens, post.z_o, post.z_l, config, params, rng)
        pred = pred * (np.arange(idx.shape[1])[None] < lens[:, None])[:, :, None]
        pred = _align_to(pred, batch["frames"].shape[1])
    m = mask.astype(np.float64)[:, :, None]
    sq = dc.square(pred - batch["frames"]) * m
    l_frames = sq.sum(axis=(1, 2)) / (m.sum(axis=(1, 2)) * config.n_channels)

    kl_zo = kl_diag_gaussians(post.q_zo, zo_prior(params, y_o))
    kl_zl = expected_mixture_kl(post.q_zl, post.q_yl, zl_prior(params))
    kl_yl = kl_categorical(post.q_yl, np.full(config.n_components, 1.0 / config.n_components))
    l_mi, probs = mi_loss(post.z_l, y_o, params, config)

    l_frames, l_dur = l_frames.mean(), l_dur.mean()
    l_mel = l_frames + l_dur
    kl_zo, kl_zl, kl_yl, l_mi = kl_zo.mean(), kl_zl.mean(), kl_yl.mean(), l_mi.mean()
    l_kl = kl_zo + kl_zl + kl_yl
    l_cond = l_kl * config.beta + l_mi * config.gamma
    true_prob = probs.data[np.arange(len(y_o)), y_o]
    return LossBreakdown(l_mel, kl_zo, kl_zl, kl_yl, l_kl, l_mi, l_cond, l_mel + l_cond,
                         l_frames, l_dur, true_prob)


def traverse_latent(params, config: ModelConfig, dim: int, n_steps: int, tokens,
                    y_o: int = 0) -> tuple:
    """Decode while sweeping z_l[dim] over the marginal prior's mean +/- 3 std.

    Returns (values, decoded) with one decoded (T, F) array per value.
    """
    if not 0 <= dim < config.z_l_dim:
        raise ValueError(f"dim {dim} outside z_l of size {config.z_l_dim}")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    marginal = marginal_prior_stats(zl_prior(params))
    mu, sd = marginal.mean.data, marginal.std
    if n_steps == 1:
        values = np.array([mu[dim]])
    else:
        values = np.linspace(mu[dim] - 3 * sd[dim], mu[dim] + 3 * sd[dim], n_steps)
    z_l = np.tile(mu, (len(values), 1))
    z_l[:, dim] = values
    z_o = np.tile(params["prior.zo.means"].data[y_o], (len(values), 1))
    tokens = np.tile(np.asarray(tokens, dtype=np.int64), (len(values), 1))
    return values, decode(tokens, z_o, z_l, config, params)


# ---------------------------------------------------------------- checkpoints

MANIFEST = "manifest.json"
BLOB = "params.bin"


def save_checkpoint(directory, params: dict, config: ModelConfig, step: int,
                    extra: dict | None = None, meta: dict | None = None) -> Path:
    """Write ``manifest.json`` plus little-endian float64 ``params.bin``.

    ``extra`` holds additional named arrays (optimizer moments) stored after
    the parameters.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, offset, chunks = [], 0, []
    arrays = [(n, params[n].data if isinstance(params[n], Tensor) else params[n])
              for n in sorted(params)]
    arrays += [(n, np.asarray(v)) for n, v in sorted((extra or {}).items())]
    for name, arr in arrays:
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "kind": "param" if name in params else "extra"})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": "rtivae-checkpoint", "version": 1, "step": int(step),
                "config": config.to_dict(), "entries": entries, "meta": meta or {}}
    tmp_blob = directory / (BLOB + ".tmp")
    tmp_blob.write_bytes(b"".join(chunks))
    tmp_manifest = directory / (MANIFEST + ".tmp")
    tmp_manifest.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    tmp_blob.replace(directory / BLOB)
    tmp_manifest.replace(directory / MANIFEST)
    return directory


def load_checkpoint(directory) -> tuple:
    """Returns (params, config, step, extra, meta)."""
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST).read_text())
    if manifest.get("format") != "rtivae-checkpoint":
        raise ValueError(f"{directory} is not a checkpoint")
    blob = (directory / BLOB).read_bytes()
    params, extra = {}, {}
    for e in manifest["entries"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=e["offset"])
        arr = arr.astype(np.float64).reshape(e["shape"])
        if e["kind"] == "param":
            params[e["name"]] = Tensor(arr, requires_grad=True, name=e["name"])
        else:
            extra[e["name"]] = arr
    config = ModelConfig.from_dict(manifest["config"])
    return params, config, manifest["step"], extra, manifest.get("meta", {})
