"""Optimisation loop: Adam with decoupled weight decay, exponential learning-rate
decay, global-norm clipping, per-step logging, checkpoints and early stopping.

Every random draw in a run is keyed by ``(seed, step)`` or ``(seed, epoch)``,
so a run resumed from a checkpoint replays the same trajectory as an
uninterrupted one.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import model as M
from .diffcore import Tensor

log = logging.getLogger(__name__)

LOG_HEADER = ("step", "split", "l_mel", "l_kl", "l_mi", "l_cond", "l_total",
              "max_grad_norm", "lr", "wall_time_s")


class TrainingAborted(RuntimeError):
    """Raised when the loss or gradients become non-finite."""

    def __init__(self, message, step, checkpoint=None):
        super().__init__(message)
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    batch_size: int = 16
    max_steps: int = 3000
    lr_initial: float = 1e-3
    lr_final: float = 1e-4
    decay_start: int = 1000
    decay_steps: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 1e-6
    clip_norm: float = 5.0
    patience: int = 5
    warmup_frac: float = 0.0
    eval_batch_size: int = 64
    record_wall_time: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.max_steps < 0:
            raise ValueError("batch_size must be >= 1 and max_steps >= 0")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if not 0.0 <= self.warmup_frac <= 1.0:
            raise ValueError("warmup_frac must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


PAPER_TRAINING = dict(batch_size=64, max_steps=100_000, decay_start=40_000, decay_steps=18_000)

# named starting points for a run: section -> overrides of the dataclass defaults
PRESETS = {
    "desk": {"model": {"d_model": 32, "ff_dim": 64}, "training": {}},
    "paper": {"model": {}, "training": dict(PAPER_TRAINING)},
}


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params: dict) -> "OptimizerState":
        return cls({k: np.zeros(t.shape) for k, t in params.items()},
                   {k: np.zeros(t.shape) for k, t in params.items()}, 0)

    def to_arrays(self) -> dict:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: dict, step: int) -> "OptimizerState":
        m = {k[len("adam.m."):]: v for k, v in arrays.items() if k.startswith("adam.m.")}
        v = {k[len("adam.v."):]: a for k, a in arrays.items() if k.startswith("adam.v.")}
        return cls(m, v, step)


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-6,
              weight_decay: float = 1e-6) -> tuple:
    """One bias-corrected Adam update with decoupled weight decay.

    Returns ``(new_params, new_state)``; inputs are left untouched.
    """
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise dc.NonFiniteError(f"non-finite gradient for {k}")
    t = state.step + 1
    c1, c2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
    new_params, m_new, v_new = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads.get(k, 0.0))
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        data = p.data - lr * update - lr * weight_decay * p.data
        new_params[k] = Tensor(data, requires_grad=True, name=k)
        m_new[k], v_new[k] = m, v
    return new_params, OptimizerState(m_new, v_new, t)


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Constant, then exponential decay from lr_initial to lr_final, then constant."""
    if step < config.decay_start:
        return config.lr_initial
    if step >= config.decay_start + config.decay_steps:
        return config.lr_final
    frac = (step - config.decay_start) / config.decay_steps
    return config.lr_initial * (config.lr_final / config.lr_initial) ** frac


def clip_gradients(grads: dict, max_norm: float) -> tuple:
    """Global-norm clipping; returns (clipped grads, pre-clip norm)."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    # sorted so the sum does not depend on dict order (e.g. after a reload)
    norm = math.sqrt(sum(float(np.sum(np.square(grads[k]))) for k in sorted(grads)))
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


# ---------------------------------------------------------------- logging

@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, **rec):
        self.records.append({k: rec.get(k) for k in LOG_HEADER})

    def split(self, name: str) -> list:
        return [r for r in self.records if r["split"] == name]

    def to_csv(self, split: str | None = None, wall_time: bool = True) -> str:
        buf = io.StringIO()
        header = LOG_HEADER if wall_time else LOG_HEADER[:-1]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in self.records:
            if split is None or r["split"] == split:
                w.writerow([_fmt(r[k]) for k in header])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainLog":
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != LOG_HEADER:
            raise ValueError(f"unexpected log header {reader.fieldnames}")
        out = cls()
        for row in reader:
            rec = {k: (float(v) if v != "" else None) if k != "split" else v
                   for k, v in row.items()}
            rec["step"] = int(rec["step"])
            out.records.append(rec)
        return out


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


# ---------------------------------------------------------------- batching

def epoch_batches(lengths, batch_size: int, seed: int, epoch: int) -> list:
    """Length-bucketed batches for one epoch, in a (seed, epoch)-determined order."""
    rng = np.random.default_rng([seed, epoch, 17])
    lengths = np.asarray(lengths)
    order = np.lexsort((rng.random(len(lengths)), lengths))
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def evaluate(samples, config: M.ModelConfig, params, seed: int = 0,
             batch_size: int = 64) -> dict:
    """Sample-weighted mean LossBreakdown values over ``samples`` (no dropout)."""
    order = np.argsort([s.length for s in samples], kind="stable")
    totals, count = {}, 0
    probs = []
    with dc.no_grad():
        for i in range(0, len(order), batch_size):
            chunk = [samples[j] for j in order[i:i + batch_size]]
            batch = M.collate(chunk)
            lb = M.forward_train(batch, config, params, np.random.default_rng([seed, 99, i]))
            for k, v in lb.values().items():
                totals[k] = totals.get(k, 0.0) + v * len(chunk)
            probs.append(lb.qpsi_true_prob)
            count += len(chunk)
    out = {k: v / count for k, v in totals.items()}
    out["qpsi_true_prob"] = float(np.mean(np.concatenate(probs)))
    return out


# ---------------------------------------------------------------- train

@dataclass
class TrainResult:
    params: dict
    best_params: dict
    log: TrainLog
    step: int
    best_val: float
    stopped_early: bool
    checkpoint_dir: Path | None = None


def _effective_config(config: M.ModelConfig, tcfg: TrainConfig, step: int) -> M.ModelConfig:
    if tcfg.warmup_frac <= 0:
        return config
    ramp = min(1.0, step / max(1.0, tcfg.warmup_frac * tcfg.max_steps))
    return replace(config, beta=config.beta * ramp, gamma=config.gamma * ramp)


def train(config: M.ModelConfig, tcfg: TrainConfig, dataset, seed: int = 0,
          out_dir=None, resume: bool = False, stop_after: int | None = None) -> TrainResult:
    """Train on ``dataset``'s train split, evaluating val after every epoch.

    With ``out_dir`` the latest state is written to ``out_dir/last`` after
    every evaluation and the best-by-val-L_total parameters to
    ``out_dir/best``.  ``stop_after`` halts (as if interrupted) after that
    many steps, for resume testing.
    """
    train_set, val_set = dataset.split("train"), dataset.split("val")
    if not train_set:
        raise ValueError("dataset has no train split")
    out_dir = Path(out_dir) if out_dir is not None else None
    lengths = [s.length for s in train_set]
    per_epoch = math.ceil(len(train_set) / tcfg.batch_size)

    params = M.init_params(config, seed)
    state = OptimizerState.zeros(params)
    tlog = TrainLog()
    best_val, best_params, bad_evals, step = math.inf, params, 0, 0
    if resume and out_dir is not None and (out_dir / "last" / M.MANIFEST).exists():
        params, _, step, extra, meta = M.load_checkpoint(out_dir / "last")
        state = OptimizerState.from_arrays(extra, step)
        tlog = TrainLog.from_csv(meta["log_csv"])
        best_val, bad_evals = meta["best_val"], meta["bad_evals"]
        best_params = M.load_checkpoint(out_dir / "best")[0] if (out_dir / "best").exists() \
            else params
        log.info("resumed at step %d", step)

    def save(tag, p, extra=None):
        if out_dir is None:
            return None
        meta = {"seed": seed, "train_config": asdict(tcfg), "best_val": best_val,
                "bad_evals": bad_evals, "log_csv": tlog.to_csv()}
        return M.save_checkpoint(out_dir / tag, p, config, step, extra, meta)

    if step == 0:
        save("last", params, state.to_arrays())
        if out_dir is not None and not (out_dir / "best").exists():
            save("best", params)

    t0 = time.perf_counter()
    clock = (lambda: time.perf_counter() - t0) if tcfg.record_wall_time else (lambda: 0.0)
    stopped_early = False
    batches, batches_epoch = None, -1
    while step < tcfg.max_steps:
        if stop_after is not None and step >= stop_after:
            save("last", params, state.to_arrays())
            break
        epoch, pos = divmod(step, per_epoch)
        if epoch != batches_epoch:
            batches, batches_epoch = epoch_batches(lengths, tcfg.batch_size, seed, epoch), epoch
        batch = M.collate([train_set[i] for i in batches[pos]])
        cfg_step = _effective_config(config, tcfg, step)
        lr = lr_schedule(step, tcfg)
        try:
            lb = M.forward_train(batch, cfg_step, params,
                                 noise_rng=np.random.default_rng([seed, step, 1]),
                                 rng=np.random.default_rng([seed, step, 2]))
            raw = dc.backward(lb.l_total, [params[k] for k in params])
            grads = {k: raw[params[k]].data for k in params}
            grads, norm = clip_gradients(grads, tcfg.clip_norm)
            params, state = adam_step(params, grads, state, lr, tcfg.beta1, tcfg.beta2,
                                      tcfg.eps, tcfg.weight_decay)
        except (dc.NonFiniteError, FloatingPointError) as exc:
            raise TrainingAborted(f"non-finite value at step {step}: {exc}", step,
                                  out_dir / "last" if out_dir else None) from exc
        v = lb.values()
        tlog.append(step=step, split="train", l_mel=v["l_mel"], l_kl=v["l_kl"],
                    l_mi=v["l_mi"], l_cond=v["l_cond"], l_total=v["l_total"],
                    max_grad_norm=norm, lr=lr, wall_time_s=clock())
        step += 1

        if pos == per_epoch - 1 or step == tcfg.max_steps:
            if val_set:
                ev = evaluate(val_set, config, params, seed, tcfg.eval_batch_size)
                tlog.append(step=step, split="val", l_mel=ev["l_mel"], l_kl=ev["l_kl"],
                            l_mi=ev["l_mi"], l_cond=ev["l_cond"], l_total=ev["l_total"],
                            max_grad_norm=None, lr=lr, wall_time_s=clock())
                if ev["l_total"] < best_val:
                    best_val, best_params, bad_evals = ev["l_total"], params, 0
                    save("best", params)
                else:
                    bad_evals += 1
                log.info("step %d val l_total %.4f (best %.4f)", step, ev["l_total"], best_val)
            save("last", params, state.to_arrays())
            if bad_evals >= tcfg.patience:
                stopped_early = True
                break
    return TrainResult(params, best_params, tlog, step, best_val, stopped_early, out_dir)


# ---------------------------------------------------------------- instrumentation

def branch_activation_grad_norms(seed: int = 0, d: int = 32, t: int = 12, batch: int = 4,
                                 num_heads: int = 4) -> dict:
    """Global gradient norm of a gated reordered block under three branch activations.

    The block, batch and regression target are fixed by ``seed``; only the
    nonlinearity applied to the attention and feed-forward outputs changes.
    """
    from . import blocks

    rng = np.random.default_rng(seed)
    params = blocks.init_block(rng, "b", d, 4 * d, "reordered")
    x = rng.normal(0.0, 1.0, (batch, t, d))
    target = rng.normal(0.0, 1.0, (batch, t, d))
    acts = {"relu": dc.relu, "tanh": dc.tanh,
            "leakyrelu": lambda a: dc.leaky_relu(a, blocks.LEAKY_SLOPE)}
    out = {}
    for name, act in acts.items():
        y = blocks.reordered_block(x, params, "b", num_heads, activation=act)
        loss = dc.square(y - target).mean()
        grads = dc.backward(loss, list(params.values()))
        out[name] = math.sqrt(sum(float(np.sum(g.data ** 2)) for g in grads.values()))
    return out
