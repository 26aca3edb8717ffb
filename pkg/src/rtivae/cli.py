"""Command-line interface.

    rtivae gen-data  --out data.jsonl.gz --preset clean --n-per-class 2000 --seed 0
    rtivae train     --data data.jsonl.gz --out runs/rti --variant reordered --gamma 1
    rtivae eval      --ckpt runs/rti/checkpoints/best --data data.jsonl.gz --out runs/rti/eval
    rtivae traverse  --ckpt runs/rti/checkpoints/best --dim 0 --steps 5 --tokens "3 1 4 1 5"
    rtivae gradcheck --seed 0

Exit codes: 0 success, 1 check failure, 2 argument or config error,
3 I/O error, 4 numerical abort.  Outputs go under ``--out``; when it is
omitted, under ``$RTIVAE_OUT`` (default ``./runs``).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import metrics as mt
from . import model as M
from . import synthgen as sg
from . import training as T

EXIT_OK, EXIT_CHECK, EXIT_ARGS, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4
OUT_ENV = "RTIVAE_OUT"
SECTIONS = ("preset", "model", "training", "data")
TRAVERSAL_HEADER = ("step", "latent_value", "decoded_length", "measured_pause", "estimated_f0")
LATENT_HEADER_PREFIX = ("id", "split", "y_o")
LOSS_HEADER = ("metric", "value")

log = logging.getLogger("rtivae")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- run config

def load_run_config(path=None, preset: str | None = None) -> dict:
    """Resolve defaults <- preset <- config file into {"model", "training", "data"} dicts.

    Unknown sections or keys raise ConfigError before any compute happens.
    """
    doc = {}
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not a valid config document: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    name = preset or doc.get("preset", "desk")
    if name not in T.PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(T.PRESETS)}")
    resolved = {"preset": name}
    for section in ("model", "training", "data"):
        values = dict(T.PRESETS[name].get(section, {}))
        given = doc.get(section) or {}
        if not isinstance(given, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        values.update(given)
        resolved[section] = values
    build_configs(resolved)  # validate now
    return resolved


def build_configs(resolved: dict) -> tuple:
    try:
        model_cfg = M.ModelConfig.from_dict(resolved["model"])
        train_cfg = T.TrainConfig.from_dict(resolved["training"])
        data_fields = set(sg.DatasetConfig.__dataclass_fields__)
        unknown = set(resolved["data"]) - data_fields
        if unknown:
            raise ValueError(f"unknown data config keys: {sorted(unknown)}")
        data_cfg = sg.DatasetConfig(**resolved["data"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return model_cfg, train_cfg, data_cfg


def _out_dir(arg, default_name: str) -> Path:
    if arg is not None:
        return Path(arg)
    return Path(os.environ.get(OUT_ENV, "runs")) / default_name


def _num(v) -> str:
    return repr(float(v))


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    resolved = load_run_config(args.config)
    data = dict(resolved["data"])
    for key, flag in (("preset", args.preset), ("n_per_class", args.n_per_class),
                      ("seed", args.seed), ("noise_level", args.noise_level)):
        if flag is not None:
            data[key] = flag
    try:
        cfg = sg.DatasetConfig(**data)
        dataset = sg.generate_dataset(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out) if args.out else _out_dir(None, "data") / "dataset.jsonl.gz"
    sg.write_dataset(dataset, out)
    print(json.dumps({"path": str(out), "header": dataset.header,
                      "summary": sg.summarize(dataset)}, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    resolved = load_run_config(args.config, args.preset)
    overrides = {"variant": args.variant, "gamma": args.gamma, "beta": args.beta,
                 "mi_mode": args.mi_mode}
    resolved["model"].update({k: v for k, v in overrides.items() if v is not None})
    for key, flag in (("max_steps", args.max_steps), ("warmup_frac", args.warmup_frac)):
        if flag is not None:
            resolved["training"][key] = flag
    model_cfg, train_cfg, _ = build_configs(resolved)
    dataset = sg.read_dataset(args.data)
    out = _out_dir(args.out, "train")
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"version": __version__, "command": "train", "seed": args.seed,
                "data": str(args.data), "data_header": dataset.header,
                "resolved_config": {"preset": resolved["preset"], "model": model_cfg.to_dict(),
                                    "training": asdict(train_cfg)},
                "loss_weights": {"l_kl": model_cfg.beta, "l_mi": model_cfg.gamma},
                "status": "running"}
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    status, code = "completed", EXIT_OK
    try:
        result = T.train(model_cfg, train_cfg, dataset, seed=args.seed,
                         out_dir=out / "checkpoints", resume=args.resume)
        tlog = result.log
        manifest.update(steps=result.step, best_val_l_total=result.best_val,
                        stopped_early=result.stopped_early)
    except T.TrainingAborted as exc:
        print(f"training aborted: {exc}; last good checkpoint in {exc.checkpoint}",
              file=sys.stderr)
        status, code = "aborted", EXIT_NUMERIC
        last = out / "checkpoints" / "last"
        tlog = T.TrainLog.from_csv(M.load_checkpoint(last)[4]["log_csv"]) \
            if (last / M.MANIFEST).exists() else T.TrainLog()
    (out / "train_log.csv").write_text(tlog.to_csv("train"))
    (out / "val_log.csv").write_text(tlog.to_csv("val"))
    manifest["status"] = status
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    print(json.dumps({k: manifest.get(k) for k in ("status", "steps", "best_val_l_total")}))
    return code


def _load_ckpt(path):
    try:
        return M.load_checkpoint(path)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: incompatible checkpoint: {exc}") from exc


def evaluate_checkpoint(params, config: M.ModelConfig, samples, seed: int = 0) -> dict:
    """Latents, per-latent cluster reports and test loss means for ``samples``."""
    if samples and samples[0].frames.shape[1] != config.n_channels:
        raise ConfigError(f"data has {samples[0].frames.shape[1]} channels, "
                          f"checkpoint expects {config.n_channels}")
    enc = M.encode_samples(samples, config, params)
    y = enc["y_o"]
    reports = {}
    for name in ("z_o", "z_l"):
        reports[name] = mt.ClusterReport.from_points(mt.LabeledPoints(enc[name], y), seed=seed,
                                                     strict=False)
        if np.isnan(reports[name].probe_accuracy):
            print(f"warning: too few samples per class for the {name} probe; reported as nan",
                  file=sys.stderr)
    reports["z_l"].extra["qpsi_true_mean"] = float(np.mean(enc["qpsi"][np.arange(len(y)), y]))
    for c in np.unique(y):
        reports["z_l"].extra[f"qpsi_true_mean_class{c}"] = float(enc["qpsi"][y == c, c].mean())
    losses = T.evaluate(samples, config, params, seed)
    return {"latents": enc, "reports": reports, "losses": losses}


def cmd_eval(args) -> int:
    params, config, step, _, _ = _load_ckpt(args.ckpt)
    dataset = sg.read_dataset(args.data)
    samples = dataset.split(args.split)
    if not samples:
        raise ConfigError(f"dataset has no {args.split!r} split")
    res = evaluate_checkpoint(params, config, samples, args.seed)
    out = _out_dir(args.out, "eval")
    out.mkdir(parents=True, exist_ok=True)
    rows = res["reports"]["z_o"].rows("z_o.") + res["reports"]["z_l"].rows("z_l.")
    (out / "cluster_report.csv").write_text(mt.rows_to_csv(rows))
    _write_csv(out / "losses.csv", LOSS_HEADER, sorted(res["losses"].items()))
    enc = res["latents"]
    header = LATENT_HEADER_PREFIX + tuple(f"z_o_{i}" for i in range(config.z_o_dim)) \
        + tuple(f"z_l_{i}" for i in range(config.z_l_dim)) \
        + tuple(f"qpsi_{i}" for i in range(config.n_classes))
    _write_csv(out / "latents.csv", header,
               [[s.id, s.split, int(enc["y_o"][i]), *map(_num, enc["z_o"][i]),
                 *map(_num, enc["z_l"][i]), *map(_num, enc["qpsi"][i])]
                for i, s in enumerate(samples)])
    for m, p, v in rows:
        print(f"{m:32s} {p:6s} {v:.6g}")
    return EXIT_OK


def read_latents_csv(path) -> dict:
    """Inverse of the eval command's latents.csv."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    cols = lambda prefix: np.array([[float(r[k]) for k in r if k.startswith(prefix)]  # noqa: E731
                                    for r in rows])
    return {"y_o": np.array([int(r["y_o"]) for r in rows]), "z_o": cols("z_o_"),
            "z_l": cols("z_l_"), "qpsi": cols("qpsi_")}


def traversal_table(params, config: M.ModelConfig, dim: int, steps: int, tokens) -> tuple:
    """(values, decoded sequences, rows of TRAVERSAL_HEADER)."""
    values, decoded = M.traverse_latent(params, config, dim, steps, tokens)
    rows = []
    for i, (v, frames) in enumerate(zip(values, decoded)):
        pause = mt.measure_pause(frames) if len(frames) else 0
        # decoded frames are band energies without phase; no carrier to pitch-track
        rows.append((i, float(v), len(frames), pause, None))
    return values, decoded, rows


def cmd_traverse(args) -> int:
    params, config, _, _, _ = _load_ckpt(args.ckpt)
    try:
        tokens = [int(t) for t in args.tokens.replace(",", " ").split()]
    except ValueError as exc:
        raise ConfigError(f"--tokens must be integers: {exc}") from exc
    if not tokens or min(tokens) < 0 or max(tokens) >= config.vocab_size:
        raise ConfigError(f"--tokens must be non-empty ids in [0, {config.vocab_size})")
    if not 0 <= args.dim < config.z_l_dim:
        raise ConfigError(f"--dim must be in [0, {config.z_l_dim})")
    if args.steps < 1:
        raise ConfigError("--steps must be >= 1")
    _, decoded, rows = traversal_table(params, config, args.dim, args.steps, tokens)
    out = _out_dir(args.out, "traverse")
    out.mkdir(parents=True, exist_ok=True)
    for i, frames in enumerate(decoded):
        _write_csv(out / f"decoded_{i:03d}.csv", [f"ch{c}" for c in range(config.n_channels)],
                   [list(map(_num, row)) for row in frames])
    _write_csv(out / "traversal.csv", TRAVERSAL_HEADER,
               [[s, _num(v), n, p, "" if f is None else _num(f)] for s, v, n, p, f in rows])
    for r in rows:
        print(*r[:4])
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradchecks

    results = gradchecks.run_suite(args.seed, sabotage=args.sabotage)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:28s} max_rel_err={r.max_relative_error:.3e}"
              f" checked={r.checked}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed")
    return EXIT_CHECK if failed else EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="rtivae", description=__doc__.split("\n")[0],
                                     formatter_class=fmt)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset file", formatter_class=fmt)
    g.add_argument("--out", help=f"dataset path (.jsonl or .jsonl.gz); default ${OUT_ENV}/data/")
    g.add_argument("--preset", choices=sorted(sg.PRESETS), default=None,
                   help="noise preset (config value or 'clean' when omitted)")
    g.add_argument("--n-per-class", type=int, default=None, help="samples per class (2000)")
    g.add_argument("--seed", type=int, default=None, help="generator seed (0)")
    g.add_argument("--noise-level", type=float, default=None, help="override preset noise")
    g.add_argument("--config", help="YAML run config; its 'data' section is used")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model", formatter_class=fmt)
    t.add_argument("--data", required=True, help="dataset file from gen-data")
    t.add_argument("--config", help="YAML run config (sections: preset, model, training, data)")
    t.add_argument("--preset", choices=sorted(T.PRESETS), default=None,
                   help="hyperparameter preset (config value or 'desk' when omitted)")
    t.add_argument("--variant", choices=M.VARIANTS, default=None, help="encoder variant")
    t.add_argument("--gamma", type=float, default=None, help="weight of L_MI (1.0)")
    t.add_argument("--beta", type=float, default=None, help="weight of L_KL (1.0)")
    t.add_argument("--mi-mode", choices=M.MI_MODES, default=None,
                   help="gradient routing of the L_MI term")
    t.add_argument("--max-steps", type=int, default=None, help="optimizer steps (3000)")
    t.add_argument("--warmup-frac", type=float, default=None,
                   help="linear beta/gamma warm-up fraction of max steps (0)")
    t.add_argument("--seed", type=int, default=0, help="initialisation and data-order seed")
    t.add_argument("--resume", action="store_true", help="continue from <out>/checkpoints/last")
    t.add_argument("--out", help=f"run directory; default ${OUT_ENV}/train")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="cluster metrics and losses on a split", formatter_class=fmt)
    e.add_argument("--ckpt", required=True, help="checkpoint directory")
    e.add_argument("--data", required=True, help="dataset file")
    e.add_argument("--split", default="test", choices=sg.SPLITS, help="split to evaluate")
    e.add_argument("--seed", type=int, default=0, help="probe cross-validation seed")
    e.add_argument("--out", help=f"report directory; default ${OUT_ENV}/eval")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("traverse", help="decode along one z_l dimension", formatter_class=fmt)
    r.add_argument("--ckpt", required=True, help="checkpoint directory")
    r.add_argument("--dim", type=int, required=True, help="z_l dimension to sweep")
    r.add_argument("--steps", type=int, default=5, help="points from mean-3sd to mean+3sd")
    r.add_argument("--tokens", required=True, help="token ids, space or comma separated")
    r.add_argument("--out", help=f"output directory; default ${OUT_ENV}/traverse")
    r.set_defaults(func=cmd_traverse)

    c = sub.add_parser("gradcheck", help="finite-difference check of every op",
                       formatter_class=fmt)
    c.add_argument("--seed", type=int, default=0, help="seed for check points")
    c.add_argument("--sabotage", action="store_true",
                   help="swap in a wrong derivative to confirm the check can fail")
    c.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
