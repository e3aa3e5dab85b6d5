"""``iccr`` command line: data generation, training, evaluation and analyses.

Every invocation creates ``<runs>/<timestamp>-<digest>/`` (``<runs>`` is
``$ICCR_RUNS_DIR`` or ``./runs``) holding ``dataset/``, ``checkpoints/``,
``metrics/`` and ``manifest.json``.

Config files are JSON objects with optional sections ``model``, ``data``,
``train``, ``sde`` and ``eval``; unknown sections or keys are rejected and
command-line flags override file values.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
import traceback
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import analysis, checks, datagen, models, sde, training
from .datagen import GenConfig
from .training import TrainConfig

MANIFEST_VERSION = 1


class ConfigKeyError(ValueError):
    pass


# ------------------------------------------------------------------ config

MODEL_DEFAULTS = {
    "arch": "transformer", "layers": 12, "heads": 8, "hidden": 256, "input_dim": 1,
    "max_context": 102, "variant": "full", "use_layer_norm": True,
    "paper_literal_attention": False, "head_dim_mode": "split", "seed": 0,
}
DATA_DEFAULTS = {
    "task": "counterfactual", "E": 1, "n_min": 2, "n_max": 50, "theta_dist": "uniform",
    "diversity": None, "kind": "linear_additive", "fixed_z": None, "z_mode": "per_record", "seed": 0,
}
SDE_DEFAULTS = {f.name: f.default for f in dataclasses.fields(sde.SDEConfig)}
SDE_DEFAULTS.update(event_range=list(SDE_DEFAULTS["event_range"]), bounds=list(SDE_DEFAULTS["bounds"]),
                    theta_support=list(SDE_DEFAULTS["theta_support"]))
TRAIN_DEFAULTS = {f.name: f.default for f in dataclasses.fields(TrainConfig)}
EVAL_DEFAULTS = {"lengths": "2..50", "seqs": 6400, "resamples": 1000}
SECTIONS = {"model": MODEL_DEFAULTS, "data": DATA_DEFAULTS, "train": TRAIN_DEFAULTS,
            "sde": SDE_DEFAULTS, "eval": EVAL_DEFAULTS}


def load_config(path=None, overrides: dict | None = None) -> tuple[dict, list[str]]:
    """Defaults, then the JSON file, then ``overrides`` (``{"section.key": value}``).

    Returns the resolved config and the list of keys where a flag replaced a
    value that the file had set explicitly.
    """
    cfg = {sec: dict(vals) for sec, vals in SECTIONS.items()}
    from_file: set[str] = set()
    if path is not None:
        text = Path(path).read_text()
        data = json.loads(text) if text.strip() else {}
        if not isinstance(data, dict):
            raise ConfigKeyError("config file must hold a JSON object")
        for sec, vals in data.items():
            if sec not in SECTIONS:
                raise ConfigKeyError(f"unknown config section {sec!r}")
            if not isinstance(vals, dict):
                raise ConfigKeyError(f"section {sec!r} must be an object")
            for k, v in vals.items():
                if k not in SECTIONS[sec]:
                    raise ConfigKeyError(f"unknown config key {sec}.{k!r}")
                cfg[sec][k] = v
                from_file.add(f"{sec}.{k}")
    conflicts = []
    for dotted, v in (overrides or {}).items():
        sec, k = dotted.split(".", 1)
        if k not in SECTIONS[sec]:
            raise ConfigKeyError(f"unknown config key {sec}.{k!r}")
        if dotted in from_file and cfg[sec][k] != v:
            conflicts.append(dotted)
        cfg[sec][k] = v
    return cfg, conflicts


def gen_config(cfg: dict) -> GenConfig:
    d = dict(cfg["data"])
    n_range = (d.pop("n_min"), d.pop("n_max"))
    return GenConfig(n_range=n_range, **d)


def sde_config(cfg: dict) -> sde.SDEConfig:
    return sde.SDEConfig(**cfg["sde"])


def model_config(cfg: dict):
    d = dict(cfg["model"])
    arch = d.pop("arch")
    if arch == "transformer":
        return models.TransformerConfig(**d)
    if arch in ("elman", "lstm", "gru"):
        return models.RNNConfig(kind=arch, layers=d["layers"], hidden=d["hidden"],
                                input_dim=d["input_dim"], seed=d["seed"])
    raise ConfigKeyError(f"unknown model.arch {arch!r}")


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**cfg["train"])


def parse_lengths(spec: str) -> list[int]:
    """``"2..50"``, ``"5,35"`` or mixtures like ``"2..5,35"``."""
    out = []
    for part in str(spec).split(","):
        part = part.strip()
        if ".." in part:
            a, b = part.split("..")
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise ValueError(f"empty length spec {spec!r}")
    return sorted(set(out))


# -------------------------------------------------------------- run dirs


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """A run directory plus the manifest that describes it."""

    def __init__(self, command: str, argv: list[str], root=None, run_dir=None):
        self.command = command
        self.argv = argv
        self.started = time.time()
        self.config: dict = {}
        self.overrides: list[str] = []
        self.seed = None
        self.inputs: list[str] = []
        root = Path(root or os.environ.get("ICCR_RUNS_DIR", "runs"))
        digest = hashlib.sha256(json.dumps([command] + argv).encode()).hexdigest()[:10]
        if run_dir is None:
            stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
            base = root / f"{stamp}-{digest}"
            run_dir, k = base, 1
            while run_dir.exists():
                run_dir = Path(f"{base}-{k}")
                k += 1
        self.dir = Path(run_dir)
        for sub in ("dataset", "checkpoints", "metrics"):
            (self.dir / sub).mkdir(parents=True, exist_ok=True)

    def path(self, sub: str, name: str) -> Path:
        return self.dir / sub / name

    def write_manifest(self, status: str, error: str | None = None) -> Path:
        artifacts = sorted(p for p in self.dir.rglob("*") if p.is_file() and p.name != "manifest.json")
        inputs = {str(p): sha256_file(p) for p in self.inputs if Path(p).is_file()}
        content = hashlib.sha256(json.dumps({"command": self.command, "config": self.config,
                                             "inputs": inputs}, sort_keys=True, default=str).encode())
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "status": status,
            "error": error,
            "config": self.config,
            "flag_overrides": self.overrides,
            "seed": self.seed,
            "artifacts": [{"path": str(p.relative_to(self.dir)), "sha256": sha256_file(p)} for p in artifacts],
            "inputs": inputs,
            "input_digest": content.hexdigest(),
            "format_versions": {"manifest": MANIFEST_VERSION, datagen.FORMAT: datagen.FORMAT_VERSION,
                                sde.FORMAT: datagen.FORMAT_VERSION, "checkpoint": training.CHECKPOINT_VERSION},
            "wall_clock_seconds": round(time.time() - self.started, 3),
        }
        path = self.dir / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
        return path


# --------------------------------------------------------------- commands


def _load_model(path):
    ck = training.load_checkpoint(path)
    return ck.params, ck.model_cfg


def cmd_gen_data(args, cfg, run: Run) -> None:
    g = gen_config(cfg)
    run.seed = g.seed
    datagen.write_dataset(g, args.count, run.path("dataset", "data.jsonl"))


def cmd_train(args, cfg, run: Run) -> None:
    mc, tc = model_config(cfg), train_config(cfg)
    g = sde_config(cfg) if cfg["data"]["task"] == "sde" else gen_config(cfg)
    run.seed = tc.seed
    resume = None
    if args.resume:
        run.inputs.append(args.resume)
        resume = training.load_checkpoint(args.resume)
    log = None
    if args.verbose:
        def log(step, loss):
            if step % 100 == 0:
                print(f"step {step} loss {loss:.4f}", file=sys.stderr)
    try:
        _, trace = training.train(mc, g, tc, resume=resume, checkpoint_dir=run.dir / "checkpoints", log=log)
    except training.TrainingDivergedError as exc:
        if exc.trace is not None:
            analysis.write_json(exc.trace.to_dict(), run.path("metrics", "trace_partial.json"))
        raise
    analysis.write_json(trace.to_dict(), run.path("metrics", "trace.json"))
    analysis.write_csv([{"step": s, "train_mse": l} for s, l in zip(trace.steps, trace.train_mse)],
                       run.path("metrics", "train_loss.csv"))
    if args.phase_threshold is not None:
        step = training.detect_phase_transition(trace, args.phase_threshold, args.phase_window)
        analysis.write_json({"threshold": args.phase_threshold, "window": args.phase_window, "step": step},
                            run.path("metrics", "phase_transition.json"))


_PREDICTORS = {"zero": analysis.zero_predictor, "oracle": analysis.oracle_predictor}


def cmd_eval(args, cfg, run: Run) -> None:
    g = gen_config(cfg)
    lengths = parse_lengths(cfg["eval"]["lengths"])
    seqs, resamples = cfg["eval"]["seqs"], cfg["eval"]["resamples"]
    run.seed = g.seed
    if args.predictor == "ols":
        curve = analysis.ols_baseline_curve(g, lengths, seqs, resamples=resamples)
    else:
        if args.checkpoint:
            run.inputs.append(args.checkpoint)
            model = _load_model(args.checkpoint)
        elif args.predictor in _PREDICTORS:
            model = _PREDICTORS[args.predictor]
        else:
            raise ValueError("eval needs --checkpoint or --predictor")
        curve = analysis.eval_curve(model, g, lengths, seqs, resamples=resamples)
    analysis.write_csv(curve.rows(), run.path("metrics", "eval_curve.csv"))
    analysis.write_json(curve, run.path("metrics", "eval_curve.json"))


def cmd_probe(args, cfg, run: Run) -> None:
    run.inputs.append(args.checkpoint)
    g = gen_config(cfg)
    run.seed = g.seed
    res = analysis.probe_layers(_load_model(args.checkpoint), g, args.target, args.train_n, args.eval_n,
                                stream=args.stream, permute=args.permute)
    analysis.write_json(res, run.path("metrics", "probe.json"))
    rows = [{"layer": l, "adj_r2": a, "diff_adj_r2": (res.diff_adj_r2[l - 1] if l else "")}
            for l, a in enumerate(res.adj_r2)]
    analysis.write_csv(rows, run.path("metrics", "probe.csv"))


def cmd_attn(args, cfg, run: Run) -> None:
    run.inputs.append(args.checkpoint)
    g = gen_config(cfg)
    run.seed = g.seed
    zs = [int(z) for z in args.z_values.split(",")]
    summ = analysis.detect_abduction_heads(_load_model(args.checkpoint), g, zs, args.batches, n=args.n,
                                           threshold=args.threshold)
    analysis.write_json(summ.to_dict(), run.path("metrics", "attn.json"))
    analysis.write_csv([{"layer": l, "head": h, "y_mass": m, "x_mass": float(summ.x_mass[l, h])}
                        for l, h, m in summ.ranked], run.path("metrics", "attn_heads.csv"))


def cmd_sde_sim(args, cfg, run: Run) -> None:
    c = sde_config(cfg)
    run.seed = c.seed
    sde.write_sde_dataset(c, args.count, run.path("dataset", "sde.jsonl"))
    res = [sde.eq5_residual(sde.sample_path_pair(c, i)) for i in range(min(args.count, 100))]
    analysis.write_json({"count": args.count, "max_shared_noise_residual": max(res) if res else None},
                        run.path("metrics", "sde_summary.json"))


def cmd_diversity(args, cfg, run: Run) -> None:
    mc, tc, g = model_config(cfg), train_config(cfg), gen_config(cfg)
    run.seed = tc.seed
    rows = analysis.diversity_sweep([int(p) for p in args.pools.split(",")], args.theta_dists.split(","),
                                    args.eval_dists.split(","), mc, tc, g, eval_n=args.eval_n,
                                    seqs=cfg["eval"]["seqs"], own_pool=args.own_pool)
    analysis.write_csv(rows, run.path("metrics", "diversity.csv"))
    analysis.write_json([dataclasses.asdict(r) for r in rows], run.path("metrics", "diversity.json"))


REPORT = {
    "fig2": "iccr train --arch {transformer,lstm,gru,elman} ... ; iccr eval --checkpoint CK --lengths 2..50",
    "fig3": "iccr train --variant {full,attention_only,mlp_only} / --layers L --heads H ... ; iccr eval",
    "fig4": "iccr diversity --pools 1,4,16,64,256 --theta-dists uniform,normal ; "
            "iccr train --fixed-z 14 --phase-threshold 0.6132",
    "fig5": "iccr probe --checkpoint CK --target theta [--stream mid] [--permute]",
    "fig7": "iccr attn --checkpoint CK --z-values 8,15,34,42 --batches 100",
    "fig8": "iccr sde-sim --count N ; iccr train --task sde --loss-mask completion_mask --batch 8 ; iccr eval",
}


def cmd_report(args, cfg, run: Run) -> None:
    analysis.write_json(REPORT, run.path("metrics", "report.json"))
    for fig, cmd in REPORT.items():
        print(f"{fig}: {cmd}")


def cmd_selftest(args, cfg, run: Run) -> None:
    grads = checks.gradient_suite()
    grads["transformer_L2_H2_D8"] = checks.transformer_grad_error()
    oracle = checks.oracle_suite()
    result = {"gradients": grads, "oracle": oracle, "grad_tol": checks.GRAD_TOL, "oracle_tol": checks.ORACLE_TOL}
    analysis.write_json(result, run.path("metrics", "selftest.json"))
    bad = [k for k, v in grads.items() if not v < checks.GRAD_TOL] + \
          [k for k, v in oracle.items() if not v < checks.ORACLE_TOL]
    for k, v in {**grads, **oracle}.items():
        print(f"{'FAIL' if k in bad else 'ok  '} {k}: {v:.3e}")
    if bad:
        raise RuntimeError(f"selftest failures: {', '.join(bad)}")


# ----------------------------------------------------------------- parser


def _add(p, flag, dest, **kw):
    p.add_argument(flag, dest=dest, default=None, **kw)


def _data_flags(p):
    _add(p, "--task", "data.task", choices=["counterfactual", "continuation", "sde"])
    _add(p, "--E", "data.E", type=int, help="token dimension")
    _add(p, "--n-min", "data.n_min", type=int)
    _add(p, "--n-max", "data.n_max", type=int)
    _add(p, "--theta-dist", "data.theta_dist", choices=["uniform", "normal"])
    _add(p, "--diversity", "data.diversity", type=int, help="finite latent pool size")
    _add(p, "--kind", "data.kind", help="noise model")
    _add(p, "--fixed-z", "data.fixed_z", type=int)
    _add(p, "--z-mode", "data.z_mode", choices=["per_record", "per_batch"])
    _add(p, "--seed", "data.seed", type=int)


def _model_flags(p):
    _add(p, "--arch", "model.arch", choices=["transformer", "lstm", "gru", "elman"])
    _add(p, "--layers", "model.layers", type=int)
    _add(p, "--heads", "model.heads", type=int)
    _add(p, "--hidden", "model.hidden", type=int)
    _add(p, "--max-context", "model.max_context", type=int)
    _add(p, "--variant", "model.variant", choices=list(models.VARIANTS))
    p.add_argument("--no-layer-norm", dest="model.use_layer_norm", action="store_const", const=False, default=None)
    p.add_argument("--paper-literal-attention", dest="model.paper_literal_attention", action="store_const",
                   const=True, default=None)
    _add(p, "--model-seed", "model.seed", type=int)


def _train_flags(p):
    _add(p, "--steps", "train.steps", type=int)
    _add(p, "--batch", "train.batch", type=int)
    _add(p, "--lr", "train.lr", type=float)
    _add(p, "--weight-decay", "train.weight_decay", type=float)
    _add(p, "--checkpoint-every", "train.checkpoint_every", type=int)
    _add(p, "--loss-mask", "train.loss_mask", choices=["final_token", "completion_mask"])
    _add(p, "--clip-norm", "train.clip_norm", type=float)
    _add(p, "--train-seed", "train.seed", type=int)


def _eval_flags(p):
    _add(p, "--lengths", "eval.lengths", help="e.g. 2..50 or 5,35")
    _add(p, "--seqs", "eval.seqs", type=int, help="sequences per length")
    _add(p, "--resamples", "eval.resamples", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iccr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--runs-dir", help="output root (default $ICCR_RUNS_DIR or ./runs)")
        p.add_argument("--run-dir", help="exact run directory to use")
        p.set_defaults(func=fn)
        return p

    p = command("gen-data", cmd_gen_data, "write a JSONL prompt dataset")
    _data_flags(p)
    p.add_argument("--count", type=int, required=True)

    p = command("train", cmd_train, "train a model on streamed batches")
    _data_flags(p), _model_flags(p), _train_flags(p)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--phase-threshold", type=float)
    p.add_argument("--phase-window", type=int, default=100)
    p.add_argument("--verbose", action="store_true")

    p = command("eval", cmd_eval, "in-context MSE curve over prompt lengths")
    _data_flags(p), _eval_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--predictor", choices=["model", "zero", "oracle", "ols"], default="model")

    p = command("probe", cmd_probe, "linear probes on the residual stream")
    _data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", choices=["theta", "beta"], default="theta")
    p.add_argument("--train-n", type=int, default=6400)
    p.add_argument("--eval-n", type=int, default=1280)
    p.add_argument("--stream", choices=["post", "mid"], default="post")
    p.add_argument("--permute", action="store_true")

    p = command("attn", cmd_attn, "rank heads by z-token attention to (x_z, y_z)")
    _data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--z-values", default="8,15,34,42")
    p.add_argument("--batches", type=int, default=10)
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--threshold", type=float, default=analysis.ABDUCTION_THRESHOLD)

    p = command("sde-sim", cmd_sde_sim, "simulate Lotka-Volterra prompt pairs")
    p.add_argument("--count", type=int, required=True)
    _add(p, "--n-events", "sde.n_events", type=int)
    _add(p, "--grid-steps", "sde.grid_steps", type=int)
    p.add_argument("--equidistant", dest="sde.equidistant", action="store_const", const=True, default=None)
    _add(p, "--cf-init", "sde.cf_init", choices=["uniform", "beta"])
    _add(p, "--seed", "sde.seed", type=int)

    p = command("diversity", cmd_diversity, "train per latent-pool size and tabulate MSE against Ess")
    _data_flags(p), _model_flags(p), _train_flags(p), _eval_flags(p)
    p.add_argument("--pools", default="1,4,16,64")
    p.add_argument("--theta-dists", default="uniform,normal")
    p.add_argument("--eval-dists", default="uniform,normal")
    p.add_argument("--eval-n", type=int, default=35)
    p.add_argument("--own-pool", action="store_true")

    command("report", cmd_report, "print the figure-to-command map")
    command("selftest", cmd_selftest, "gradient and oracle checks")
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)  # usage errors exit with status 2
    overrides = {k: v for k, v in vars(args).items() if "." in k and v is not None}
    run = Run(args.command, argv, args.runs_dir, args.run_dir)
    status, error = "ok", None
    try:
        cfg, conflicts = load_config(args.config, overrides)
        if args.config:
            run.inputs.append(args.config)
        run.config, run.overrides = cfg, conflicts
        args.func(args, cfg, run)
    except Exception as exc:  # reported, manifest still written
        status, error = "failed", f"{type(exc).__name__}: {exc}"
        print(f"iccr {args.command}: error: {error}", file=sys.stderr)
        if os.environ.get("ICCR_DEBUG"):
            traceback.print_exc()
    finally:
        run.write_manifest(status, error)
    print(run.dir)
    return 0 if status == "ok" else 1


if __name__ == "__main__":
    raise SystemExit(main())
