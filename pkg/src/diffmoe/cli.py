"""Command-line entry point: ``diffmoe {train,sample,analyze,sweep}``.

Config files are flat ``key=value`` text (``#`` starts a comment); keys are
flag names with ``-`` or ``_``.  Flags given on the command line override
file values.  Outputs go under ``--out``, or ``$DIFFMOE_OUT/<subcommand>``
when no directory is given.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .analysis import DEFAULT_GRID, build_report, run_sweep
from .containers import file_digest, load_checkpoint, read_samples, write_samples
from .data import default_splits
from .model import ModelConfig
from .predictor import ThresholdSet
from .sampling import SAMPLERS, EvalRecord, SampleRequest, generate, sampler_matches
from .trainer import TrainConfig, TrainingDiverged, ema_model, train

OUT_ENV = "DIFFMOE_OUT"
DEFAULT_OUT_ROOT = "out"

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def read_config(path: str | Path) -> dict[str, str]:
    values = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key.replace("-", "_")] = value
    return values


def _apply_config(parser: argparse.ArgumentParser, path: str) -> None:
    actions = {a.dest: a for a in parser._actions}
    defaults = {}
    for key, raw in read_config(path).items():
        action = actions.get(key)
        if action is None or key in ("config", "help"):
            raise UsageError(f"{path}: unknown key {key!r}")
        try:
            value = action.type(raw) if action.type else raw
        except ValueError as e:
            raise UsageError(f"{path}: bad value for {key}: {raw!r}") from e
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"{path}: {key}={raw} not in {list(action.choices)}")
        defaults[key] = value
    parser.set_defaults(**defaults)


def _out_dir(args, sub: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, DEFAULT_OUT_ROOT)) / sub


def _json_line(obj) -> str:
    return json.dumps(obj, sort_keys=True)


# ---------------------------------------------------------------------------
# Parsers
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=str, default=None, help="flat key=value config file")
    p.add_argument("--out", type=str, default=None, help=f"output directory (default ${OUT_ENV}/<subcommand>)")


def _add_sampling(p: argparse.ArgumentParser):
    p.add_argument("--ckpt", type=str, default=None, help="checkpoint file (required)")
    p.add_argument("--n", type=int, default=64, help="number of samples")
    p.add_argument("--steps", type=int, default=50, help="sampler steps")
    p.add_argument("--sampler", type=str, default="euler", choices=SAMPLERS, help="euler/heun for flow, ddpm for ddpm")
    p.add_argument("--seed", type=int, default=0, help="initial-noise seed")
    p.add_argument("--cfg-scale", type=float, default=1.0, help="guidance scale; 1 disables guidance")
    p.add_argument("--routing", type=str, default="threshold", choices=("threshold", "topk"),
                   help="global-pool inference rule")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="diffmoe", description=__doc__.split("\n\n")[0], formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    d_model, d_train = ModelConfig(), TrainConfig()
    p = sub.add_parser("train", help="train a toy model", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--routing", type=str, default=d_model.routing, choices=("dense", "tc", "ec", "diffmoe"),
                   help="FFN routing in even blocks")
    p.add_argument("--objective", type=str, default=d_model.objective, choices=("flow", "ddpm"), help="training target")
    p.add_argument("--depth", type=int, default=d_model.depth, help="transformer blocks")
    p.add_argument("--hidden", type=int, default=d_model.hidden, help="token width")
    p.add_argument("--heads", type=int, default=d_model.heads, help="attention heads")
    p.add_argument("--experts", type=int, default=d_model.n_experts, help="experts per MoE layer")
    p.add_argument("--tc-top-k", type=int, default=d_model.tc_top_k, help="experts per token under tc routing")
    p.add_argument("--steps", type=int, default=d_train.steps, help="total optimisation steps")
    p.add_argument("--batch-size", type=int, default=d_train.batch_size, help="samples per step")
    p.add_argument("--lr", type=float, default=d_train.lr, help="AdamW learning rate")
    p.add_argument("--ema-decay", type=float, default=d_train.ema_decay, help="weight EMA decay")
    p.add_argument("--seed", type=int, default=d_train.seed, help="init and data seed")
    p.add_argument("--log-every", type=int, default=d_train.log_every, help="progress print cadence")
    p.add_argument("--ckpt-every", type=int, default=d_train.ckpt_every, help="0 keeps only the final checkpoint")
    p.add_argument("--label-dropout", type=float, default=d_train.label_dropout, help="null-label probability")
    p.add_argument("--threshold-alpha", type=float, default=d_train.threshold_alpha, help="threshold EMA factor")
    p.add_argument("--dtype", type=str, default=d_train.dtype, choices=("float32", "float64"),
                   help="training precision")
    p.add_argument("--train-size", type=int, default=4096, help="toy training set size")
    p.add_argument("--resume", type=str, default=None, help="checkpoint to resume from")

    p = sub.add_parser("sample", help="generate samples and a manifest", formatter_class=fmt)
    _add_common(p)
    _add_sampling(p)
    p.add_argument("--gamma", type=float, default=None, help="static threshold for every expert (default: stored dynamic thresholds)")
    p.add_argument("--width", type=int, default=8, choices=(4, 8), help="bytes per stored float")

    p = sub.add_parser("analyze", help="capacity report from a sample manifest", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--ckpt", type=str, default=None, help="checkpoint file (required)")
    p.add_argument("--manifest", type=str, default=None, help="manifest.jsonl written by sample (required)")

    p = sub.add_parser("sweep", help="static threshold sweep", formatter_class=fmt)
    _add_common(p)
    _add_sampling(p)
    p.add_argument("--grid", type=str, default=",".join(f"{g:g}" for g in DEFAULT_GRID), help="comma-separated gammas")
    p.add_argument("--workers", type=int, default=1, help="parallel sweep threads")
    p.add_argument("--reference-size", type=int, default=1024, help="held-out samples for the quality proxy")
    return parser


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _require(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise UsageError(f"--{n.replace('_', '-')} is required")


def cmd_train(args) -> int:
    try:
        mc = ModelConfig(depth=args.depth, hidden=args.hidden, heads=args.heads, n_experts=args.experts,
                         routing=args.routing, objective=args.objective, tc_top_k=args.tc_top_k)
        tc = TrainConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr, ema_decay=args.ema_decay,
                         objective=args.objective, routing=args.routing, seed=args.seed, log_every=args.log_every,
                         ckpt_every=args.ckpt_every, label_dropout=args.label_dropout,
                         threshold_alpha=args.threshold_alpha, dtype=args.dtype)
        if args.train_size < 1:
            raise ValueError("train size must be positive")
    except ValueError as e:
        raise UsageError(str(e)) from e
    out = _out_dir(args, "train")
    dataset, _ = default_splits(args.train_size, 1)

    def progress(rec):
        print(_json_line({k: rec[k] for k in ("step", "loss", "cp_loss", "capacity")}), flush=True)

    try:
        state, _ = train(mc, dataset, tc, out, resume=args.resume, progress=progress)
    except TrainingDiverged as e:
        print(_json_line({"event": "diverged", **e.record}), file=sys.stderr)
        return EXIT_RUNTIME
    print(_json_line({"event": "done", "step": state.step, "checkpoint": str(out / "ckpt.bin")}))
    return EXIT_OK


def _load(args):
    path = Path(args.ckpt)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    ckpt = load_checkpoint(path)
    return path, ckpt, ema_model(ckpt)


def _thresholds(ckpt, model, gamma):
    cfg = model.config
    if cfg.routing != "diffmoe":
        return None
    if gamma is not None:
        return ThresholdSet.static(gamma, len(cfg.moe_blocks), cfg.n_experts)
    th = ckpt.thresholds
    L, N = th["shape"]
    return ThresholdSet.from_list(th["values"], L, N, th["mode"], th["alpha"])


def _request(args) -> SampleRequest:
    try:
        return SampleRequest(args.n, args.steps, args.sampler, args.seed, args.cfg_scale, args.routing)
    except ValueError as e:
        raise UsageError(str(e)) from e


def cmd_sample(args) -> int:
    _require(args, "ckpt")
    req = _request(args)
    if args.gamma is not None and not 0 <= args.gamma < 1:
        raise UsageError("--gamma must satisfy 0 <= gamma < 1")
    path, ckpt, model = _load(args)
    if not sampler_matches(model.config.objective, req.sampler):
        raise UsageError(f"sampler {req.sampler!r} does not fit a {model.config.objective!r} checkpoint")
    thresholds = _thresholds(ckpt, model, args.gamma)
    res = generate(model, req, thresholds)
    out = _out_dir(args, "sample")
    samples_path = out / "samples.bin"
    write_samples(samples_path, res.images, args.width)
    header = {
        "kind": "run", "checkpoint": str(path), "checkpoint_sha256": file_digest(path),
        "samples": samples_path.name, "samples_sha256": file_digest(samples_path),
        "sampler": req.sampler, "steps": req.steps, "seed": req.seed, "n": req.n,
        "cfg_scale": req.cfg_scale, "routing": req.inference_routing, "gamma": args.gamma,
        "capacity_avg": res.average_capacity,
    }
    with open(out / "manifest.jsonl", "w", encoding="utf-8") as f:
        f.write(_json_line(header) + "\n")
        for i, r in enumerate(res.trace):
            f.write(_json_line({"kind": "eval", "index": i, "t": r.t, "capacity": r.capacity,
                                "layer_expert": r.layer_expert.tolist()}) + "\n")
        for i, (y, c) in enumerate(zip(res.labels, res.sample_capacity)):
            f.write(_json_line({"kind": "sample", "index": i, "label": int(y), "capacity": float(c)}) + "\n")
    print(_json_line({"event": "done", "samples": str(samples_path), "capacity_avg": res.average_capacity}))
    return EXIT_OK


def read_manifest(path: str | Path):
    header, evals, samples = None, [], []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            kind = rec.get("kind")
            if kind == "run":
                header = rec
            elif kind == "eval":
                evals.append(rec)
            elif kind == "sample":
                samples.append(rec)
    if header is None:
        raise ValueError(f"{path}: manifest has no run header")
    return header, evals, samples


def cmd_analyze(args) -> int:
    _require(args, "ckpt", "manifest")
    path, ckpt, model = _load(args)
    header, evals, samples = read_manifest(args.manifest)
    if header["checkpoint_sha256"] != file_digest(path):
        raise ValueError(f"manifest {args.manifest} was produced by a different checkpoint than {path}")
    samples_file = Path(args.manifest).parent / header["samples"]
    if samples_file.exists():
        if file_digest(samples_file) != header["samples_sha256"]:
            raise ValueError(f"{samples_file} does not match its manifest")
        if read_samples(samples_file).shape[0] != header["n"]:
            raise ValueError("sample file and manifest disagree on the sample count")
    trace = [EvalRecord(e["t"], e["capacity"], np.array(e["layer_expert"], dtype=float), np.empty(0)) for e in evals]
    labels = np.array([s["label"] for s in samples])
    caps = np.array([s["capacity"] for s in samples])
    report = build_report(model, trace, labels, caps)
    out = _out_dir(args, "analyze")
    report.write(out, model.config.num_classes)
    print(_json_line({"event": "done", "out": str(out), "capacity_avg": report.average_capacity,
                      "activated_estimate": report.activated_estimate}))
    return EXIT_OK


def cmd_sweep(args) -> int:
    _require(args, "ckpt")
    req = _request(args)
    try:
        grid = [float(g) for g in args.grid.split(",") if g.strip()]
    except ValueError as e:
        raise UsageError(f"bad --grid: {e}") from e
    if not grid:
        raise UsageError("empty threshold grid")
    if any(not 0 <= g < 1 for g in grid):
        raise UsageError("every gamma must satisfy 0 <= gamma < 1")
    if args.workers < 1:
        raise UsageError("--workers must be positive")
    path, ckpt, model = _load(args)
    if model.config.routing != "diffmoe":
        raise UsageError("sweep needs a diffmoe checkpoint")
    if not sampler_matches(model.config.objective, req.sampler):
        raise UsageError(f"sampler {req.sampler!r} does not fit a {model.config.objective!r} checkpoint")
    _, heldout = default_splits(1, args.reference_size)
    result = run_sweep(model, heldout.images, req, grid, _thresholds(ckpt, model, None), args.workers)
    out = _out_dir(args, "sweep")
    result.write(out / "sweep.csv")
    dyn = result.dynamic
    print(_json_line({"event": "done", "best_gamma": result.best_gamma,
                      "dynamic_capacity": None if dyn is None else dyn.capacity,
                      "dynamic_quality": None if dyn is None else dyn.quality}))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "sample": cmd_sample, "analyze": cmd_analyze, "sweep": cmd_sweep}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        if args.config:
            sub = parser._subparsers._group_actions[0].choices[args.command]
            try:
                _apply_config(sub, args.config)
            except OSError as e:
                raise UsageError(f"cannot read config: {e}") from e
            args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except SystemExit as e:
        return int(e.code or 0)
    except UsageError as e:
        print(f"diffmoe: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # runtime failures map to one exit code
        print(f"diffmoe: error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
