"""Command-line entry point: ``cpmoe <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical abort or
failed numerical check, 3 I/O error (missing or unreadable artifacts).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import oracles
from .checkpoint import CheckpointError, load_checkpoint, manifest_ref, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config, write_resolved
from .metrics import AccuracyMatrix, summarize
from .moe import BACKBONE_SIZES, PRESETS, AdapterArch, count_trainable_params
from .taskgen import TaskStream, make_stream
from .trainer import ContinualState, NumericalAbort, probe_task, run_stream

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
SWITCHES = ("cp_bias", "te_reg", "cka_weighting")

log = logging.getLogger("cpmoe")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty seed list")
    return vals


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n"


def _fmt(v: float) -> str:
    return repr(float(v))


# ---------------------------------------------------------------- run

def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed:
        cfg.run.seeds = [s for group in args.seed for s in group]
        cfg.run.validate()
    if args.out:
        cfg.run.out = args.out
    if args.ablate:
        for name in (p.strip() for p in args.ablate.split(",") if p.strip()):
            if name not in SWITCHES:
                raise UsageError(f"unknown ablation switch {name!r}; choose from {', '.join(SWITCHES)}")
            setattr(cfg.ablation, name, False)
    return cfg


def stream_for(cfg: ExperimentConfig, seed: int) -> TaskStream:
    s = cfg.stream
    return make_stream(d=cfg.model.d_in, n_classes=cfg.model.n_classes, m_seen=s.m_seen,
                       m_unseen=s.m_unseen, sigma=s.sigma, seed=seed, n_train=s.n_train,
                       n_test=s.n_test)


def run_dir_for(out: str | Path, cfg: ExperimentConfig, seed: int) -> Path:
    return Path(out) / cfg.ablation.label / f"seed_{seed}"


def steps_log(state: ContinualState) -> str:
    lines = ["task\tepoch\tstep\ttotal\ttask_loss\treg\taux\tlr\tusage"]
    for s in state.steps:
        lines.append("\t".join([str(s.task), str(s.epoch), str(s.step), _fmt(s.total), _fmt(s.task_loss),
                                _fmt(s.reg), _fmt(s.aux), _fmt(s.lr), ",".join(map(str, s.usage))]))
    return "\n".join(lines) + "\n"


def expert_load_csv(state: ContinualState) -> str:
    n = state.model.layer.n_experts
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task"] + [f"expert_{i}" for i in range(n)])
    total = np.zeros(n, dtype=np.int64)
    for tl in state.task_logs:
        w.writerow([tl.task] + list(tl.usage))
        total += np.asarray(tl.usage, dtype=np.int64)
    w.writerow(["all"] + total.tolist())
    return buf.getvalue()


def summary_dict(state: ContinualState) -> dict:
    out = {
        "variant": state.ablation.label,
        "seed": state.seed,
        "ablation": {k: getattr(state.ablation, k) for k in SWITCHES},
        "n_seen": state.matrix.n_seen,
        "n_unseen": state.matrix.n_unseen,
    }
    out.update(summarize(state.matrix))
    return out


def write_outputs(state: ContinualState, run_dir: Path) -> None:
    (run_dir / "matrix.csv").write_text(state.matrix.to_csv())
    (run_dir / "matrix.json").write_text(_dump_json(state.matrix.to_json()))
    (run_dir / "steps.log").write_text(steps_log(state))
    (run_dir / "expert_load.csv").write_text(expert_load_csv(state))
    if state.cursor == state.matrix.n_seen:
        (run_dir / "summary.json").write_text(_dump_json(summary_dict(state)))


def run_seed(cfg: ExperimentConfig, seed: int, run_dir: Path, state: ContinualState | None = None,
             expected_ref: dict | None = None, stop_after: int | None = None) -> ContinualState:
    """Train (or continue) one seed, checkpointing after every task."""
    stream = stream_for(cfg, seed)
    manifest = stream.manifest()
    ref = manifest_ref(manifest)
    if expected_ref is not None and expected_ref != ref:
        raise CheckpointError("checkpoint does not belong to the regenerated task stream")
    if state is None:
        state = ContinualState.fresh(cfg.model_for_seed(seed), cfg.train, cfg.ablation,
                                     len(stream.seen), len(stream.unseen))
    run_dir.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, run_dir)
    (run_dir / "manifest.json").write_text(_dump_json(manifest))
    ckpt = run_dir / "checkpoint.v1"
    save_checkpoint(ckpt, state, cfg, ref)

    def done(st: ContinualState) -> None:
        save_checkpoint(ckpt, st, cfg, ref)

    run_stream(state, stream, on_task_done=done, stop_after=stop_after)
    write_outputs(state, run_dir)
    return state


def cmd_run(args) -> int:
    if args.resume:
        if args.config or args.seed or args.ablate:
            raise UsageError("--resume takes its configuration from the checkpoint; "
                             "--config, --seed and --ablate are not allowed with it")
        state, cfg, ref = load_checkpoint(args.resume)
        run_dir = run_dir_for(args.out, cfg, state.seed) if args.out else Path(args.resume).parent
        if args.out:
            cfg.run.out = args.out
        state = run_seed(cfg, state.seed, run_dir, state, ref, args.stop_after)
        _print_summary(state, run_dir)
        return EXIT_OK
    cfg = resolve_config(args)
    write_resolved(cfg, cfg.run.out)
    for seed in cfg.run.seeds:
        run_dir = run_dir_for(cfg.run.out, cfg, seed)
        state = run_seed(cfg, seed, run_dir, stop_after=args.stop_after)
        _print_summary(state, run_dir)
    return EXIT_OK


def _print_summary(state: ContinualState, run_dir: Path) -> None:
    if state.cursor < state.matrix.n_seen:
        print(f"{run_dir}: stopped after {state.cursor}/{state.matrix.n_seen} tasks (checkpoint saved)")
        return
    s = summarize(state.matrix)
    parts = " ".join(f"{k}={100 * s[k]:.2f}" for k in ("AP", "AF", "ZST") if k in s)
    print(f"{run_dir}: {parts}")


# ---------------------------------------------------------------- report

def _collect(run_dir: Path) -> list[dict]:
    found = sorted(run_dir.rglob("summary.json"))
    if not found:
        raise FileNotFoundError(f"no run artifacts (summary.json) under {run_dir}")
    rows = []
    for path in found:
        meta = json.loads(path.read_text())
        mpath = path.with_name("matrix.json")
        if not mpath.exists():
            raise FileNotFoundError(f"{mpath} is missing")
        metrics = summarize(AccuracyMatrix.from_json(json.loads(mpath.read_text())))
        rows.append({"variant": meta["variant"], "seed": meta["seed"], "ablation": meta["ablation"],
                     **metrics})
    return rows


def _mean_std(vals: list[float]) -> tuple[float, float]:
    arr = np.asarray(vals, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0


def render_report(rows: list[dict]) -> str:
    """Markdown tables in accuracy points (x100): per-seed rows, mean ± sample std, ablation summary."""
    metrics = [m for m in ("AP", "AF", "AF_max", "ZST") if all(m in r for r in rows)]
    by_variant: dict[str, list[dict]] = {}
    for r in rows:
        by_variant.setdefault(r["variant"], []).append(r)

    def order(v):
        ab = by_variant[v][0]["ablation"]
        return tuple(ab[k] for k in SWITCHES), v

    variants = sorted(by_variant, key=order)
    out = ["# Continual-learning report", ""]
    for v in variants:
        group = sorted(by_variant[v], key=lambda r: r["seed"])
        ab = group[0]["ablation"]
        flags = ", ".join(f"{k}={'on' if ab[k] else 'off'}" for k in SWITCHES)
        out += [f"## {v} ({flags})", "",
                "| seed | " + " | ".join(metrics) + " |",
                "|---:|" + "---:|" * len(metrics)]
        for r in group:
            out.append(f"| {r['seed']} | " + " | ".join(f"{100 * r[m]:.2f}" for m in metrics) + " |")
        cells = []
        for m in metrics:
            mu, sd = _mean_std([r[m] for r in group])
            cells.append(f"{100 * mu:.2f} ± {100 * sd:.2f}")
        out += ["| mean ± std | " + " | ".join(cells) + " |", ""]
    if len(variants) > 1:
        out += ["## Ablation comparison", "",
                "| variant | CP bias | TE reg | CKA mask | seeds | " + " | ".join(metrics) + " |",
                "|---|:---:|:---:|:---:|---:|" + "---:|" * len(metrics)]
        for v in variants:
            group = by_variant[v]
            ab = group[0]["ablation"]
            marks = " | ".join("✓" if ab[k] else "" for k in SWITCHES)
            vals = " | ".join(f"{100 * _mean_std([r[m] for r in group])[0]:.2f}" for m in metrics)
            out.append(f"| {v} | {marks} | {len(group)} | {vals} |")
        out.append("")
    return "\n".join(out)


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    text = render_report(_collect(run_dir))
    sys.stdout.write(text)
    if not args.no_write:
        (run_dir / "report.md").write_text(text)
    return EXIT_OK


# ---------------------------------------------------------------- probe

def _array_stats(name: str, arr: np.ndarray) -> list[str]:
    return [f"[{name}]",
            f"shape = {'x'.join(map(str, arr.shape))}",
            f"min = {_fmt(arr.min())}",
            f"mean = {_fmt(arr.mean())}",
            f"max = {_fmt(arr.max())}",
            f"sum = {_fmt(arr.sum())}",
            f"nonzero_fraction = {_fmt(np.count_nonzero(arr) / arr.size)}",
            ""]


def cmd_probe(args) -> int:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    seed = args.seed if args.seed is not None else cfg.run.seeds[0]
    stream = stream_for(cfg, seed)
    if not 0 <= args.task < len(stream.seen):
        raise UsageError(f"--task must lie in [0, {len(stream.seen) - 1}]")
    state = ContinualState.fresh(cfg.model_for_seed(seed), cfg.train, cfg.ablation,
                                 len(stream.seen), len(stream.unseen))
    run_stream(state, stream, stop_after=args.task)
    traj, omega, h = probe_task(state, stream.dataset(stream.seen[args.task].task_id), args.task)
    lines = ["[probe]", f"seed = {seed}", f"task = {args.task}", f"tasks_trained_before = {state.cursor}",
             f"warmup_steps = {traj.steps_taken}", f"warmup_lr = {_fmt(traj.eta)}",
             f"warmup_loss_first = {_fmt(traj.losses[0])}", f"warmup_loss_last = {_fmt(traj.losses[-1])}",
             "", "[h]"]
    lines += [f"expert_{i} = {_fmt(v)}" for i, v in enumerate(h)]
    lines.append("")
    lines += _array_stats("omega_A", omega.omega_A)
    lines += _array_stats("omega_B", omega.omega_B)
    lines.append("[omega_total]")
    for i in range(state.model.layer.n_experts):
        tot = float(state.cons.omega_A[i].sum() + state.cons.omega_B[i].sum())
        lines.append(f"expert_{i}_sum = {_fmt(tot)}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.dump:
        Path(args.dump).write_text(_dump_json({
            "seed": seed, "task": args.task, "h": [float(v) for v in h],
            "omega_A": {"shape": list(omega.omega_A.shape), "data": omega.omega_A.ravel().tolist()},
            "omega_B": {"shape": list(omega.omega_B.shape), "data": omega.omega_B.ravel().tolist()},
        }))
    return EXIT_OK


# ---------------------------------------------------------------- numerical checks

def cmd_verify_theorem1(args) -> int:
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for k in range(args.trials):
        d = int(rng.integers(1, args.max_dim + 1))
        S = int(rng.integers(1, args.max_steps + 1))
        p = oracles.QuadraticProblem.random(rng, d, S)
        err = oracles.relative_error(oracles.closed_form_displacement(p), oracles.simulate_gd(p))
        worst = max(worst, err)
        print(f"problem {k:3d}  d={d:2d}  S={S:3d}  rel_err={err:.3e}")
    g = rng.standard_normal(8)
    zero = oracles.QuadraticProblem(np.zeros((8, 8)), g, 0.1, 37)
    zero_ok = bool(np.array_equal(oracles.closed_form_displacement(zero), -(0.1 * 37) * g))
    print(f"H = 0: closed form equals -eta*S*g exactly: {zero_ok}")
    Q, _ = np.linalg.qr(rng.standard_normal((16, 16)))
    H = (Q * np.linspace(1.0, 10.0, 16)) @ Q.T
    H = 0.5 * (H + H.T)
    lim = oracles.QuadraticProblem(H, rng.standard_normal(16), 1.0 / (2.0 * oracles.spectral_norm(H)), 10_000)
    lim_err = oracles.relative_error(oracles.closed_form_displacement(lim), -np.linalg.solve(H, lim.g))
    print(f"S = 10000: relative error to -H^-1 g = {lim_err:.3e}")
    ok = worst <= args.tol and zero_ok and lim_err <= 1e-6
    print(f"{'PASS' if ok else 'FAIL'}: max rel_err {worst:.3e} (tol {args.tol:g}) over {args.trials} problems")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_gradcheck(args) -> int:
    errs, used = oracles.tiny_objective_gradcheck(args.seed, step=args.step)
    for g, e in errs.items():
        print(f"{g:7s} max_rel_err={e:.3e}")
    ok = max(errs.values()) < args.tol
    print(f"{'PASS' if ok else 'FAIL'}: seed {used}, tol {args.tol:g}")
    return EXIT_OK if ok else EXIT_NUMERIC


def _module(text: str) -> tuple[int, int]:
    try:
        a, b = (int(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected IN:OUT, got {text!r}") from None
    if a < 1 or b < 1:
        raise argparse.ArgumentTypeError("module dimensions must be positive")
    return a, b


def cmd_count_params(args) -> int:
    if args.preset:
        if args.module or args.layers or args.rank or args.experts:
            raise UsageError("--preset cannot be combined with explicit architecture flags")
        arch = PRESETS[args.preset]
        backbone = args.backbone_size or BACKBONE_SIZES.get(args.preset)
    else:
        if not (args.module and args.layers and args.rank and args.experts):
            raise UsageError("give --preset, or all of --layers, --module, --rank and --experts")
        arch = AdapterArch(args.layers, tuple(args.module), args.rank, args.experts)
        backbone = args.backbone_size
    n = count_trainable_params(arch)
    line = str(n)
    if backbone:
        line += f" ({100 * n / backbone:.2f}% of {backbone / 1e9:g}B)"
    print(line)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cpmoe", description="Continual learning with a probed LoRA mixture of experts.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train the task stream for every configured seed")
    r.add_argument("--config", help="sectioned key = value file; defaults when omitted")
    r.add_argument("--seed", type=_int_list, action="append", help="seed or comma list (overrides [run] seeds)")
    r.add_argument("--out", help="output directory (overrides [run] out)")
    r.add_argument("--ablate", help=f"comma list of switches to turn off: {', '.join(SWITCHES)}")
    r.add_argument("--resume", help="continue from a checkpoint.v1 file")
    r.add_argument("--stop-after", type=int, help="stop once this many tasks are trained")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="render markdown tables from run artifacts")
    rep.add_argument("run_dir")
    rep.add_argument("--no-write", action="store_true", help="print only; do not write report.md")
    rep.set_defaults(func=cmd_report)

    pr = sub.add_parser("probe", help="dump importance and consistency scores for one task")
    pr.add_argument("--config")
    pr.add_argument("--seed", type=int)
    pr.add_argument("--task", type=int, default=1, help="seen-task index to probe (earlier tasks are trained first)")
    pr.add_argument("--dump", help="also write full arrays as JSON to this path")
    pr.set_defaults(func=cmd_probe)

    th = sub.add_parser("verify-theorem1", help="closed-form multi-step GD displacement vs simulation")
    th.add_argument("--trials", type=int, default=100)
    th.add_argument("--seed", type=int, default=0)
    th.add_argument("--tol", type=float, default=1e-8)
    th.add_argument("--max-dim", type=int, default=64)
    th.add_argument("--max-steps", type=int, default=200)
    th.set_defaults(func=cmd_verify_theorem1)

    gc = sub.add_parser("gradcheck", help="finite-difference check of the training objective")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--step", type=float, default=1e-5)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.set_defaults(func=cmd_gradcheck)

    cp = sub.add_parser("count-params", help="trainable adapter parameters for an architecture")
    cp.add_argument("--preset", choices=sorted(PRESETS))
    cp.add_argument("--layers", type=int)
    cp.add_argument("--module", type=_module, action="append", help="IN:OUT of a targeted module (repeatable)")
    cp.add_argument("--rank", type=int, help="total LoRA rank shared by the experts")
    cp.add_argument("--experts", type=int)
    cp.add_argument("--backbone-size", type=float, help="backbone parameter count for the percentage")
    cp.set_defaults(func=cmd_count_params)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # --help exits 0; every parse error exits with EXIT_USAGE
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"cpmoe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalAbort, FloatingPointError) as exc:
        print(f"cpmoe: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError) as exc:
        print(f"cpmoe: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"cpmoe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
