"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure
(divergence, failed gradient check), 3 IO error.
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import os
import sys
from pathlib import Path

from stwave import __version__

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        # no prefix matching, so the override --seed=1 is never read as ablate's --seeds
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    # argparse exits with 2 on bad usage; 2 is reserved for numerical failures here
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _write_json(path: Path, payload: dict):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


class Manifest:
    """``manifest.json``: written at start, finalized with the exit status."""

    def __init__(self, run_dir: Path, command: str, args: dict, config=None, seed=None, workdir=None):
        self.path = Path(run_dir) / "manifest.json"
        self.data = {
            "command": command,
            "args": args,
            "config": config.to_dict() if config is not None else None,
            "config_hash": config.hash() if config is not None else None,
            "seed": seed,
            "version": __version__,
            "threads": os.environ.get("STWAVE_THREADS", ""),
            "workdir": str(workdir) if workdir is not None else None,
            "started": _now(),
            "finished": None,
            "status": "running",
            "exit_code": None,
        }
        self.path.parent.mkdir(parents=True, exist_ok=True)
        _write_json(self.path, self.data)

    def finish(self, code: int, status: str | None = None):
        self.data.update(finished=_now(), exit_code=code, status=status or ("ok" if code == 0 else "failed"))
        _write_json(self.path, self.data)


def _workdir(args) -> Path:
    return Path(args.workdir).resolve()


def _in_workdir(args, path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else _workdir(args) / p


def _load_config(args):
    from stwave.config import RunConfig

    path = _in_workdir(args, args.config) if args.config else None
    return RunConfig.load(path, args.overrides)


def _run_dir(args, name: str) -> Path:
    if getattr(args, "run_dir", None):
        return _in_workdir(args, args.run_dir)
    return _workdir(args) / "runs" / name


def _say(text: str = ""):
    print(text, flush=True)


# commands -----------------------------------------------------------------

def cmd_generate(args) -> int:
    from stwave.data import generate_synthetic, write_speed_csv
    from stwave.graph import write_distance_matrix

    out = _in_workdir(args, args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(out, "generate", {"nodes": args.nodes, "days": args.days, "seed": args.seed,
                                          "zero_rate": args.zero_rate, "out": str(args.out)}, seed=args.seed,
                        workdir=_workdir(args))
    graph, series = generate_synthetic(args.nodes, args.days, args.seed, args.zero_rate)
    write_speed_csv(out / "speeds.csv", series)
    write_distance_matrix(out / "distances.txt", graph.distances)
    _say(f"wrote {out / 'speeds.csv'} ({series.n_steps} steps x {series.n_nodes} sensors)")
    _say(f"wrote {out / 'distances.txt'}")
    manifest.finish(EXIT_OK)
    return EXIT_OK


def cmd_train(args) -> int:
    from stwave.experiment import load_problem, run_training

    run = _load_config(args)
    run_dir = _run_dir(args, f"{run.hash()}-s{run['train.seed']}")
    manifest = Manifest(run_dir, "train", {"config": args.config, "overrides": args.overrides}, run,
                        run["train.seed"], _workdir(args))
    try:
        problem = load_problem(run, _workdir(args))
        result = run_training(run, problem, run_dir, log=None if args.quiet else _say)
    except BaseException as exc:
        manifest.finish(exit_code_for(exc))
        raise
    _say((run_dir / "final_report").read_text(encoding="utf-8").rstrip())
    _say(f"run directory: {run_dir}")
    if result.short_model is not None:
        _say(f"pretrain checkpoint: {run_dir / 'pretrain' / 'best.ckpt'}")
    manifest.finish(EXIT_OK)
    return EXIT_OK


def _problem_for_eval(args, run):
    from stwave.experiment import load_problem

    if args.dataset:
        d = _in_workdir(args, args.dataset)
        run = run.replace(data__source="csv", data__speeds=str(d / "speeds.csv"),
                          data__distances=str(d / "distances.txt"))
    return run, load_problem(run, _workdir(args))


def cmd_eval(args) -> int:
    from stwave.model import load_model
    from stwave.train import evaluate

    run = _load_config(args)
    run, problem = _problem_for_eval(args, run)
    model, meta = load_model(_in_workdir(args, args.checkpoint), problem.adjacency)
    if model.config.history != run["data.history"]:
        run, problem = _problem_for_eval(args, run.replace(data__history=model.config.history))
    run_dir = _run_dir(args, f"eval-{run.hash()}")
    manifest = Manifest(run_dir, "eval", {"checkpoint": str(args.checkpoint), "split": args.split,
                                          "dataset": args.dataset, "config": args.config,
                                          "overrides": args.overrides}, run, workdir=_workdir(args))
    report = evaluate(model, problem.data.split(args.split))
    text = report.format_table(f"[{args.split}] {args.checkpoint}")
    _say(text)
    _say("  ".join(f"{k} {v:.4f}" for k, v in report.table_row().items()))
    (run_dir / "report.txt").write_text(text + "\n", encoding="utf-8")
    (run_dir / "report.csv").write_text("split,horizon,metric,value\n" + "\n".join(report.records(args.split))
                                        + "\n", encoding="utf-8")
    manifest.finish(EXIT_OK)
    return EXIT_OK


def cmd_ensemble(args) -> int:
    from stwave.train import EnsembleSpec, evaluate, evaluate_ensemble, load_ensemble

    run = _load_config(args)
    run, problem = _problem_for_eval(args, run)
    spec = EnsembleSpec(str(_in_workdir(args, args.short)), str(_in_workdir(args, args.long)), args.split_horizon)
    short, long = load_ensemble(spec, problem.adjacency)
    ds = problem.data.split(args.split)
    run_dir = _run_dir(args, f"ensemble-{run.hash()}")
    manifest = Manifest(run_dir, "ensemble", {"short": args.short, "long": args.long,
                                              "split_horizon": args.split_horizon, "split": args.split,
                                              "dataset": args.dataset, "config": args.config,
                                              "overrides": args.overrides}, run, workdir=_workdir(args))
    reports = {"short": evaluate(short, ds), "long": evaluate(long, ds),
               "ensemble": evaluate_ensemble(short, long, ds, args.split_horizon)}
    cols = list(reports["ensemble"].table_row())
    lines = [f"{'model':<10}" + "".join(f"{c:>10}" for c in cols)]
    for name, rep in reports.items():
        lines.append(f"{name:<10}" + "".join(f"{v:>10.4f}" for v in rep.table_row().values()))
    text = "\n".join(lines)
    _say(text)
    (run_dir / "report.txt").write_text(text + "\n", encoding="utf-8")
    # plot-ready horizon vs MAE per model
    rows = ["horizon,minutes," + ",".join(reports)]
    for h in range(reports["ensemble"].horizons):
        rows.append(f"{h + 1},{5 * (h + 1)}," + ",".join(repr(float(r.mae[h])) for r in reports.values()))
    (run_dir / "horizon_mae.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    manifest.finish(EXIT_OK)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from stwave.ablation import ablate

    run = _load_config(args)
    run_dir = _run_dir(args, f"ablate-{args.suite}-{run.hash()}")
    manifest = Manifest(run_dir, "ablate", {"suite": args.suite, "seeds": args.seeds, "config": args.config,
                                            "overrides": args.overrides}, run, run["train.seed"],
                        _workdir(args))
    try:
        table = ablate(run, args.suite, args.seeds, run_dir, _workdir(args), log=None if args.quiet else _say)
    except BaseException as exc:
        manifest.finish(exit_code_for(exc))
        raise
    _say(table.format())
    manifest.finish(EXIT_OK)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from stwave.gradcheck import LEVELS

    levels = list(LEVELS) if args.level == "all" else [args.level]
    run_dir = _run_dir(args, f"gradcheck-{args.level}")
    manifest = Manifest(run_dir, "gradcheck", {"level": args.level}, workdir=_workdir(args))
    failed = []
    lines = []
    for level in levels:
        for name, err, tol in LEVELS[level]():
            ok = err <= tol
            line = f"{'PASS' if ok else 'FAIL'}  {name:<26} {err:.3e}  (<= {tol:g})"
            lines.append(line)
            _say(line)
            if not ok:
                failed.append(name)
    (run_dir / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    code = EXIT_NUMERICAL if failed else EXIT_OK
    _say(f"{len(lines) - len(failed)}/{len(lines)} checks passed")
    manifest.finish(code)
    return code


def cmd_replay(args) -> int:
    """Re-run a command from its manifest alone into a fresh run directory."""
    from stwave.config import RunConfig

    src = _in_workdir(args, args.manifest)
    try:
        record = json.loads(src.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{src}: not a manifest ({exc})") from None
    command, recorded = record["command"], record["args"]
    out = _in_workdir(args, args.run_dir) if args.run_dir else src.parent / "replay"
    out.mkdir(parents=True, exist_ok=True)
    workdir = record.get("workdir") or str(_workdir(args))
    argv = ["--workdir", workdir, command]
    if record.get("config") is not None:
        snapshot = out / "replay.config"
        snapshot.write_text(RunConfig(record["config"]).to_text(), encoding="utf-8")
        argv += ["--config", str(snapshot)]
    if command == "generate":
        argv += ["--nodes", str(recorded["nodes"]), "--days", str(recorded["days"]), "--seed",
                 str(recorded["seed"]), "--zero-rate", repr(recorded["zero_rate"]), "--out", str(out)]
    else:
        argv += ["--run-dir", str(out)]
        for key in ("checkpoint", "split", "dataset", "short", "long", "split_horizon", "suite", "seeds", "level"):
            if recorded.get(key) is not None:
                argv += [f"--{key.replace('_', '-')}", str(recorded[key])]
    _say("replay: stwave " + " ".join(argv))
    return main(argv)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stwave", description="Graph WaveNet / GWNV2 traffic forecasting.")
    p.add_argument("--version", action="version", version=f"stwave {__version__}")
    p.add_argument("--workdir", default=".", help="base directory for all relative paths (default: cwd)")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    g = sub.add_parser("generate", help="write a seeded synthetic speed CSV and distance matrix")
    g.add_argument("--nodes", type=int, default=10, help="number of sensors")
    g.add_argument("--days", type=int, default=14, help="length of the series in days (288 steps each)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--zero-rate", type=float, default=0.05, help="fraction of readings zeroed (missing)")
    g.add_argument("--out", default="data", help="output directory")
    g.set_defaults(func=cmd_generate)

    def common(sp, config=True, run_dir=True):
        if config:
            sp.add_argument("--config", help="flat key=value config file")
        if run_dir:
            sp.add_argument("--run-dir", help="output directory (default: runs/<name> under the workdir)")

    t = sub.add_parser("train", help="train from scratch or with short-horizon pretraining",
                       epilog="Any config key may be overridden as --key=value, e.g. --lr_decay=1.0.")
    common(t)
    t.add_argument("--quiet", action="store_true", help="no per-epoch log")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.add_argument("--dataset", help="directory with speeds.csv and distances.txt (overrides data.*)")
    e.set_defaults(func=cmd_eval)

    n = sub.add_parser("ensemble", help="splice a short-horizon and a long-horizon model")
    common(n)
    n.add_argument("--short", required=True, help="checkpoint used for horizons 1..split")
    n.add_argument("--long", required=True, help="checkpoint used for the remaining horizons")
    n.add_argument("--split-horizon", type=int, default=6)
    n.add_argument("--split", default="test", choices=["train", "val", "test"])
    n.add_argument("--dataset", help="directory with speeds.csv and distances.txt (overrides data.*)")
    n.set_defaults(func=cmd_ensemble)

    a = sub.add_parser("ablate", help="modification, graph or history ablation table")
    common(a)
    a.add_argument("--suite", default="mods", choices=["mods", "history", "graph"])
    a.add_argument("--seeds", type=int, default=3)
    a.add_argument("--quiet", action="store_true")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    common(c, config=False)
    c.add_argument("--level", default="ops", choices=["ops", "layers", "model", "all"])
    c.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("replay", help="re-run a command from its manifest.json")
    r.add_argument("--manifest", required=True)
    r.add_argument("--run-dir", help="output directory (default: <manifest dir>/replay)")
    r.set_defaults(func=cmd_replay)
    return p


def flag_reference() -> str:
    """Markdown flag reference generated from the parser (docs/cli.md)."""
    parser = build_parser()
    lines = ["# stwave command-line reference", "",
             "Generated by `stwave.cli.flag_reference()`; do not edit by hand.", "",
             "Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure, 3 IO error.", "",
             "Global options (before the command):", ""]

    def options(p):
        out = []
        for action in p._actions:
            if isinstance(action, argparse._SubParsersAction) or not action.option_strings:
                continue
            flags = ", ".join(f"`{s}`" for s in action.option_strings)
            meta = "" if action.nargs == 0 else f" {action.metavar or action.dest.upper()}"
            extra = []
            if action.choices:
                extra.append("one of " + ", ".join(str(c) for c in action.choices))
            if action.required:
                extra.append("required")
            elif action.default is not None and action.default is not False and action.default != argparse.SUPPRESS:
                extra.append(f"default {action.default}")
            desc = action.help or ""
            if extra:
                desc = (desc + "; " if desc else "") + "; ".join(extra)
            out.append(f"- {flags}{meta}: {desc}".rstrip(": "))
        return out

    lines += options(parser)
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    helps = {a.dest: a.help for a in sub._choices_actions}
    for name, p in sub.choices.items():
        lines += ["", f"## {name}", "", helps.get(name, ""), ""]
        lines += options(p)
        if p.epilog:
            lines += ["", p.epilog]
    lines += ["", "Config overrides: `train`, `eval`, `ensemble` and `ablate` accept any config key as",
              "`--key=value`, by full dotted name or unique suffix (`--lr_decay=1.0`).",
              "Precedence is override > config file > default.", ""]
    return "\n".join(lines)


def exit_code_for(exc: BaseException) -> int:
    from stwave.errors import CheckpointError, NumericalFault, StwaveError

    if isinstance(exc, NumericalFault):
        return EXIT_NUMERICAL
    if isinstance(exc, CheckpointError) and isinstance(exc.__cause__, OSError):
        return EXIT_IO
    if isinstance(exc, (StwaveError, UsageError)):
        return EXIT_USAGE
    if isinstance(exc, OSError):
        return EXIT_IO
    return EXIT_USAGE


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        # anything argparse does not recognize and looks like --key=value is a config override
        args, unknown = parser.parse_known_args(argv)
        overrides = [u for u in unknown if u.startswith("--") and "=" in u]
        stray = [u for u in unknown if u not in overrides]
        if stray:
            raise UsageError(f"stwave: unrecognized arguments: {' '.join(stray)}")
        if args.command is None:
            parser.print_help()
            return EXIT_USAGE
        if overrides and args.command not in ("train", "eval", "ensemble", "ablate"):
            raise UsageError(f"{args.command} does not take config overrides: {' '.join(overrides)}")
        args.overrides = overrides
        return args.func(args)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except BaseException as exc:
        if isinstance(exc, KeyboardInterrupt):
            print("interrupted", file=sys.stderr)
            return EXIT_USAGE
        code = exit_code_for(exc)
        from stwave.errors import StwaveError

        if not isinstance(exc, (StwaveError, UsageError, OSError)):
            raise
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
