"""``revft`` command line: gradcheck, recon-sweep, init-sweep, train, memory-report.

Exit codes: 0 success, 1 tolerance or run failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from revft import analysis
from revft.config import RunConfig, config_from_dict, config_to_dict, load_config, set_path
from revft.exceptions import ConfigError, RevftError, ScalingDegenerate
from revft.model import assemble_model, save_model
from revft.peft import INIT_SWEEP_COLUMNS, init_sweep
from revft.tensor import make_rng
from revft.train import train_loop, write_metrics

log = logging.getLogger("revft")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


# ---------------------------------------------------------------------------
# report files


def write_csv(path: Path, columns, rows) -> None:
    """Header plus one line per row; floats use the shortest exact repr."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(float(row[c])) if isinstance(row[c], (float, np.floating)) else row[c]
                             for c in columns])


def read_csv(path) -> list[dict]:
    """Inverse of :func:`write_csv`: ints and floats come back as numbers."""

    def parse(text):
        for conv in (int, float):
            try:
                return conv(text)
            except ValueError:
                pass
        return text

    with open(path, encoding="utf-8", newline="") as fh:
        return [{k: parse(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def write_json(path: Path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gradcheck(cfg: RunConfig, out: Path) -> int:
    from revft.model import SegmentPlan
    from revft.reversible import MeftKind

    checks = analysis.gradcheck_blocks(cfg.seed)
    for kind in MeftKind:
        checks += analysis.gradcheck_meft(kind, cfg.seed)
    plan = cfg.segment_plan if cfg.segment_plan.total <= 6 else SegmentPlan(2, 2, 2)
    checks += analysis.gradcheck_model(plan, cfg.meft_kind, cfg.seed, head_mode=cfg.head_mode,
                                       merge=cfg.merge)
    for kind in MeftKind:
        for prec in ("single", "double"):
            rc = analysis.ReconConfig(kind=kind.value, depth=8, lam=1.0, beta=1.0, precision=prec)
            rep = analysis.reconstruction_error_report(rc, cfg.seed, probe="all")
            checks.append(analysis.Check(f"{kind.value} {prec} reversible vs vanilla gradients",
                                         rep.max_abs, analysis.TOLERANCES[f"grad_equiv_{prec}"]))
            checks.append(analysis.Check(f"{kind.value} {prec} inverse round trip",
                                         analysis.roundtrip_error(rc, cfg.seed),
                                         analysis.TOLERANCES[f"roundtrip_{prec}"]))
    for c in checks:
        print(c.line())
    write_json(out / "gradcheck.json",
               {"seed": cfg.seed, "checks": [{"name": c.name, "value": c.value, "tol": c.tol,
                                              "passed": c.passed} for c in checks]})
    failed = [c for c in checks if not c.passed]
    if failed:
        print(f"revft: {len(failed)} of {len(checks)} checks failed", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_recon_sweep(cfg: RunConfig, out: Path) -> int:
    rows = analysis.sweep_run(cfg.sweep_spec())
    write_csv(out / "recon_sweep.csv", analysis.SWEEP_COLUMNS, [r.as_record() for r in rows])
    failed = [r for r in rows if r.error]
    for r in failed:
        print(f"revft: cell depth={r.config.depth} lambda={r.config.lam} beta={r.config.beta} "
              f"seed={r.seed} failed: {r.error}", file=sys.stderr)
    print(f"{len(rows)} cells, {len(failed)} failed -> {out / 'recon_sweep.csv'}")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_init_sweep(cfg: RunConfig, out: Path) -> int:
    rows = init_sweep(cfg.init_sweep.experiment, cfg.init_schemes(), cfg.init_sweep.seeds)
    write_csv(out / "init_sweep.csv", INIT_SWEEP_COLUMNS, rows)
    print(f"{len(rows)} runs -> {out / 'init_sweep.csv'}")
    return EXIT_OK


def build_model(cfg: RunConfig):
    return assemble_model(cfg.segment_plan, cfg.meft_kind, cfg.dims, r=cfg.r, sigma=cfg.sigma,
                          scaling=cfg.scaling_config, merge=cfg.merge, head_mode=cfg.head_mode,
                          rng=make_rng(cfg.seed, 0), precision=cfg.precision, mu=cfg.mu)


def cmd_train(cfg: RunConfig, out: Path) -> int:
    model = build_model(cfg)
    hist = train_loop(model, cfg.task, cfg.train_config())
    echoed = {k: v for k, v in config_to_dict(cfg).items() if k != "out"}
    write_metrics(out / "metrics.json", hist, {"config": echoed})
    save_model(out / "model.ckpt", model, {"seed": cfg.seed, "steps": hist.steps})
    print(f"steps {hist.steps} loss {hist.initial_loss:.6f} -> {hist.final_loss:.6f} "
          f"best dev {hist.best_dev_metric:.4f}")
    return EXIT_OK


def cmd_memory_report(cfg: RunConfig, out: Path) -> int:
    if cfg.segment_plan.n_reversible:
        cfg.scaling_config.check_invertible()
    model = build_model(cfg)
    rng = make_rng(cfg.seed, 3)
    shape = (cfg.memory.batch, cfg.memory.seq_len)
    tokens = rng.integers(0, cfg.dims.vocab, size=shape)
    if cfg.head_mode == "classify":
        targets = rng.integers(0, cfg.dims.n_classes, size=shape[0])
    else:
        targets = rng.integers(0, cfg.dims.vocab, size=shape)
    report = {"batch": shape[0], "seq_len": shape[1], "plan": list(cfg.plan),
              "precision": cfg.precision, "kind": cfg.kind}
    for mode in ("vanilla", "reversible"):
        report[mode] = analysis.memory_ledger_capture(model, tokens, mode, targets).to_dict()
    write_json(out / "memory.json", report)
    for mode in ("vanilla", "reversible"):
        print(f"{mode}: {report[mode]['total_persistent_bytes']} bytes retained, "
              f"peak transient {report[mode]['peak_transient_bytes']}")
    return EXIT_OK


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "recon-sweep": cmd_recon_sweep,
    "init-sweep": cmd_init_sweep,
    "train": cmd_train,
    "memory-report": cmd_memory_report,
}


# ---------------------------------------------------------------------------
# argument handling


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="revft", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="run seed (also replaces sweep seed lists)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--kind", choices=("meft1", "meft2", "meft3"))
        p.add_argument("--precision", choices=("single", "double"))
        p.add_argument("--cache-mode", choices=("vanilla", "reversible"))
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key by dotted path; VALUE is parsed as JSON")
    return parser


def resolve_config(args) -> RunConfig:
    if args.config:
        data = config_to_dict(load_config(args.config))
    else:
        data = config_to_dict(RunConfig())
    if args.seed is not None:
        data["seed"] = args.seed
        data["sweep"]["seeds"] = [args.seed]
        data["init_sweep"]["seeds"] = [args.seed]
    for key, attr in (("out", "out"), ("kind", "kind"), ("precision", "precision"),
                      ("cache_mode", "cache_mode")):
        value = getattr(args, attr)
        if value is not None:
            data[key] = value
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        set_path(data, key, _parse_value(value))
    return config_from_dict(data)


def _error(exc: Exception) -> str:
    name = type(exc).__name__
    msg = str(exc)
    return msg if msg.startswith(name) else f"{name}: {msg}"


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
    except (ConfigError, ScalingDegenerate) as exc:
        print(f"revft: error: {_error(exc)}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        return COMMANDS[args.command](cfg, out)
    except (ConfigError, ScalingDegenerate) as exc:
        print(f"revft: error: {_error(exc)}", file=sys.stderr)
        return EXIT_CONFIG
    except (RevftError, FloatingPointError, AssertionError) as exc:
        print(f"revft: failed: {_error(exc)}", file=sys.stderr)
        return EXIT_FAIL


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
