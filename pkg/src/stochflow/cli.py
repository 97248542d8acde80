"""Command line entry point: ``stochflow run | list | validate``.

Exit codes: 0 pass, 1 acceptance failure, 2 configuration error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import time
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .circulation import NumericalFailure
from .contact import DegenerateFrameError
from .experiments import DEFAULT_FIELDS, DEFAULTS, ConfigError, run_experiment
from .fieldlib import CATALOG, get_field, max_residual, residual_navier_stokes
from .flow import WORKERS_ENV, BlowUpError
from .geometry import probe_points

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3
VALIDATE_THRESHOLD = 1e-8
NUMERICAL_ERRORS = (NumericalFailure, BlowUpError, DegenerateFrameError, np.linalg.LinAlgError)


def load_schema() -> dict:
    text = resources.files("stochflow").joinpath("schema/config.schema.json").read_text("utf-8")
    return json.loads(text)


def load_config(path) -> dict:
    """Parse and schema-validate a config; raises :class:`ConfigError`."""
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"schema violation at {where}: {e.message}")
    return cfg


def _clean(obj):
    """Make numpy scalars/arrays JSON-friendly; non-finite floats become strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else repr(f)
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def csv_text(rows) -> str:
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
    w.writerow(["table", "key", "statistic", "value"])
    for table, key, stat, value in rows:
        w.writerow([table, _fmt(key), stat, _fmt(value)])
    return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write(path: Path, text: str) -> str:
    data = text.encode("utf-8")
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def _sha_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def resolve_workers(cfg: dict):
    env = os.environ.get(WORKERS_ENV)
    if env:
        return max(1, int(env))
    return cfg.get("workers")


def run(config_path, out_root=None) -> int:
    """Run one config; returns the exit code."""
    t0 = time.perf_counter()
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(out_root or ".") / cfg["output_dir"]
    out.mkdir(parents=True, exist_ok=True)
    run_cfg = dict(cfg)
    run_cfg["workers"] = resolve_workers(cfg)
    figures = cfg.get("figures", True)
    try:
        outcome = run_experiment(run_cfg, out, figures)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL

    kind = cfg["experiment"]
    params = dict(DEFAULTS[kind])
    params.update(cfg.get("params", {}))
    report = {"experiment": kind, "field": cfg.get("field") or DEFAULT_FIELDS[kind],
              "master_seed": cfg["master_seed"], "params": params,
              "result": outcome.report, "predicates": outcome.predicates,
              "passed": all(outcome.predicates.values()), "version": __version__}
    hashes = {"report.json": _write(out / "report.json", dumps(report)),
              "results.csv": _write(out / "results.csv", csv_text(outcome.rows))}
    for name in outcome.figures:
        hashes[name] = _sha_file(out / name)
    cfg_bytes = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    manifest = {
        "config_sha256": hashlib.sha256(cfg_bytes).hexdigest(),
        "version": __version__,
        "wall_clock_seconds": round(time.perf_counter() - t0, 3),
        "n_discarded": outcome.n_discarded,
        "verdicts": outcome.predicates,
        "files": hashes,
    }
    _write(out / "manifest.json", dumps(manifest))

    for name, ok in sorted(outcome.predicates.items()):
        print(f"{'PASS' if ok else 'FAIL'} {kind}:{name}")
    print(f"outputs in {out}")
    return EXIT_PASS if report["passed"] else EXIT_FAIL


def list_catalog() -> str:
    lines = ["fields:"]
    lines += [f"  {k}" for k in sorted(CATALOG)]
    lines.append("experiments:")
    for kind in sorted(DEFAULTS):
        lines.append(f"  {kind}")
        fld = DEFAULT_FIELDS[kind]
        if fld:
            lines.append(f"    field: {json.dumps(fld, sort_keys=True)}")
        for k in sorted(DEFAULTS[kind]):
            lines.append(f"    {k} = {json.dumps(DEFAULTS[kind][k])}")
    return "\n".join(lines)


def validate(field_id: str, nu: float = 0.0, n_probes: int = 100,
             threshold: float = VALIDATE_THRESHOLD) -> int:
    try:
        u = get_field(field_id, nu)
    except KeyError as exc:
        print(f"config error: {exc.args[0]}", file=sys.stderr)
        return EXIT_CONFIG
    probes = probe_points(n_probes, u.dim, (-np.pi, np.pi), seed=0)
    worst = 0.0
    for t in (0.0, 0.5, 1.0):
        res = residual_navier_stokes(u, probes, t)
        if not res["validated"]:
            print(f"t={t:g} not validated: {res['reason']}")
        else:
            print(f"t={t:g} momentum {res['momentum']:.3e} divergence {res['divergence']:.3e}")
        worst = max(worst, max_residual(res))
    ok = worst <= threshold
    print(f"{'PASS' if ok else 'FAIL'} {field_id} nu={nu:g} max residual {worst:.3e}")
    return EXIT_PASS if ok else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stochflow", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--root", default=None, help="directory the config output_dir is relative to")
    sub.add_parser("list", help="list catalog fields, experiments and defaults")
    v = sub.add_parser("validate", help="Navier-Stokes residual of a catalog field")
    v.add_argument("field_id")
    v.add_argument("--nu", type=float, default=0.0)
    v.add_argument("--probes", type=int, default=100)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses 2 for usage errors, which matches the config-error code
        return EXIT_CONFIG if exc.code else EXIT_PASS
    if args.command == "run":
        return run(args.config, args.root)
    if args.command == "list":
        print(list_catalog())
        return EXIT_PASS
    return validate(args.field_id, args.nu, args.probes)


if __name__ == "__main__":
    sys.exit(main())
