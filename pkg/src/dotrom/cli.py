"""Command-line entry point: ``dotrom generate | invert | matrix | report``.

Experiment settings come from an optional TOML file whose keys mirror
:class:`dotrom.harness.ExperimentSpec` (with a ``[mesh]`` table); flags
override file values. Output goes below ``--out`` or, when omitted, below
``$DOTROM_OUTPUT`` (default ``./dotrom-output``).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .fom import MeshConfig
from .harness import (
    CURRENT_POINT_ROWS,
    DEFAULT_ROWS,
    ExperimentSpec,
    _jsonable,
    build_system,
    export_reconstruction,
    generate_data,
    percentile_table,
    repeat_seed,
    run_matrix,
    run_row,
    write_table,
)

OUTPUT_ENV = "DOTROM_OUTPUT"
ALL_ROWS = {r.name.replace(" ", "_"): r for r in DEFAULT_ROWS + CURRENT_POINT_ROWS}


def load_spec(path=None, **overrides) -> ExperimentSpec:
    data = {}
    if path is not None:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    mesh = dict(data.pop("mesh", {}))
    for key in ("nx", "ny"):
        if overrides.get(key) is not None:
            mesh[key] = overrides.pop(key)
        overrides.pop(key, None)
    if mesh:
        data["mesh"] = mesh
    rows = overrides.pop("rows", None)
    data.update({k: v for k, v in overrides.items() if v is not None})
    spec = ExperimentSpec.from_dict(data)
    if rows:
        unknown = [r for r in rows if r not in ALL_ROWS]
        if unknown:
            raise SystemExit(f"unknown method rows {unknown}; choose from {sorted(ALL_ROWS)}")
        spec = replace(spec, method_rows=tuple(ALL_ROWS[r] for r in rows))
    return spec


def _out_dir(args) -> Path:
    root = args.out or os.environ.get(OUTPUT_ENV, "dotrom-output")
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _spec_from_args(args) -> ExperimentSpec:
    return load_spec(args.config, nx=args.nx, ny=args.ny, repeats=getattr(args, "repeats", None),
                     seed=args.seed, noise_permille=args.noise_permille, rows=getattr(args, "rows", None))


def cmd_generate(args) -> int:
    spec = _spec_from_args(args)
    out = _out_dir(args)
    seed = repeat_seed(spec.seed, args.repeat)
    data = generate_data(spec, seed)
    np.savetxt(out / "data.csv", data.D, delimiter=",", fmt="%.17g")
    meta = {"seed": seed, "repeat": args.repeat, "noise_level": data.noise_level,
            "noise_ratio": data.noise_ratio, "spec": spec.to_dict()}
    (out / "data.json").write_text(json.dumps(meta, indent=1, default=_jsonable))
    print(f"wrote {out / 'data.csv'} (noise level {data.noise_level:.6g})")
    return 0


def cmd_invert(args) -> int:
    spec = _spec_from_args(args)
    out = _out_dir(args)
    row = ALL_ROWS[args.row]
    seed = repeat_seed(spec.seed, args.repeat)
    data = generate_data(spec, seed)
    result = run_row(spec, row, data)
    with (out / "history.csv").open("w", newline="") as fh:
        cols = ["iteration", "event", "f_model", "f_est", "radius", "solves"]
        writer = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(result.history)
    (out / "ledger.json").write_text(json.dumps(result.ledger, indent=1))
    np.savetxt(out / "p_final.csv", result.p, delimiter=",", fmt="%.17g")
    summary = result.summary()
    summary.update(export_reconstruction(spec, result.p, data.truth_mu, out, p0=result.initial_p))
    (out / "summary.json").write_text(json.dumps(summary, indent=1, default=_jsonable))
    print(json.dumps(summary, indent=1, default=_jsonable))
    return 0 if result.converged else 1


def _print_table(table):
    print(f"{'row':30s} {'conv':>5s} " + " ".join(f"{h:>7s}" for h in ("min", "p25", "p50", "p75", "max"))
          + "   amortized p50")
    for t in table:
        flag = " *" if t["flagged"] else ""
        vals = " ".join(f"{t[f'total_p{q}']:7.0f}" for q in (0, 25, 50, 75, 100))
        print(f"{t['row']:30s} {t['converged']:>2d}/{t['repeats']:<2d} {vals}   {t['amortized_p50']:7.0f}{flag}")


def cmd_matrix(args) -> int:
    spec = _spec_from_args(args)
    out = _out_dir(args)
    result = run_matrix(spec, out_dir=out, workers=args.workers)
    _print_table(result["table"])
    return 0


def cmd_report(args) -> int:
    root = Path(args.directory)
    runs = [json.loads(p.read_text()) for p in sorted(root.glob("runs/*/*.json"))]
    if not runs:
        print(f"no run files below {root}", file=sys.stderr)
        return 1
    spec = json.loads((root / "spec.json").read_text()) if (root / "spec.json").exists() else None
    names = [r["name"] for r in spec["method_rows"]] if spec else None
    table = percentile_table(runs, names)
    write_table(table, root / "table.csv")
    _print_table(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dotrom", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="TOML experiment file")
        p.add_argument("--out", type=Path, help=f"output directory (default ${OUTPUT_ENV})")
        p.add_argument("--nx", type=int)
        p.add_argument("--ny", type=int)
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--noise-permille", type=float)

    p = sub.add_parser("generate", help="synthetic measurements for one repeat")
    common(p)
    p.add_argument("--repeat", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("invert", help="one inversion with one method row")
    common(p)
    p.add_argument("--repeat", type=int, default=0)
    p.add_argument("--row", choices=sorted(ALL_ROWS), default="1-point_residual_x_p")
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("matrix", help="all method rows over repeated runs")
    common(p)
    p.add_argument("--repeats", type=int)
    p.add_argument("--rows", nargs="+", metavar="ROW", help=f"subset of {sorted(ALL_ROWS)}")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("report", help="rebuild the percentile table from stored runs")
    p.add_argument("directory", type=Path)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
