"""Command line entry point: ``combcbf run|compare|grid|audit|selftest``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .cbf_core import ContractError
from .harness import (SCENARIOS, VARIANTS, ScenarioConfig, SliceSpec, audit_backup_union, compare_variants,
                      export_csv, export_grid, export_json, make_scenario, parse_resolution, run_closed_loop)

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_UNSAFE = 0, 2, 3, 4

COMPARISONS = {
    "orbit": ["cbf", "comb", "bcbf", "comb-bcbf"],
    "attitude": [{"variant": "comb-bcbf", "backup_sets": None}, {"variant": "bcbf", "backup_sets": [0]}],
}


def _load(args) -> ScenarioConfig:
    data = {}
    if getattr(args, "config", None):
        data = ScenarioConfig.from_json(args.config).to_dict()
    if getattr(args, "scenario", None):
        if data and data["scenario"] != args.scenario:
            raise ContractError(f"--scenario {args.scenario} conflicts with the config's {data['scenario']}")
        data["scenario"] = args.scenario
    if getattr(args, "variant", None):
        data["variant"] = args.variant
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
    return ScenarioConfig.from_dict(data)


def _run_status(metrics, tol) -> int:
    if metrics.min_psi and min(metrics.min_psi) < -tol:
        return EXIT_UNSAFE
    if metrics.aborted or metrics.nonoptimal_steps:
        return EXIT_SOLVER
    return EXIT_OK


def _label(v) -> str:
    if isinstance(v, str):
        return v
    sets = v.get("backup_sets")
    return v["variant"] + ("" if sets is None else "-sets" + "".join(str(j) for j in sets))


def cmd_run(args) -> int:
    cfg = _load(args)
    sc = make_scenario(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    logd = run_closed_loop(cfg, sc)
    export_csv(logd, out / "log.csv", sc)
    export_json(logd.metrics, out / "metrics.json")
    m = logd.metrics
    print(f"{cfg.scenario}/{cfg.variant}: {m.steps} steps, mean tracking error {m.mean_tracking_error:.6g}, "
          f"min psi {min(m.min_psi) if m.min_psi else float('nan'):.6g}, non-optimal steps {m.nonoptimal_steps}")
    return _run_status(m, cfg.safety_tol)


def cmd_compare(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    variants = COMPARISONS[cfg.scenario]
    sc = make_scenario(cfg)
    rows, code = [], EXIT_OK
    for v, (logd, m) in zip(variants, compare_variants(cfg, variants)):
        label = _label(v)
        m.variant = label
        export_csv(logd, out / f"log_{label}.csv", sc)
        rows.append(m)
        code = max(code, _run_status(m, cfg.safety_tol))
        print(f"{label:>16}  mean err {m.mean_tracking_error:12.6g}  max err {m.max_tracking_error:12.6g}  "
              f"min psi {min(m.min_psi):10.4g}  non-optimal {m.nonoptimal_steps}")
    export_json(rows, out / "comparison.json")
    return code


def cmd_grid(args) -> int:
    cfg = _load(args)
    sc = make_scenario(cfg)
    spec = SliceSpec.parse(args.slice, sc.grid_coords)
    n = export_grid(cfg, spec, parse_resolution(args.res), args.out, sc)
    print(f"wrote {n} grid cells to {args.out}")
    return EXIT_OK


def cmd_audit(args) -> int:
    cfg = _load(args)
    report, exceptions = audit_backup_union(cfg, args.samples)
    if args.out:
        data = report.to_dict()
        data["filter_exceptions"] = exceptions
        export_json(data, args.out)
    print(f"{report.summary}; min margin {report.min_margin:.6g}; "
          f"gen-combinatorial filter non-optimal at {exceptions} compatible states")
    return EXIT_OK if not report.violations and not exceptions else EXIT_SOLVER


def cmd_selftest(args) -> int:
    from .selftest import run_all

    results = run_all()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_SOLVER


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="combcbf", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log filter warnings")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, variant=True):
        p.add_argument("--scenario", choices=SCENARIOS)
        if variant:
            p.add_argument("--variant", choices=VARIANTS)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("run", help="simulate one filter variant")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="run the scenario's variant comparison")
    common(p, variant=False)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("grid", help="raster of backup and implicit barriers over a 2-D slice")
    common(p, variant=False)
    p.add_argument("--slice", required=True, help='e.g. "r=3.5:5,rdot=-0.2:0.2" or "ax=-1:1,ay=-1:1"')
    p.add_argument("--res", default="40x40", help="WxH")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("audit", help="compatibility audit over the union of backup sets")
    common(p, variant=False)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--out", help="JSON report path")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("selftest", help="run the built-in oracle checks")
    p.set_defaults(func=cmd_selftest)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ContractError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
