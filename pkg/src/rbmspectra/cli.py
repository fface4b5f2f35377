"""Command-line entry point: ground-state, spectrum, ed, compare."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig
from .ed import OracleCapError
from .groundstate import OptimizationError
from .pipeline import (GridMismatchError, cmd_compare, cmd_ed, cmd_ground_state, cmd_spectrum)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_CONVERGENCE = 3
EXIT_ORACLE_CAP = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rbmspectra",
                                     description="RBM ground states and dynamical spectra")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, type=Path, help="run configuration (INI)")
        p.add_argument("--output", type=Path, help="output directory (overrides output.dir)")
        p.add_argument("--seed", type=int, help="override rbm.seed and sampler.seed")
        return p

    gs = common(sub.add_parser("ground-state", help="optimize the ground state"))
    gs.add_argument("--checkpoint", type=Path, help="checkpoint path to write")

    sp = common(sub.add_parser("spectrum", help="frequency sweep of S(k, omega)"))
    sp.add_argument("--checkpoint", type=Path, help="ground-state checkpoint to read")
    sp.add_argument("--workers", type=int, default=1)

    common(sub.add_parser("ed", help="exact oracle spectrum on the same grid"))

    cp = common(sub.add_parser("compare", help="compare a spectrum against the oracle"))
    cp.add_argument("spectrum", nargs="?", type=Path, help="variational CSV")
    cp.add_argument("oracle", nargs="?", type=Path, help="oracle CSV")
    return parser


def _resolve(out_dir: Path, name: str) -> Path:
    p = Path(name)
    return p if p.is_absolute() else out_dir / p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        out_dir = args.output or Path(cfg.output.dir)
        checkpoint = getattr(args, "checkpoint", None) or _resolve(out_dir, cfg.output.checkpoint)
        if args.command == "ground-state":
            res = cmd_ground_state(cfg, checkpoint)
            trace = res.manifest.summary
            print(f"E0 = {res.e0:.10f} +/- {res.e0_error:.2e}  steps = {res.steps}  "
                  f"converged = {res.converged}  "
                  f"(first {trace['energy_first']:.6f}, last {trace['energy_last']:.6f})")
            print(f"checkpoint: {res.checkpoint}")
            return EXIT_OK if res.converged else EXIT_CONVERGENCE
        if args.command == "spectrum":
            if args.workers < 1:
                raise ConfigError("--workers must be >= 1")
            out = cmd_spectrum(cfg, checkpoint, _resolve(out_dir, cfg.output.spectrum),
                               args.workers)
            print(f"spectrum: {out.path}  non-converged fraction = {out.nonconverged_fraction:.3f}")
            return EXIT_CONVERGENCE if out.failed else EXIT_OK
        if args.command == "ed":
            path = _resolve(out_dir, cfg.output.oracle)
            cmd_ed(cfg, path)
            print(f"oracle: {path}")
            return EXIT_OK
        if args.command == "compare":
            var = args.spectrum or _resolve(out_dir, cfg.output.spectrum)
            ora = args.oracle or _resolve(out_dir, cfg.output.oracle)
            report_path = _resolve(out_dir, cfg.output.report)
            report = cmd_compare(cfg, var, ora, report_path)
            for e in report["per_k"]:
                rel = "-" if e["rel_l2"] is None else f"{e['rel_l2']:.4f}"
                worst = max((p["delta"] for p in e["peaks"]), default=0.0)
                print(f"k_index={e['k_index']:3d}  rel_l2={rel:>8}  max_peak_delta={worst:.3f}  "
                      f"sum_rule_drift={e['sum_rule']['drift']:+.4f}")
            print(f"second order better at {report['second_order_wins']}/"
                  f"{report['oracle_peaks']} oracle peaks")
            print("verdict:", "PASS" if report["verdict"] else "FAIL")
            return EXIT_OK
    except OracleCapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ORACLE_CAP
    except (ConfigError, GridMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OptimizationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
