"""Command-line entry point: ``simulate``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .environment import InfeasibleConfigError
from .harness import Algorithm, PRESETS, emit_csv, load_config, preset, run

log = logging.getLogger("hetofedbandit")


def _seeds(text: str) -> list[int]:
    """``"0,1,2"`` or ``"0-9"`` (inclusive) or a mix of both."""
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = (int(v) for v in part.split("-", 1))
            if hi < lo:
                raise argparse.ArgumentTypeError(f"empty seed range {part!r}")
            out.extend(range(lo, hi + 1))
        else:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError("no seeds given")
    return out


def _algorithms(text: str) -> list[Algorithm]:
    try:
        return [Algorithm(a.strip()) for a in text.split(",") if a.strip()]
    except ValueError:
        names = ", ".join(a.value for a in Algorithm)
        raise argparse.ArgumentTypeError(f"unknown algorithm in {text!r}; choose from {names}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="simulate",
        description="Run federated clustered bandit simulations and write CSV traces.",
    )
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", choices=sorted(PRESETS), help="named configuration")
    src.add_argument("--config", help="JSON file mirroring RunConfig")
    p.add_argument("--algorithm", type=_algorithms, default=None,
                   help="algorithm name, or a comma-separated list (default: the config's)")
    p.add_argument("--seeds", type=_seeds, default=None, help="e.g. 0,1,2 or 0-9")
    p.add_argument("--out", required=True, help="output directory for CSV files")
    p.add_argument("--t0", type=int, default=None, help="override the exploration length")
    p.add_argument("--upsilon", type=float, default=None, help="fixed static test threshold")
    p.add_argument("--queue", choices=("fifo", "priority"), default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        if args.config:
            base = load_config(args.config)
            algorithms = args.algorithm or [base.algorithm]
            configs = [replace(base, algorithm=a) for a in algorithms]
        else:
            algorithms = args.algorithm or [Algorithm.HFB]
            configs = [preset(args.preset, a) for a in algorithms]
        traces = []
        for cfg in configs:
            overrides = {}
            if args.seeds is not None:
                overrides["seeds"] = args.seeds
            if args.t0 is not None and cfg.algorithm.clustered:
                overrides["T0"] = args.t0
            if args.upsilon is not None:
                overrides["upsilon_override"] = args.upsilon
            if args.queue is not None:
                overrides["queue"] = args.queue
            cfg = replace(cfg, **overrides) if overrides else cfg
            for seed in cfg.seeds:
                tr = run(cfg, seed)
                log.info("%s seed=%d regret=%.2f comm=%d clusters_ok=%s (%.1fs)", tr.algorithm, seed,
                         tr.final_regret, tr.final_comm, tr.clustering_correct, tr.seconds)
                traces.append(tr)
        files = emit_csv(traces, args.out)
        log.info("wrote %d files to %s", len(files), args.out)
    except (ValueError, InfeasibleConfigError, OSError, KeyError, TypeError) as exc:
        print(f"simulate: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
