"""Command line entry point: ``macpnn {generate,run,summarize,plot}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ConfigurationError
from . import harness

log = logging.getLogger("macpnn")


def _load(args):
    cfg = harness.load_config(args.config)
    if args.scale is not None:
        cfg.scale = args.scale
    if args.seed is not None:
        cfg.seeds = [args.seed]
    cfg.validate()
    return cfg


def cmd_generate(args) -> int:
    cfg = _load(args)
    paths = harness.generate_streams(cfg, args.out or cfg.out)
    for p in paths:
        print(p)
    return 0


def cmd_run(args) -> int:
    cfg = _load(args)
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(harness.dump_config(cfg))
    man = harness.run_experiment(cfg, out)
    for key, c in sorted(man.communications.items()):
        log.info("%s: %d communications (naive %d, ratio %.4f)", key, c["ours"], c["naive"], c["ratio"])
    print(out / "summary.csv")
    return 0


def cmd_summarize(args) -> int:
    out = _results_dir(args)
    print(harness.summarize(out))
    return 0


def cmd_plot(args) -> int:
    out = _results_dir(args)
    if not (out / "curves.csv").exists():
        harness.summarize(out)
    for p in harness.plot_outputs(out):
        print(p)
    return 0


def _results_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    if args.config:
        return Path(harness.load_config(args.config).out)
    raise ConfigurationError("need --out (or --config) to locate the results")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="macpnn", description=__doc__)
    sub = p.add_subparsers(dest="verb", required=True)
    specs = {
        "generate": (cmd_generate, "materialize the device streams as CSV", True),
        "run": (cmd_run, "run every model kind and seed, write logs, summaries, plots", True),
        "summarize": (cmd_summarize, "recompute summary.csv and curves.csv from run logs", False),
        "plot": (cmd_plot, "redraw the SVG curves from curves.csv", False),
    }
    for verb, (fn, help_, needs_config) in specs.items():
        sp = sub.add_parser(verb, help=help_)
        sp.add_argument("--config", required=needs_config, help="scenario YAML file")
        sp.add_argument("--seed", type=int, help="run a single model seed instead of the configured list")
        sp.add_argument("--out", help="output directory (default: the config's 'out')")
        sp.add_argument("--scale", type=float, help="concept-length multiplier for desk runs")
        sp.add_argument("-v", "--verbose", action="store_true")
        sp.set_defaults(func=fn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - report and exit nonzero
        log.debug("run failed", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
