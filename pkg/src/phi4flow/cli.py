"""Command-line entry point: ``phi4flow <subcommand> --config PATH --out DIR``.

Exit status is 0 iff every verdict of the run passes (for ``replay``: iff
every output is reproduced bit-exactly), 1 on a failed verdict and 2 on a
usage, configuration or precondition error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config
from .dynamics import BlowUpError
from .runner import RunError, execute, replay, resolve_out, resolve_workers, write_run

log = logging.getLogger("phi4flow")

SUBCOMMANDS = {
    "calibrate": "calibrate",
    "contraction": "contraction",
    "spectral-gap": "spectral_gap",
    "verify": "verify",
    "be-check": "be_check",
    "coming-down": "coming_down",
}


def _seed(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _workers(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("workers must be positive")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="phi4flow", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name, help=f"run the {name} experiment")
        s.add_argument("--config", required=True, help="INI run configuration")
        s.add_argument("--out", help="run directory (env PHI4FLOW_OUT)")
        s.add_argument("--seed", type=_seed, help="override run.base_seed")
        s.add_argument("--workers", type=_workers, help="worker processes (env PHI4FLOW_WORKERS)")
        s.add_argument("--force", action="store_true", help="overwrite an existing run")
    r = sub.add_parser("replay", help="re-execute a manifest and compare output hashes")
    r.add_argument("manifest", help="manifest.json or the run directory holding it")
    r.add_argument("--workers", type=_workers, help="worker processes (env PHI4FLOW_WORKERS)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        workers = resolve_workers(args.workers)
        if args.command == "replay":
            ok, msg = replay(args.manifest, workers)
            print(("PASS " if ok else "FAIL ") + msg)
            return 0 if ok else 1
        experiment = SUBCOMMANDS[args.command]
        cfg, sha = load_config(args.config)
        if experiment not in cfg:
            raise ConfigError(f"config has no [{experiment}] section")
        if args.seed is not None:
            cfg["run"]["base_seed"] = args.seed
        out = resolve_out(args.out)
        if (out / "manifest.json").exists() and not args.force:
            raise RunError(f"{out} already holds a run; pass --force to overwrite")
        log.info("running %s with %d worker(s)", experiment, workers)
        files, passed = execute(experiment, cfg, workers)
        write_run(out, experiment, cfg, files, passed, args.config, sha, args.force)
        print(f"{'PASS' if passed else 'FAIL'} {experiment}: {len(files)} files in {out}")
        return 0 if passed else 1
    except (ConfigError, RunError, BlowUpError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
