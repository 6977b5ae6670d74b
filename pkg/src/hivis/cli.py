"""``hivis`` command line: one subcommand per pipeline stage.

Exit codes: 0 ok, 1 runtime error, 2 missing artifact from an earlier
stage, 3 invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

EXIT_OK, EXIT_ERROR, EXIT_MISSING, EXIT_INVARIANT = 0, 1, 2, 3

COMMANDS = ("gen-data", "train-target", "precompute", "train-drafter", "bench", "verify-lossless", "ablate", "report")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors are runtime errors; 2 means a missing artifact
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hivis", description="Toy HiViS speculative decoding pipeline.")
    p.add_argument("command", choices=COMMANDS, help="pipeline stage to run")
    p.add_argument("--config", help="YAML run file; flags below override its values")
    p.add_argument("--work-dir", help="directory holding corpus, checkpoints and reports")
    p.add_argument("--seed", type=int, help="seed for data, training and evaluation prompts")
    p.add_argument("--temperature", type=float, help="decoding temperature (0 = greedy)")
    p.add_argument("--prompts", type=int, help="evaluation prompts per task")
    p.add_argument("--depth", type=int, help="draft tree depth")
    p.add_argument("--topk", type=int, help="children kept per node and nodes kept per level")
    p.add_argument("--paths", type=int, help="nodes kept in the verification tree")
    p.add_argument("--variant", default=None, help="drafter variant: full, no_f, no_seq (train-drafter); ablate takes a comma list")
    p.add_argument("--out", help="output file (bench, ablate, report); defaults under the report directory")
    p.add_argument("--format", choices=("json", "csv"), default="json", help="report format")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    return p


def _config(args):
    from .bench import RunConfig

    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    over = {k: getattr(args, k) for k in ("seed", "temperature", "prompts") if getattr(args, k) is not None}
    if args.work_dir:
        over["work_dir"] = args.work_dir
    cfg = replace(cfg, **over)
    tree = {n: getattr(args, a) for n, a in (("depth", "depth"), ("k", "topk"), ("n_paths", "paths")) if getattr(args, a) is not None}
    if tree:
        cfg = replace(cfg, tree=replace(cfg.tree, **tree))
    if cfg.temperature < 0:
        raise ValueError("temperature must be >= 0")
    return cfg


def _write(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        print(out)


def run(args) -> int:
    from . import bench

    cfg = _config(args)
    out = Path(args.out) if args.out else None
    cmd = args.command
    if cmd == "gen-data":
        print(json.dumps(bench.gen_data(cfg).counts()))
    elif cmd == "train-target":
        _, acc = bench.train_target(cfg)
        print(f"color-query accuracy {acc:.3f}")
    elif cmd == "precompute":
        print(json.dumps(bench.precompute(cfg)))
    elif cmd == "train-drafter":
        curves = bench.train_drafter(cfg, args.variant or "full")
        print(json.dumps(curves[-1] if curves else {}))
    elif cmd == "bench":
        report = bench.run_bench(cfg)
        path = cfg.reports() / "report.json"
        bench.emit_report(report, "json", path)
        if args.format != "json" or out is not None:
            _write(bench.render_report(report, args.format), out)
        else:
            print(path)
    elif cmd == "verify-lossless":
        n = cfg.prompts if args.prompts is not None else 100
        res = bench.verify_lossless(cfg, n, cfg.temperature)
        print(json.dumps(res))
    elif cmd == "ablate":
        variants = tuple(args.variant.split(",")) if args.variant else bench.VARIANTS
        report = bench.run_ablation(cfg, variants)
        _write(json.dumps(bench._round6(report), indent=2) + "\n", out or cfg.reports() / "ablation.json")
    elif cmd == "report":
        path = cfg.reports() / "report.json"
        if not path.exists():
            raise bench.MissingArtifact(f"benchmark report missing ({path}); run `bench` first")
        _write(bench.render_report(json.loads(path.read_text()), args.format), out)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    from .bench import InvariantViolation, MissingArtifact
    from .numerics import CheckpointError

    try:
        return run(args)
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except InvariantViolation as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ValueError, OSError, CheckpointError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
