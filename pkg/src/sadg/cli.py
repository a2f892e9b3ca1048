"""Command line: ``sadg gen | run | report``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from collections import Counter
from pathlib import Path

from . import experiment as X
from .synth import generate_corpus, load_corpus, save_corpus

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sadg", description="Scale-aligned domain generalization lab on a synthetic recapture corpus.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write the synthetic 4-domain corpus")
    g.add_argument("--corpus", required=True, help="output directory")
    g.add_argument("--count", type=int, default=300, help="images per class per domain")
    g.add_argument("--seed", type=int, default=0)

    r = sub.add_parser("run", help="train and evaluate an experiment grid")
    r.add_argument("--corpus", required=True)
    r.add_argument("--plan", help="key=value plan file")
    r.add_argument("--mode", choices=X.MODES)
    r.add_argument("--target", help="target domain id(s), comma-separated")
    r.add_argument("--sources", help="source domain ids, comma-separated (limited mode)")
    r.add_argument("--seeds", help="comma-separated seed list (default 1,2,3)")
    r.add_argument("--out", help="results directory")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any TrainConfig field (repeatable)")

    rep = sub.add_parser("report", help="print the comparison table and export ROC CSVs")
    rep.add_argument("results", nargs="?", help="results directory")
    rep.add_argument("--out", dest="out_flag", help="results directory (alternative to positional)")
    return p


def cmd_gen(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    corpus = generate_corpus(count_per_class=args.count, seed=args.seed)
    manifest = save_corpus(corpus, args.corpus)
    print(f"wrote {len(corpus)} images to {args.corpus} ({manifest.name})")
    for dom_id, data in corpus.domains.items():
        counts = Counter(int(y) for y in data.labels)
        print(f"  domain {dom_id}: single={counts[0]} recapture={counts[1]}")
    return EXIT_OK


def _plan_from_args(args) -> X.ExperimentPlan:
    values: dict[str, str] = {}
    if args.plan:
        values.update(X.load_plan_file(args.plan))
    for flag in ("mode", "target", "sources", "seeds", "out"):
        v = getattr(args, flag)
        if v is not None:
            values[flag] = v
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    return X.plan_from_mapping(values)


def cmd_run(args) -> int:
    try:
        plan = _plan_from_args(args)
    except X.PlanError as exc:
        raise UsageError(str(exc)) from exc
    corpus = X.load_plan_corpus(args.corpus)
    try:
        plan.validate(corpus.domain_ids)
    except X.PlanError as exc:
        raise UsageError(str(exc)) from exc
    path = X.run_plan(corpus, plan)
    print((Path(plan.out_dir) / "table.csv").read_text(encoding="utf-8"), end="")
    print(f"results: {path}")
    return EXIT_OK


def cmd_report(args) -> int:
    target = args.results or args.out_flag
    if not target:
        raise UsageError("report needs a results directory")
    print(X.render_report(target), end="")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    handlers = {"gen": cmd_gen, "run": cmd_run, "report": cmd_report}
    try:
        return handlers[args.verb](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, FloatingPointError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
