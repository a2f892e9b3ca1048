"""Experiment grid: leave-one-domain-out, ablations, alignment-strategy comparison, limited source.

Each (config row, task, seed) trains into its own directory::

    <out>/<row-slug>/<sources>-to-<target>/seed<k>/
        config.txt   report.json   roc.csv   trace.csv   checkpoint.sadg

and the aggregate tables are written to ``<out>/results.csv`` (long form) and
``<out>/table.csv`` (rows = methods, columns = HTER/AUC per task).
A run directory whose ``config.txt`` matches the requested configuration and
that already holds a report is reused rather than retrained.
"""

from __future__ import annotations

import dataclasses
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses as L
from .metrics import read_report
from .synth import Corpus, load_corpus
from .trainer import TrainConfig, evaluate_target, run_training

logger = logging.getLogger(__name__)

MODES = ("lodo", "ablation", "stages", "limited")
DEFAULT_SEEDS = (1, 2, 3)
DEFAULT_LIMITED_SOURCES = ("C", "D")

# row name -> TrainConfig overrides
MODE_ROWS: dict[str, dict[str, dict]] = {
    "lodo": {"SADG": {}, "CE-baseline": {"lambda1": 0.0, "lambda2": 0.0, "lambda3": 0.0}},
    "ablation": {"SADG": {}, "SADG wo/ad": {"no_ad": True}, "SADG wo/trip": {"no_trip": True},
                 "SADG wo/sa": {"no_sa": True}},
    "stages": {"feature-SADG": {"sa_strategy": "feature"}, "task-SADG": {"sa_strategy": "avg_score"},
               "SADG": {"sa_strategy": "pairwise"}},
    "limited": {"SADG": {}, "CE-baseline": {"lambda1": 0.0, "lambda2": 0.0, "lambda3": 0.0}},
}

# row display names by directory slug, in table order
ROW_NAMES = {re.sub(r"[^A-Za-z0-9]+", "-", n).strip("-").lower(): n
             for rows in MODE_ROWS.values() for n in rows}

_WEIGHT_KEYS = {"lambda1", "lambda2", "lambda3", "margin_alpha"}
_TUPLE_KEYS = {"channels"}


class PlanError(ValueError):
    """Invalid experiment plan or configuration key."""


def _parse_value(key: str, raw: str, current):
    raw = raw.strip()
    if key in _TUPLE_KEYS:
        return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise PlanError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def apply_overrides(config: TrainConfig, overrides: dict) -> TrainConfig:
    """Return a copy of ``config`` with string or typed overrides applied (every field addressable)."""
    fields = {f.name for f in dataclasses.fields(TrainConfig)} - {"weights"}
    weights = {k: getattr(config.weights, k) for k in _WEIGHT_KEYS}
    changes = {}
    for key, value in overrides.items():
        if key in _WEIGHT_KEYS:
            weights[key] = float(value)
        elif key in fields:
            current = getattr(config, key)
            changes[key] = _parse_value(key, value, current) if isinstance(value, str) else value
        else:
            raise PlanError(f"unknown configuration key {key!r}")
    try:
        return dataclasses.replace(config, weights=L.LossWeights(**weights), **changes)
    except (TypeError, ValueError) as exc:
        raise PlanError(str(exc)) from exc


def config_lines(config: TrainConfig) -> list[str]:
    """Flat key=value rendering; parses back through :func:`apply_overrides`."""
    out = []
    for f in dataclasses.fields(TrainConfig):
        if f.name == "weights":
            for k in ("lambda1", "lambda2", "lambda3", "margin_alpha"):
                out.append(f"{k}={getattr(config.weights, k)!r}")
            continue
        v = getattr(config, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        out.append(f"{f.name}={v}")
    return out


def parse_kv_text(text: str, origin: str = "<config>") -> dict[str, str]:
    """``key=value`` lines; blank lines and ``#`` comments ignored."""
    result = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise PlanError(f"{origin}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        result[key.strip()] = value.strip()
    return result


@dataclass
class ExperimentPlan:
    mode: str = "lodo"
    sources: tuple[str, ...] = ()
    targets: tuple[str, ...] = ()
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    overrides: dict = field(default_factory=dict)
    out_dir: Path = Path("results")
    threshold_policy: str = "source"

    def validate(self, domain_ids: list[str]) -> None:
        if self.mode not in MODES:
            raise PlanError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.seeds:
            raise PlanError("seeds must be non-empty")
        for d in (*self.sources, *self.targets):
            if d not in domain_ids:
                raise PlanError(f"domain {d!r} not in corpus {domain_ids}")
        for src, tgt in self.tasks(domain_ids):
            if tgt in src:
                raise PlanError(f"target {tgt!r} is also a source")
            if not src:
                raise PlanError(f"no source domains for target {tgt!r}")
        apply_overrides(TrainConfig(), self.overrides)

    def tasks(self, domain_ids: list[str]) -> list[tuple[tuple[str, ...], str]]:
        """(sources, target) pairs covered by the plan."""
        if self.mode == "limited":
            sources = self.sources or tuple(d for d in DEFAULT_LIMITED_SOURCES if d in domain_ids)
            targets = self.targets or tuple(d for d in domain_ids if d not in sources)
            return [(tuple(sources), t) for t in targets]
        targets = self.targets or tuple(domain_ids)
        if self.sources:
            return [(tuple(self.sources), t) for t in targets]
        return [(tuple(d for d in domain_ids if d != t), t) for t in targets]

    def rows(self) -> dict[str, dict]:
        return MODE_ROWS[self.mode]


def slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "-", name).strip("-").lower()


def task_name(sources, target) -> str:
    return f"{'&'.join(sources)} to {target}"


def run_single(corpus: Corpus, sources, target: str, config: TrainConfig, run_dir: Path,
               threshold_policy: str = "source") -> dict:
    """Train + evaluate one (config, task, seed); reuse an identical finished run."""
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg_text = "\n".join([f"sources={','.join(sources)}", f"target={target}",
                          f"threshold_policy={threshold_policy}", *config_lines(config)]) + "\n"
    cfg_file, report_file = run_dir / "config.txt", run_dir / "report.json"
    if cfg_file.is_file() and report_file.is_file() and cfg_file.read_text(encoding="utf-8") == cfg_text:
        logger.info("reusing %s", run_dir)
        return read_report(report_file)
    cfg_file.write_text(cfg_text, encoding="utf-8")
    result = run_training(corpus, sources, config, checkpoint_path=run_dir / "checkpoint.sadg")
    result.write_trace(run_dir / "trace.csv")
    run_id = run_dir.as_posix()
    report = evaluate_target(result, corpus[target], threshold_policy=threshold_policy, run_id=run_id)
    report.write_roc(run_dir / "roc.csv")
    report.write(report_file)
    return report.to_record()


def run_plan(corpus: Corpus, plan: ExperimentPlan) -> Path:
    """Execute every (row, task, seed) of the plan and write the aggregate tables."""
    plan.validate(corpus.domain_ids)
    out = Path(plan.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = apply_overrides(TrainConfig(), plan.overrides)
    records = []
    for row, row_overrides in plan.rows().items():
        for sources, target in plan.tasks(corpus.domain_ids):
            for seed in plan.seeds:
                cfg = apply_overrides(base, {**row_overrides, "seed": seed})
                run_dir = out / slug(row) / f"{''.join(sources)}-to-{target}" / f"seed{seed}"
                logger.info("%s | %s | seed %d", row, task_name(sources, target), seed)
                rec = run_single(corpus, sources, target, cfg, run_dir, plan.threshold_policy)
                records.append({"method": row, "task": task_name(sources, target), "target": target,
                                "seed": seed, **rec})
    write_results(out, records)
    return out / "results.csv"


def aggregate(records: list[dict]) -> list[dict]:
    """Mean and (population) std of HTER/AUC per (method, task), in first-seen order."""
    groups: dict[tuple[str, str], list[dict]] = {}
    for r in records:
        groups.setdefault((r["method"], r["task"]), []).append(r)
    rows = []
    for (method, task), recs in groups.items():
        h = np.array([r["hter"] for r in recs])
        a = np.array([r["auc"] for r in recs])
        kl = np.array([r.get("scale_kl", np.nan) for r in recs], dtype=float)
        rows.append({"method": method, "task": task, "target": recs[0]["target"], "n_seeds": len(recs),
                     "hter_mean": h.mean(), "hter_std": h.std(), "auc_mean": a.mean(), "auc_std": a.std(),
                     "scale_kl_mean": kl.mean()})
    return rows


def write_results(out: Path, records: list[dict]) -> None:
    rows = aggregate(records)
    lines = ["method,task,target,n_seeds,hter_mean,hter_std,auc_mean,auc_std,scale_kl_mean"]
    for r in rows:
        lines.append(f"{r['method']},{r['task']},{r['target']},{r['n_seeds']},{r['hter_mean']:.4f},"
                     f"{r['hter_std']:.4f},{r['auc_mean']:.4f},{r['auc_std']:.4f},{r['scale_kl_mean']:.6g}")
    (out / "results.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "table.csv").write_text(render_table(rows, csv=True), encoding="utf-8")
    seed_lines = ["method,task,target,seed,hter,auc,eer_threshold,scale_kl"]
    for r in records:
        seed_lines.append(f"{r['method']},{r['task']},{r['target']},{r['seed']},{r['hter']:.4f},"
                          f"{r['auc']:.4f},{r['eer_threshold']:.6g},{r.get('scale_kl', float('nan')):.6g}")
    (out / "runs.csv").write_text("\n".join(seed_lines) + "\n", encoding="utf-8")


def _best_flags(rows: list[dict], task: str, key: str, higher_better: bool) -> set[str]:
    """Methods flagged best in a column: the leader, only if it beats the runner-up by more than its std."""
    cands = [r for r in rows if r["task"] == task]
    if len(cands) < 2:
        return set()
    sign = 1 if higher_better else -1
    ranked = sorted(cands, key=lambda r: -sign * r[f"{key}_mean"])
    lead, second = ranked[0], ranked[1]
    if sign * (lead[f"{key}_mean"] - second[f"{key}_mean"]) > lead[f"{key}_std"]:
        return {lead["method"]}
    return set()


def render_table(rows: list[dict], csv: bool = False) -> str:
    """Paper-style table: one row per method, HTER(%) and AUC(%) per task; ``*`` marks a clear best."""
    methods = list(dict.fromkeys(r["method"] for r in rows))
    tasks = list(dict.fromkeys(r["task"] for r in rows))
    cell = {(r["method"], r["task"]): r for r in rows}
    best_h = {t: _best_flags(rows, t, "hter", False) for t in tasks}
    best_a = {t: _best_flags(rows, t, "auc", True) for t in tasks}
    header = ["Method"] + [f"{t} {m}" for t in tasks for m in ("HTER(%)", "AUC(%)")]
    body = []
    for m in methods:
        line = [m]
        for t in tasks:
            r = cell.get((m, t))
            if r is None:
                line += ["", ""]
                continue
            line.append(f"{r['hter_mean']:.2f}±{r['hter_std']:.2f}" + ("*" if m in best_h[t] else ""))
            line.append(f"{r['auc_mean']:.2f}±{r['auc_std']:.2f}" + ("*" if m in best_a[t] else ""))
        body.append(line)
    if csv:
        return "\n".join(",".join(x for x in line) for line in [header, *body]) + "\n"
    widths = [max(len(line[i]) for line in [header, *body]) for i in range(len(header))]
    fmt = lambda line: "  ".join(x.ljust(w) for x, w in zip(line, widths)).rstrip()
    sep = "  ".join("-" * w for w in widths)
    return "\n".join([fmt(header), sep, *(fmt(line) for line in body)]) + "\n"


def collect_reports(results_dir: str | Path) -> list[dict]:
    """All run reports under a results directory, in sorted path order."""
    root = Path(results_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"results directory {root} does not exist")
    records = []
    for report in sorted(root.rglob("report.json")):
        run_dir = report.parent
        cfg = parse_kv_text((run_dir / "config.txt").read_text(encoding="utf-8"), str(run_dir / "config.txt"))
        rec = read_report(report)
        rec["seed"] = int(cfg.get("seed", 0))
        rec["sources"] = tuple(cfg["sources"].split(","))
        rec["method"] = ROW_NAMES.get(run_dir.parent.parent.name, run_dir.parent.parent.name)
        rec["task"] = task_name(rec["sources"], cfg["target"])
        rec["run_dir"] = run_dir
        records.append(rec)
    if not records:
        raise FileNotFoundError(f"no run reports found under {root}")
    order = list(ROW_NAMES.values())
    records.sort(key=lambda r: order.index(r["method"]) if r["method"] in order else len(order))
    return records


def render_report(results_dir: str | Path) -> str:
    """Re-render the comparison table from run reports and export ROC CSVs to ``<dir>/roc/``."""
    root = Path(results_dir)
    records = collect_reports(root)
    roc_dir = root / "roc"
    roc_dir.mkdir(exist_ok=True)
    for rec in records:
        src = rec["run_dir"] / "roc.csv"
        if src.is_file():
            name = f"{slug(rec['method'])}_{''.join(rec['sources'])}-to-{rec['target']}_seed{rec['seed']}.csv"
            (roc_dir / name).write_bytes(src.read_bytes())
    text = render_table(aggregate(records))
    (root / "report.txt").write_text(text, encoding="utf-8")
    return text


def load_plan_file(path: str | Path) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise PlanError(f"plan file {p} not found")
    return parse_kv_text(p.read_text(encoding="utf-8"), str(p))


def plan_from_mapping(values: dict[str, str]) -> ExperimentPlan:
    """Split a flat key=value mapping into plan fields and TrainConfig overrides."""
    values = dict(values)
    plan = ExperimentPlan()
    if "mode" in values:
        plan.mode = values.pop("mode")
    if "sources" in values:
        plan.sources = tuple(x for x in values.pop("sources").split(",") if x)
    if "target" in values:
        plan.targets = tuple(x for x in values.pop("target").split(",") if x)
    if "seeds" in values:
        plan.seeds = parse_seeds(values.pop("seeds"))
    if "out" in values:
        plan.out_dir = Path(values.pop("out"))
    if "threshold_policy" in values:
        plan.threshold_policy = values.pop("threshold_policy")
    values.pop("corpus", None)
    plan.overrides = values
    return plan


def parse_seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(x) for x in text.replace(" ", "").split(",") if x)
    except ValueError:
        raise PlanError(f"seeds must be a comma-separated integer list, got {text!r}") from None
    if not seeds:
        raise PlanError("seeds must be non-empty")
    return seeds


def load_plan_corpus(path: str | Path) -> Corpus:
    p = Path(path)
    if not (p / "manifest.tsv").is_file():
        raise FileNotFoundError(f"no corpus at {p} (missing manifest.tsv); run `gen` first")
    return load_corpus(p)
