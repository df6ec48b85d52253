"""Experiment grid: datasets, teachers, students, evaluation and summary tables.

Every stage result lives under a content-addressed path derived from the
inputs that determine it, so re-running a manifest only computes what is
missing and reproduces byte-identical reports.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from rcorl.collect import CollectionConfig, collect_rc_datasets
from rcorl.datasets import DIFFICULTIES, load_dataset, save_dataset
from rcorl.envs import ENV_IDS, POINT_REACH_DIMS, env_manifest, full_spec, make_feature_spec
from rcorl.evaluation import (
    LAST_ROUNDS,
    ReferenceScores,
    RolloutEvaluator,
    compute_reference_scores,
    final_score,
    normalized_score,
)
from rcorl.exceptions import ContractError, RcorlError
from rcorl.policies import load_policy, save_policy

log = logging.getLogger(__name__)

CACHE_SCHEMA = 1
DEFAULT_CACHE = Path.home() / ".cache" / "rcorl"
ZERO_DENOMINATOR = 1e-9

CONTINUOUS_ALGOS = ("teacher", "baseline", "transfer_0.5_0.5", "transfer_0.0_1.0", "true_bc", "predictive")
DISCRETE_ALGOS = ("teacher", "baseline", "cql_transfer_0.8", "cql_transfer_0.95_w32")
_TRANSFER = re.compile(r"^transfer_(\d+(?:\.\d+)?)_(\d+(?:\.\d+)?)$")
_CQL_TRANSFER = re.compile(r"^cql_transfer_(\d+(?:\.\d+)?)(?:_w(\d+))?$")


def cache_root(override=None) -> Path:
    if os.environ.get("RCORL_CACHE_DIR"):
        return Path(os.environ["RCORL_CACHE_DIR"])
    return Path(override) if override else DEFAULT_CACHE


def stable_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def content_key(*parts) -> str:
    return hashlib.sha256(stable_json([CACHE_SCHEMA, *parts]).encode("utf-8")).hexdigest()[:24]


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


@dataclass
class ExperimentManifest:
    env_id: str = "point_reach"
    constrained_dims: list = field(default_factory=lambda: list(POINT_REACH_DIMS))
    mask_seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    difficulties: list = field(default_factory=lambda: list(DIFFICULTIES))
    algo_seeds: list = field(default_factory=lambda: [0, 1, 2])
    algorithms: list = field(default_factory=lambda: ["teacher", "baseline", "transfer_0.5_0.5", "transfer_0.0_1.0"])
    collection: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    reference: dict = field(default_factory=dict)
    output_dir: str = "report"
    cache_dir: str | None = None
    workers: int = 1

    def __post_init__(self):
        if self.env_id not in ENV_IDS:
            raise ContractError(f"unknown env_id {self.env_id!r}")
        n = env_manifest(self.env_id)["full_dim"]
        if self.env_id == "grid_pix":
            self.constrained_dims = [n]
        for d in self.constrained_dims:
            if not 1 <= int(d) <= n:
                raise ContractError(f"constrained dim {d} invalid for {self.env_id}")
        for name in ("mask_seeds", "algo_seeds"):
            if any(int(s) < 0 for s in getattr(self, name)):
                raise ContractError(f"{name} must be non-negative integers")
        for d in self.difficulties:
            if d not in DIFFICULTIES:
                raise ContractError(f"unknown difficulty {d!r}")
        for a in self.algorithms:
            algorithm_kind(self.env_id, a)
        if int(self.workers) < 1:
            raise ContractError("workers must be >= 1")
        CollectionConfig(**self.collection)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentManifest":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown manifest keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentManifest":
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        if path.suffix == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:
                import tomli as tomllib
            return cls.from_dict(tomllib.loads(text))
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        return asdict(self)

    def content_hash(self) -> str:
        """Hash of everything that affects results (not output location or worker count)."""
        d = self.to_dict()
        for k in ("output_dir", "cache_dir", "workers"):
            d.pop(k)
        return hashlib.sha256(stable_json(d).encode("utf-8")).hexdigest()[:16]


def algorithm_kind(env_id: str, name: str) -> dict:
    """Parse an algorithm name into estimator settings."""
    discrete = env_id == "grid_pix"
    if name in ("teacher", "baseline"):
        return {"kind": name}
    if discrete:
        m = _CQL_TRANSFER.match(name)
        if m:
            beta = float(m.group(1))
            if not 0.0 < beta <= 1.0:
                raise ContractError(f"{name}: beta must lie in (0, 1]")
            return {"kind": "cql_transfer", "beta": beta, "student_width": int(m.group(2)) if m.group(2) else None}
    else:
        m = _TRANSFER.match(name)
        if m:
            b1, b2 = float(m.group(1)), float(m.group(2))
            if abs(b1 + b2 - 1.0) > 1e-12:
                raise ContractError(f"{name}: beta1 + beta2 must equal 1")
            return {"kind": "transfer", "beta1": b1, "beta2": b2}
        if name in ("true_bc", "predictive"):
            return {"kind": name}
    raise ContractError(f"unknown algorithm {name!r} for {env_id}")


# ---------------------------------------------------------------------------
# Stage execution
# ---------------------------------------------------------------------------


def _filter_params(est, params: dict) -> dict:
    valid = est.get_params(deep=False)
    return {k: (tuple(v) if isinstance(v, list) else v) for k, v in params.items() if k in valid}


def make_estimator(env_id: str, name: str, training: dict, seed: int, teacher=None):
    from rcorl.continuous import TD3BC, PredictiveTD3BC, TransferTD3BC, TrueBC
    from rcorl.discrete import DiscreteCQL

    info = algorithm_kind(env_id, name)
    kind = info["kind"]
    if env_id == "grid_pix":
        if kind == "teacher":
            est = DiscreteCQL(features="full", beta=0.0)
        elif kind == "baseline":
            est = DiscreteCQL(beta=0.0)
        else:
            est = DiscreteCQL(teacher=teacher, beta=info["beta"], student_width=info["student_width"])
    elif kind == "teacher":
        est = TD3BC(features="full")
    elif kind == "baseline":
        est = TD3BC()
    elif kind == "transfer":
        est = TransferTD3BC(teacher=teacher, beta1=info["beta1"], beta2=info["beta2"])
    elif kind == "true_bc":
        est = TrueBC(teacher=teacher)
    else:
        inner = TD3BC()
        inner.set_params(**_filter_params(inner, training), random_state=seed)
        return PredictiveTD3BC(agent=inner, random_state=seed)
    est.set_params(**_filter_params(est, training))
    est.set_params(random_state=seed)
    return est


def needs_teacher(env_id: str, name: str) -> bool:
    return algorithm_kind(env_id, name)["kind"] in ("transfer", "true_bc", "cql_transfer")


class StageCache:
    def __init__(self, root: Path):
        self.root = Path(root)

    def path(self, stage: str, key: str, suffix: str) -> Path:
        return self.root / stage / f"{key}{suffix}"

    def read_json(self, stage: str, key: str):
        p = self.path(stage, key, ".json")
        return json.loads(p.read_text(encoding="utf-8")) if p.exists() else None

    def write_json(self, stage: str, key: str, obj) -> None:
        p = self.path(stage, key, ".json")
        p.parent.mkdir(parents=True, exist_ok=True)
        tmp = p.with_name(p.name + ".tmp")
        tmp.write_text(stable_json(obj), encoding="utf-8")
        tmp.replace(p)


def reference_scores(manifest: ExperimentManifest, root: Path) -> ReferenceScores:
    ref = dict(manifest.reference)
    seed = int(ref.pop("seed", 0))
    online_steps = ref.pop("online_steps", None)
    return compute_reference_scores(manifest.env_id, seed, root / "refs", online_steps, **ref)


def cell_datasets(manifest: ExperimentManifest, dim: int, mask_seed: int, cache: StageCache) -> tuple[str, dict]:
    spec = make_feature_spec(manifest.env_id, dim, mask_seed)
    key = content_key("datasets", manifest.env_id, spec.to_dict(), mask_seed, manifest.collection)
    paths = {d: cache.path("datasets", key, f".{d}.bin") for d in DIFFICULTIES}
    if all(p.exists() for p in paths.values()):
        return key, {d: load_dataset(paths[d]) for d in DIFFICULTIES}
    tiers = collect_rc_datasets(manifest.env_id, spec, mask_seed, CollectionConfig(**manifest.collection))
    for d, p in paths.items():
        save_dataset(tiers[d], p)
    # reload so fresh and cached runs see the same bytes
    return key, {d: load_dataset(paths[d]) for d in DIFFICULTIES}


def train_stage(manifest: ExperimentManifest, name: str, dataset, dataset_key: str, seed: int,
                cache: StageCache, teacher_key: str | None = None) -> tuple[str, dict]:
    """Train and evaluate one agent; returns ``(stage key, result)``."""
    key = content_key("train", dataset_key, dataset.difficulty, name, seed, manifest.training, teacher_key)
    result = cache.read_json("train", key)
    policy_path = cache.path("train", key, ".policy.bin")
    if result is not None and policy_path.exists():
        return key, result
    teacher = None
    if teacher_key is not None:
        teacher = load_policy(cache.path("train", teacher_key, ".policy.bin"))
    est = make_estimator(manifest.env_id, name, manifest.training, seed, teacher)
    kind = algorithm_kind(manifest.env_id, name)["kind"]
    eval_spec = full_spec(manifest.env_id) if kind == "teacher" else dataset.feature_spec
    evaluator = RolloutEvaluator(manifest.env_id, eval_spec, seed)
    est.fit(dataset, evaluator=evaluator)
    save_policy(est, policy_path, {"algorithm": name, "seed": seed})
    trace = [[int(s), float(v)] for s, v in est.eval_trace_]
    score, rounds = final_score([v for _, v in trace])
    result = {"eval_trace": trace, "final_score": score, "rounds_used": rounds}
    cache.write_json("train", key, result)
    return key, result


def run_cell(manifest_dict: dict, refs_json: str, dim: int, mask_seed: int, root: str) -> dict:
    """All difficulties, seeds and algorithms for one (dim, mask_seed) cell."""
    manifest = ExperimentManifest.from_dict(manifest_dict)
    refs = ReferenceScores.from_json(refs_json)
    cache = StageCache(Path(root))
    mhash = manifest.content_hash()
    rows, errors = [], []
    if not manifest.algorithms:
        return {"rows": rows, "errors": errors}
    try:
        dataset_key, tiers = cell_datasets(manifest, dim, mask_seed, cache)
    except RcorlError as exc:
        return {"rows": [], "errors": [{"dim": dim, "mask_seed": mask_seed, "stage": "collect", "error": str(exc)}]}
    for difficulty in manifest.difficulties:
        dataset = tiers[difficulty]
        for seed in manifest.algo_seeds:
            teacher_key = None
            needed = any(needs_teacher(manifest.env_id, a) for a in manifest.algorithms)
            order = list(manifest.algorithms)
            if needed and "teacher" not in order:
                order = ["teacher"] + order
            for name in sorted(order, key=lambda a: a != "teacher"):
                try:
                    if name != "teacher" and needs_teacher(manifest.env_id, name) and teacher_key is None:
                        raise RcorlError("teacher stage failed")
                    key, result = train_stage(manifest, name, dataset, dataset_key, int(seed), cache,
                                              teacher_key if needs_teacher(manifest.env_id, name) else None)
                except (RcorlError, ArithmeticError) as exc:
                    errors.append({"dim": dim, "mask_seed": mask_seed, "stage": f"{difficulty}/{name}/seed={seed}",
                                   "error": str(exc)})
                    continue
                if name == "teacher":
                    teacher_key = key
                if name not in manifest.algorithms:
                    continue
                rows.append({
                    "env_id": manifest.env_id,
                    "difficulty": difficulty,
                    "dim": int(dim),
                    "mask_seed": int(mask_seed),
                    "algorithm": name,
                    "algo_seed": int(seed),
                    "raw_score": result["final_score"],
                    "normalized_score": normalized_score(result["final_score"], refs),
                    "rounds_used": result["rounds_used"],
                    "short_run": result["rounds_used"] < LAST_ROUNDS,
                    "manifest_hash": mhash,
                })
    return {"rows": rows, "errors": errors}


def run_pipeline(manifest: ExperimentManifest) -> Path:
    """Run every cell of ``manifest`` and write the report directory.

    Returns the output directory. ``errors.csv`` lists failed stages; it is
    header-only when everything succeeded.
    """
    root = cache_root(manifest.cache_dir)
    refs = reference_scores(manifest, root)
    cells = [(int(d), int(m)) for d in manifest.constrained_dims for m in manifest.mask_seeds]
    args = [(manifest.to_dict(), refs.to_json(), d, m, str(root)) for d, m in cells]
    if manifest.workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=int(manifest.workers)) as pool:
            results = list(pool.map(run_cell, *zip(*args)))
    else:
        results = [run_cell(*a) for a in args]
    rows = [r for res in results for r in res["rows"]]
    errors = [e for res in results for e in res["errors"]]
    out = Path(manifest.output_dir)
    write_report(out, rows, errors, manifest, refs)
    return out


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------


@dataclass
class Table:
    name: str
    columns: list
    rows: list = field(default_factory=list)

    def records(self) -> list[dict]:
        return [dict(zip(self.columns, r)) for r in self.rows]


RUN_COLUMNS = ["env_id", "difficulty", "dim", "mask_seed", "algorithm", "algo_seed", "raw_score",
               "normalized_score", "rounds_used", "short_run", "manifest_hash"]
CELL_COLUMNS = ["env_id", "difficulty", "dim", "mask_seed", "algorithm", "n_seeds", "mean_normalized",
                "std_normalized", "vs_baseline_pct", "vs_teacher_pct", "beats_baseline", "short_run", "flag",
                "manifest_hash"]
REPORT_COLUMNS = ["env_id", "difficulty", "dim", "algorithm", "n_cells", "mean_normalized", "std_across_seeds",
                  "vs_baseline_pct", "vs_teacher_pct", "recovered_pct", "flag", "manifest_hash"]
SUMMARY_COLUMNS = ["env_id", "algorithm", "n_cells", "success_pct", "mean_improvement_pct", "n_flagged",
                   "manifest_hash"]
ERROR_COLUMNS = ["dim", "mask_seed", "stage", "error"]


def pct_change(value: float, reference: float) -> float:
    """``100 * (value - reference) / |reference|``; nan when the reference is ~0."""
    if reference is None or not math.isfinite(reference) or abs(reference) < ZERO_DENOMINATOR:
        return math.nan
    return 100.0 * (value - reference) / abs(reference)


def _order(env_id: str, algorithms) -> list:
    return sorted(set(algorithms), key=lambda a: (a != "teacher", a != "baseline", a))


def summarize(rows: list[dict], manifest_hash: str = "") -> dict[str, Table]:
    """Per-cell, per-(difficulty, dim) and per-algorithm tables.

    A cell is (difficulty, dim, mask_seed); its score for an algorithm is the
    mean normalised score over algorithm seeds. Success means strictly
    beating the baseline's cell score.
    """
    runs = Table("runs", RUN_COLUMNS, [[r[c] for c in RUN_COLUMNS] for r in sorted(rows, key=_run_sort)])
    by_cell: dict[tuple, dict[str, list]] = {}
    short: dict[tuple, bool] = {}
    for r in rows:
        cell = (r["env_id"], r["difficulty"], r["dim"], r["mask_seed"])
        by_cell.setdefault(cell, {}).setdefault(r["algorithm"], []).append((r["algo_seed"], r["normalized_score"]))
        short[cell + (r["algorithm"],)] = short.get(cell + (r["algorithm"],), False) or bool(r["short_run"])

    cell_rows = []
    cell_mean: dict[tuple, float] = {}
    for cell in sorted(by_cell, key=_cell_sort):
        algos = by_cell[cell]
        means = {a: float(np.mean([v for _, v in vals])) for a, vals in algos.items()}
        for a in _order(cell[0], algos):
            scores = [v for _, v in sorted(algos[a])]
            base, teach = means.get("baseline"), means.get("teacher")
            vs_base = pct_change(means[a], base) if base is not None else math.nan
            vs_teacher = pct_change(means[a], teach) if teach is not None else math.nan
            flags = []
            if base is None:
                flags.append("missing_baseline")
            elif math.isnan(vs_base):
                flags.append("zero_baseline")
            if teach is None:
                flags.append("missing_teacher")
            elif math.isnan(vs_teacher):
                flags.append("zero_teacher")
            if short[cell + (a,)]:
                flags.append("short_run")
            beats = base is not None and means[a] > base
            cell_mean[cell + (a,)] = means[a]
            cell_rows.append([*cell, a, len(scores), means[a], float(np.std(scores)), vs_base, vs_teacher,
                              beats, short[cell + (a,)], ";".join(flags), manifest_hash])
    cells = Table("cells", CELL_COLUMNS, cell_rows)

    # (difficulty, dim) aggregates over mask seeds
    groups: dict[tuple, dict[str, dict]] = {}
    for r in rows:
        g = (r["env_id"], r["difficulty"], r["dim"])
        groups.setdefault(g, {}).setdefault(r["algorithm"], {}).setdefault(r["algo_seed"], []).append(r["normalized_score"])
    report_rows = []
    for g in sorted(groups, key=lambda k: (k[0], DIFFICULTIES.index(k[1]), k[2])):
        algos = groups[g]
        mean_of = {}
        for a, per_seed in algos.items():
            mean_of[a] = float(np.mean([cell_mean[(g[0], g[1], g[2], m, a)] for m in _masks(by_cell, g, a)]))
        vs_teacher_of = {a: pct_change(mean_of[a], mean_of.get("teacher")) if "teacher" in mean_of else math.nan
                         for a in mean_of}
        for a in _order(g[0], algos):
            seed_means = [float(np.mean(v)) for _, v in sorted(algos[a].items())]
            base = mean_of.get("baseline")
            vs_base = pct_change(mean_of[a], base) if base is not None else math.nan
            recovered = vs_teacher_of[a] - vs_teacher_of["baseline"] if "baseline" in vs_teacher_of else math.nan
            flags = []
            if base is None:
                flags.append("missing_baseline")
            if "teacher" not in mean_of:
                flags.append("missing_teacher")
            if any(math.isnan(x) for x in (vs_base, vs_teacher_of[a])) and not flags:
                flags.append("zero_denominator")
            report_rows.append([*g, a, len(_masks(by_cell, g, a)), mean_of[a], float(np.std(seed_means)), vs_base,
                                vs_teacher_of[a], recovered, ";".join(flags), manifest_hash])
    report = Table("vs_teacher", REPORT_COLUMNS, report_rows)

    # success rate and mean improvement over baseline, across all cells
    agg: dict[tuple, list] = {}
    flagged: dict[tuple, int] = {}
    for row in cells.records():
        if row["algorithm"] == "baseline":
            continue
        k = (row["env_id"], row["algorithm"])
        if "missing_baseline" in row["flag"] or "zero_baseline" in row["flag"]:
            flagged[k] = flagged.get(k, 0) + 1
            agg.setdefault(k, [])
            continue
        agg.setdefault(k, []).append((row["beats_baseline"], row["vs_baseline_pct"]))
    summary_rows = []
    for k in sorted(agg, key=lambda k: (k[0], _order(k[0], [a for _, a in agg]).index(k[1]))):
        vals = agg[k]
        n = len(vals)
        success = 100.0 * sum(b for b, _ in vals) / n if n else math.nan
        improvement = float(np.mean([p for _, p in vals])) if n else math.nan
        summary_rows.append([k[0], k[1], n, success, improvement, flagged.get(k, 0), manifest_hash])
    summary = Table("summary", SUMMARY_COLUMNS, summary_rows)
    return {"runs": runs, "cells": cells, "vs_teacher": report, "summary": summary}


def _masks(by_cell, g, algorithm) -> list:
    return sorted(c[3] for c, algos in by_cell.items() if c[:3] == g and algorithm in algos)


def _run_sort(r: dict):
    return (r["env_id"], DIFFICULTIES.index(r["difficulty"]), r["dim"], r["mask_seed"], r["algorithm"], r["algo_seed"])


def _cell_sort(c: tuple):
    return (c[0], DIFFICULTIES.index(c[1]), c[2], c[3])


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else f"{float(v):.6g}"
    return str(v)


def parse_value(text: str):
    if text in ("true", "false"):
        return text == "true"
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def table_csv(table: Table) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(table.columns)
    for row in table.rows:
        writer.writerow([format_value(v) for v in row])
    return buf.getvalue()


def read_csv_table(path) -> Table:
    path = Path(path)
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        columns = next(reader)
        rows = [[parse_value(v) for v in row] for row in reader]
    return Table(path.stem, columns, rows)


def _json_value(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return None if math.isnan(v) else float(v)
    return v


def emit_csv(tables: dict[str, Table], path) -> list[Path]:
    """Write ``<name>.csv`` and ``<name>.json`` for every table into directory ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, table in tables.items():
        csv_path = out / f"{name}.csv"
        csv_path.write_text(table_csv(table), encoding="utf-8")
        json_path = out / f"{name}.json"
        mirror = {"columns": table.columns, "rows": [[_json_value(v) for v in r] for r in table.rows]}
        json_path.write_text(json.dumps(mirror, sort_keys=True, indent=1) + "\n", encoding="utf-8")
        written += [csv_path, json_path]
    return written


def write_report(out: Path, rows: list[dict], errors: list[dict], manifest: ExperimentManifest,
                 refs: ReferenceScores) -> None:
    mhash = manifest.content_hash()
    tables = summarize(rows, mhash)
    err_rows = sorted(errors, key=lambda e: (e["dim"], e["mask_seed"], e["stage"]))
    tables["errors"] = Table("errors", ERROR_COLUMNS, [[e[c] for c in ERROR_COLUMNS] for e in err_rows])
    emit_csv(tables, out)
    meta = {"manifest": manifest.to_dict() | {"output_dir": None, "cache_dir": None, "workers": None},
            "manifest_hash": mhash, "references": json.loads(refs.to_json())}
    (out / "manifest.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def load_rows(out) -> list[dict]:
    return [dict(zip(RUN_COLUMNS, r)) for r in json.loads((Path(out) / "runs.json").read_text())["rows"]]


def report_succeeded(out) -> bool:
    return len(json.loads((Path(out) / "errors.json").read_text())["rows"]) == 0
