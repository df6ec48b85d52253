"""Acceptance criteria, one test each; every test records a pass/fail line in the terminal summary."""
import math
import time

import numpy as np
import pytest

from _oracles import gradient_check
from conftest import ACCEPTANCE_LINES
from rcorl.continuous import TD3BC, TransferTD3BC
from rcorl.datasets import DIFFICULTIES
from rcorl.discrete import DiscreteCQL, cql_gap, cql_loss
from rcorl.evaluation import FittedQEvaluation, normalized_score, random_policy_score
from rcorl.harness import ExperimentManifest, StageCache, cell_datasets, read_csv_table, run_pipeline
from test_discrete import _batch, _linear_agent, _reference_cql
from test_evaluation import _AlwaysRight, _chain_dataset, _chain_truth

ACCEPTANCE_GRID = {
    "env_id": "point_reach",
    "constrained_dims": [5, 7],
    "mask_seeds": [0, 1, 2, 3, 4],
    "difficulties": ["medium_replay"],
    "algo_seeds": [0, 1, 2],
    "algorithms": ["teacher", "baseline", "transfer_0.0_1.0"],
    "collection": {"online_steps": 20000, "eval_every": 2000, "size_budget": 10000, "batch_size": 64},
    "training": {"n_steps": 8000, "batch_size": 64, "eval_every": 800},
    "reference": {"online_steps": 20000, "batch_size": 64},
}
# criterion 9 covers every supported constrained dim
QUALITY_DIMS = [5, 7, 9, 10]
GRID_CPU_LIMIT = 30 * 60


def record(n, ok, detail):
    ACCEPTANCE_LINES.append((n, f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"))
    assert ok, detail


@pytest.fixture(scope="module")
def grid(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    manifest = ExperimentManifest.from_dict({**ACCEPTANCE_GRID, "output_dir": str(root / "report"),
                                             "cache_dir": str(root / "cache")})
    start = time.process_time()
    out = run_pipeline(manifest)
    cpu = time.process_time() - start
    return {"manifest": manifest, "out": out, "cpu": cpu, "root": root}


def _cell_means(out, algorithm):
    rows = read_csv_table(out / "cells.csv").records()
    return {(r["dim"], r["mask_seed"]): r["mean_normalized"] for r in rows if r["algorithm"] == algorithm}


def _gap_to_teacher(out, algorithm):
    rows = read_csv_table(out / "vs_teacher.csv").records()
    return float(np.mean([r["vs_teacher_pct"] for r in rows if r["algorithm"] == algorithm]))


def test_criterion_1_gradient_oracle():
    start = time.perf_counter()
    worst = max(gradient_check(seed) for seed in range(50))
    elapsed = time.perf_counter() - start
    record(1, worst < 1e-4 and elapsed < 10, f"worst relative error {worst:.2e} over 50 compositions in {elapsed:.1f} s")


def test_criterion_2_transfer_degenerates_to_td3bc(point_dataset):
    start = time.perf_counter()
    teacher = TD3BC(features="full", n_steps=10, random_state=1).fit(point_dataset)
    plain = TD3BC(n_steps=100, random_state=7).fit(point_dataset)
    transfer = TransferTD3BC(teacher=teacher, beta1=1.0, beta2=0.0, n_steps=100, random_state=7).fit(point_dataset)
    worst = 0.0
    for name, net in plain.agent_.networks().items():
        for p, q in zip(net.parameters(), transfer.agent_.networks()[name].parameters()):
            worst = max(worst, float(np.max(np.abs(p - q))))
    elapsed = time.perf_counter() - start
    record(2, worst <= 1e-12 and elapsed < 30, f"max parameter difference {worst:.1e} after 100 steps in {elapsed:.1f} s")


def test_criterion_3_discrete_limits(grid_dataset):
    start = time.perf_counter()
    est = DiscreteCQL(beta=0.0, n_steps=500, random_state=2).fit(grid_dataset)
    ref = _reference_cql(grid_dataset, 500, 2, (64, 64), 256)
    bit_match = all(np.array_equal(p, r) for p, r in zip(est.agent_.q.parameters(), ref.parameters()))

    teacher = DiscreteCQL(features="full", n_steps=50, random_state=0).fit(grid_dataset)
    mismatched = []

    def check(step, agent, info):
        batch, t_next = info["batch"], info["teacher_next_q"]
        a_teacher = np.argmax(t_next, axis=1)
        boot = agent.q_target.forward(batch["next_obs"])[np.arange(len(a_teacher)), a_teacher]
        want = batch["rewards"] + 0.99 * (1 - batch["terminals"]) * boot
        mismatched.append(int(np.sum(info["y"] != want)))

    DiscreteCQL(teacher=teacher, beta=1.0, n_steps=500, random_state=2).fit(grid_dataset, callback=check)
    elapsed = time.perf_counter() - start
    ok = bit_match and len(mismatched) == 500 and sum(mismatched) == 0 and elapsed < 60
    record(3, ok, f"beta=0 bit match {bit_match}; beta=1 rows off teacher argmax {sum(mismatched)} "
                  f"over {len(mismatched)} batches; {elapsed:.1f} s")


def test_criterion_4_cql_hand_oracle():
    agent = _linear_agent([[1.0, 2.0, 3.0], [0.0, -1.0, 4.0]])
    batch = _batch([0, 1], [0, 0], [0, 0], actions=[0, 2], n_states=2)
    hand = 0.5 * ((math.log(math.exp(1) + math.exp(2) + math.exp(3)) - 1.0)
                  + (math.log(1.0 + math.exp(-1) + math.exp(4)) - 4.0)) / 2
    err = abs(cql_loss(agent, batch, 0.5) - hand)
    uniform = 1.7 * cql_gap(np.full((4, 6), -2.5), [0, 1, 2, 5])
    exact = uniform == 1.7 * math.log(6)
    record(4, err <= 1e-10 and exact, f"hand table error {err:.1e}; uniform case equals alpha*log(A) exactly: {exact}")


def test_criterion_5_fqe_oracle():
    start = time.perf_counter()
    fqe = FittedQEvaluation(_AlwaysRight(), gamma=0.9, iterations=200, q_model="linear").fit(_chain_dataset())
    err = abs(fqe.estimate_ - _chain_truth(0.9))
    elapsed = time.perf_counter() - start
    record(5, err < 0.05 and elapsed < 30, f"|FQE - DP| = {err:.2e} after 200 iterations in {elapsed:.2f} s")


def test_criterion_6_normalized_score_endpoints(grid):
    refs = read_refs(grid["out"])
    again = random_policy_score(refs.env_id, refs.seeds["random_round_seed"])
    low = normalized_score(again, refs)
    high = normalized_score(refs.expert_score, refs)
    record(6, abs(low) <= 1e-9 and abs(high - 100) <= 1e-9,
           f"random policy {low:.2e}, expert reference {high:.10f}")


def read_refs(out):
    import json

    from rcorl.evaluation import ReferenceScores

    return ReferenceScores(**json.loads((out / "manifest.json").read_text())["references"])


def test_criterion_7_teacher_student_gap(grid):
    teacher, baseline = _cell_means(grid["out"], "teacher"), _cell_means(grid["out"], "baseline")
    gap = float(np.mean(list(teacher.values())) - np.mean(list(baseline.values())))
    cpu = grid["cpu"]
    record(7, gap >= 10 and cpu <= GRID_CPU_LIMIT and len(teacher) == 10,
           f"teacher minus baseline {gap:.1f} normalized points over {len(teacher)} cells x 3 seeds; "
           f"grid CPU {cpu / 60:.1f} min")


def test_criterion_8_transfer_beats_baseline(grid):
    transfer, baseline = _cell_means(grid["out"], "transfer_0.0_1.0"), _cell_means(grid["out"], "baseline")
    wins = sum(transfer[c] > baseline[c] for c in baseline)
    share = wins / len(baseline)
    gap_t, gap_b = _gap_to_teacher(grid["out"], "transfer_0.0_1.0"), _gap_to_teacher(grid["out"], "baseline")
    record(8, share >= 0.6 and gap_t > gap_b,
           f"transfer beats baseline in {wins}/{len(baseline)} cells; mean % vs teacher: transfer {gap_t:+.1f}, "
           f"baseline {gap_b:+.1f}")


def test_criterion_9_dataset_quality_ordering(grid):
    manifest = grid["manifest"]
    cache = StageCache(grid["root"] / "cache")
    violations, cells = [], 0
    for dim in QUALITY_DIMS:
        for mask_seed in manifest.mask_seeds:
            _, tiers = cell_datasets(manifest, dim, mask_seed, cache)
            means = [float(np.mean(tiers[d].episode_returns())) for d in reversed(DIFFICULTIES)]
            cells += 1
            if not all(a > b for a, b in zip(means, means[1:])):
                violations.append((dim, mask_seed, [round(m, 1) for m in means]))
    allowed = cells // 20
    record(9, len(violations) <= allowed,
           f"{len(violations)} ordering violations in {cells} cells (allowed {allowed}): {violations}")


def test_criterion_10_rerun_is_byte_identical(grid):
    first = grid["out"]
    manifest = ExperimentManifest.from_dict({**grid["manifest"].to_dict(), "output_dir": str(grid["root"] / "rerun")})
    start = time.perf_counter()
    second = run_pipeline(manifest)
    elapsed = time.perf_counter() - start
    names = sorted(p.name for p in first.iterdir())
    same = names == sorted(p.name for p in second.iterdir()) and all(
        (first / n).read_bytes() == (second / n).read_bytes() for n in names)
    record(10, same, f"{len(names)} report files byte-identical: {same}; rerun took {elapsed:.1f} s")
