import json

import numpy as np
import pytest

from rcorl import cli, collect
from rcorl.continuous import TD3BC, FeaturePredictor, PredictiveTD3BC, TransferTD3BC, TrueBC
from rcorl.datasets import save_dataset
from rcorl.discrete import DiscreteCQL
from rcorl.evaluation import ReferenceScores
from rcorl.exceptions import FormatError
from rcorl.policies import ActorPolicy, PredictivePolicy, QPolicy, load_policy, save_policy

FAST = {"n_steps": 20, "batch_size": 16, "hidden_sizes": (8, 8)}


@pytest.fixture(scope="module")
def teacher(point_dataset):
    return TD3BC(features="full", **FAST).fit(point_dataset)


def _same_outputs(a, b, obs):
    np.testing.assert_array_equal(np.asarray(a.predict(obs)), np.asarray(b.predict(obs)))


def test_actor_policies_round_trip(tmp_path, point_dataset, point_spec, teacher):
    obs = point_spec.project(point_dataset.observations[:5])
    for est in (TD3BC(**FAST).fit(point_dataset),
                TransferTD3BC(teacher=teacher, beta1=0.0, beta2=1.0, **FAST).fit(point_dataset),
                TrueBC(teacher=teacher, n_steps=20, batch_size=16, hidden_sizes=(8,)).fit(point_dataset)):
        back = load_policy(save_policy(est, tmp_path / "p.bin"))
        assert isinstance(back, ActorPolicy) and back.spec == point_spec
        _same_outputs(est, back, obs)


def test_teacher_round_trip_keeps_full_spec(tmp_path, point_dataset, teacher):
    back = load_policy(save_policy(teacher, tmp_path / "t.bin"))
    assert back.spec.is_full
    _same_outputs(teacher, back, point_dataset.observations[:5])
    est = TransferTD3BC(teacher=back, beta1=0.0, beta2=1.0, **FAST).fit(point_dataset)
    ref = TransferTD3BC(teacher=teacher, beta1=0.0, beta2=1.0, **FAST).fit(point_dataset)
    assert est.agent_.actor == ref.agent_.actor


def test_predictive_round_trip(tmp_path, point_dataset, point_spec):
    est = PredictiveTD3BC(agent=TD3BC(**FAST), predictor=FeaturePredictor(n_steps=50, hidden_sizes=(8,))).fit(
        point_dataset)
    back = load_policy(save_policy(est, tmp_path / "pr.bin"))
    assert isinstance(back, PredictivePolicy)
    _same_outputs(est, back, point_spec.project(point_dataset.observations[:5]))


def test_q_policy_round_trip(tmp_path, grid_dataset):
    est = DiscreteCQL(n_steps=5, batch_size=16, hidden_sizes=(8,)).fit(grid_dataset)
    back = load_policy(save_policy(est, tmp_path / "q.bin"))
    assert isinstance(back, QPolicy)
    obs = grid_dataset.feature_spec.project(grid_dataset.observations[:5])
    np.testing.assert_array_equal(back.q_values(obs), est.q_values(obs))


def test_dataset_file_is_not_a_policy(tmp_path, point_dataset):
    with pytest.raises(FormatError):
        load_policy(save_dataset(point_dataset, tmp_path / "d.bin"))


def test_cli_train_and_evaluate(tmp_path, point_dataset, capsys):
    data = save_dataset(point_dataset, tmp_path / "d.bin")
    common = ["--dataset", str(data), "--steps", "30", "--batch-size", "16", "--eval-every", "10"]
    assert cli.main(["train", "--algo", "td3bc", "--spec", "full", *common, "--out", str(tmp_path / "t.bin")]) == 0
    assert cli.main(["train", "--algo", "transfer", "--beta1", "0", "--beta2", "1", "--teacher",
                     str(tmp_path / "t.bin"), "--evaluate", *common, "--out", str(tmp_path / "s.bin")]) == 0
    assert load_policy(tmp_path / "s.bin").spec == point_dataset.feature_spec

    refs = tmp_path / "refs.json"
    refs.write_text(ReferenceScores("point_reach", -200.0, -20.0, {}, "fixed").to_json())
    capsys.readouterr()
    assert cli.main(["evaluate", "--policy", str(tmp_path / "s.bin"), "--refs", str(refs), "--rounds", "2",
                     "--out", str(tmp_path / "e.json")]) == 0
    result = json.loads((tmp_path / "e.json").read_text())
    assert len(result["round_scores"]) == 2
    assert result["normalized_score"] == pytest.approx(100 * (result["score"] + 200.0) / 180.0)

    capsys.readouterr()
    assert cli.main(["evaluate", "--policy", str(tmp_path / "s.bin"), "--mode", "fqe", "--dataset", str(data),
                     "--iterations", "2"]) == 0
    fqe = json.loads(capsys.readouterr().out)
    assert len(fqe["history"]) == 3 and fqe["history"][0] == 0.0


def test_cli_collect_wires_arguments(tmp_path, monkeypatch, point_dataset):
    seen = {}

    def fake(env_id, spec, difficulty, seed, size_budget=None, config=None):
        seen.update(env_id=env_id, spec=spec, difficulty=difficulty, seed=seed, budget=config.size_budget)
        return point_dataset

    monkeypatch.setattr(collect, "collect_rc_dataset", fake)
    out = tmp_path / "c.bin"
    assert cli.main(["collect", "--dim", "7", "--mask-seed", "3", "--difficulty", "expert", "--online-steps",
                     "4000", "--eval-every", "1000", "--size-budget", "123", "--out", str(out)]) == 0
    assert seen["spec"].dim == 7 and seen["spec"].mask_seed == 3
    assert (seen["seed"], seen["difficulty"], seen["budget"]) == (3, "expert", 123)
    assert out.exists()


def test_cli_reports_errors_with_exit_code_2(tmp_path, capsys):
    assert cli.main(["evaluate", "--policy", str(tmp_path / "missing.bin")]) == 2
    assert "rcorl: error:" in capsys.readouterr().err


def test_cli_report_recomputes_tables(tmp_path, capsys):
    from rcorl.harness import RUN_COLUMNS

    rows = [["point_reach", "medium", 5, 0, a, 0, s, s, 10, False, "h"]
            for a, s in (("teacher", 80.0), ("baseline", 40.0), ("transfer_0.0_1.0", 50.0))]
    (tmp_path / "runs.json").write_text(json.dumps({"columns": RUN_COLUMNS, "rows": rows}))
    assert cli.main(["report", "--input", str(tmp_path), "--out", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "summary.csv").exists() and (tmp_path / "r" / "vs_teacher.json").exists()
    assert "transfer_0.0_1.0" in capsys.readouterr().out
