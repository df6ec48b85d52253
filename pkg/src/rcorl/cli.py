"""Command-line entry point: ``rcorl {collect,refs,train,evaluate,grid,report}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from rcorl.exceptions import RcorlError


def _cmd_collect(args) -> int:
    from rcorl.collect import CollectionConfig, collect_rc_dataset
    from rcorl.datasets import save_dataset
    from rcorl.envs import make_feature_spec

    spec = make_feature_spec(args.env, args.dim, args.mask_seed)
    cfg = CollectionConfig(online_steps=args.online_steps, eval_every=args.eval_every, size_budget=args.size_budget)
    seed = args.mask_seed if args.seed is None else args.seed
    dataset = collect_rc_dataset(args.env, spec, args.difficulty, seed, config=cfg)
    save_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} transitions to {args.out}")
    return 0


def _cmd_refs(args) -> int:
    from rcorl.evaluation import compute_reference_scores
    from rcorl.harness import cache_root

    refs = compute_reference_scores(args.env, args.seed, cache_root() / "refs", args.online_steps)
    text = refs.to_json()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text)
    return 0


def _build_estimator(args, dataset):
    from rcorl.continuous import TD3BC, PredictiveTD3BC, TransferTD3BC, TrueBC
    from rcorl.discrete import DiscreteCQL
    from rcorl.policies import load_policy

    teacher = load_policy(args.teacher) if args.teacher else None
    common = {"n_steps": args.steps, "batch_size": args.batch_size, "eval_every": args.eval_every,
              "random_state": args.seed}
    if args.algo == "td3bc":
        return TD3BC(features=args.spec, **common)
    if args.algo == "transfer":
        return TransferTD3BC(teacher=teacher, beta1=args.beta1, beta2=args.beta2, features=args.spec, **common)
    if args.algo == "truebc":
        return TrueBC(teacher=teacher, features=args.spec, **common)
    if args.algo == "predictive":
        return PredictiveTD3BC(agent=TD3BC(**common), random_state=args.seed)
    return DiscreteCQL(teacher=teacher, beta=args.beta, student_width=args.student_width, features=args.spec, **common)


def _cmd_train(args) -> int:
    from rcorl.datasets import load_dataset
    from rcorl.envs import full_spec
    from rcorl.evaluation import RolloutEvaluator
    from rcorl.policies import save_policy

    dataset = load_dataset(args.dataset)
    est = _build_estimator(args, dataset)
    evaluator = None
    if args.evaluate:
        env_id = dataset.env_manifest["env_id"]
        spec = full_spec(env_id) if args.spec == "full" else dataset.feature_spec
        evaluator = RolloutEvaluator(env_id, spec, args.seed)
    est.fit(dataset, evaluator=evaluator)
    trace = [[int(s), float(v)] for s, v in getattr(est, "eval_trace_", [])]
    save_policy(est, args.out, {"algorithm": args.algo, "seed": args.seed, "eval_trace": trace})
    print(f"wrote policy to {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    from rcorl.datasets import load_dataset
    from rcorl.evaluation import FittedQEvaluation, ReferenceScores, RolloutEvaluator, make_report
    from rcorl.policies import load_policy

    policy = load_policy(args.policy)
    out = {"policy": str(args.policy), "mode": args.mode}
    if args.mode == "rollout":
        if policy.spec.env_id is None:
            raise RcorlError("policy spec does not name its environment")
        evaluator = RolloutEvaluator(policy.spec.env_id, policy.spec, args.seed)
        refs = None
        if args.refs:
            refs = ReferenceScores.from_json(Path(args.refs).read_text(encoding="utf-8"))
        report = make_report([evaluator(policy, k) for k in range(args.rounds)], refs)
        out.update(round_scores=report.round_scores, score=report.final_score,
                   normalized_score=report.normalized_score)
    else:
        if not args.dataset:
            raise RcorlError("--mode fqe needs --dataset")
        dataset = load_dataset(args.dataset)
        if dataset.feature_spec != policy.spec:
            dataset = dataset.with_spec(policy.spec)
        fqe = FittedQEvaluation(policy=policy, iterations=args.iterations, random_state=args.seed).fit(dataset)
        out.update(estimate=fqe.estimate_, history=[float(v) for v in fqe.history_])
    text = json.dumps(out, sort_keys=True, indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def _cmd_grid(args) -> int:
    from rcorl.harness import ExperimentManifest, report_succeeded, run_pipeline

    manifest = ExperimentManifest.load(args.manifest)
    if args.out:
        manifest.output_dir = args.out
    if args.workers:
        manifest.workers = args.workers
    out = run_pipeline(manifest)
    ok = report_succeeded(out)
    print(f"report written to {out}{'' if ok else ' (some cells failed, see errors.csv)'}")
    return 0 if ok else 1


def _cmd_report(args) -> int:
    from rcorl.harness import ExperimentManifest, emit_csv, load_rows, summarize

    src = Path(args.input) if args.input else Path(ExperimentManifest.load(args.manifest).output_dir)
    rows = load_rows(src)
    mhash = rows[0]["manifest_hash"] if rows else ""
    tables = summarize(rows, mhash)
    emit_csv({k: v for k, v in tables.items() if k != "runs"}, args.out or src)
    for row in tables["summary"].records():
        print(f"{row['algorithm']}: success {row['success_pct']:.1f}% "
              f"mean improvement {row['mean_improvement_pct']:.2f}% over {row['n_cells']} cells")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rcorl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", help="collect one dataset tier with a constrained behaviour policy")
    p.add_argument("--env", default="point_reach", choices=["point_reach", "grid_pix"])
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--mask-seed", type=int, default=0)
    p.add_argument("--seed", type=int, default=None, help="collection seed (defaults to the mask seed)")
    p.add_argument("--difficulty", required=True, choices=["medium_replay", "medium", "medium_expert", "expert"])
    p.add_argument("--online-steps", type=int, default=60_000)
    p.add_argument("--eval-every", type=int, default=2_000)
    p.add_argument("--size-budget", type=int, default=50_000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_collect)

    p = sub.add_parser("refs", help="random and expert reference scores")
    p.add_argument("--env", default="point_reach", choices=["point_reach", "grid_pix"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--online-steps", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_refs)

    p = sub.add_parser("train", help="train an offline agent on a dataset file")
    p.add_argument("--algo", required=True, choices=["td3bc", "transfer", "truebc", "predictive", "cql"])
    p.add_argument("--dataset", required=True)
    p.add_argument("--spec", default="limited", choices=["full", "limited"])
    p.add_argument("--teacher", help="saved full-feature policy")
    p.add_argument("--beta1", type=float, default=0.5)
    p.add_argument("--beta2", type=float, default=0.5)
    p.add_argument("--beta", type=float, default=0.0, help="blend weight for --algo cql")
    p.add_argument("--student-width", type=int, default=None)
    p.add_argument("--steps", type=int, default=30_000)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--eval-every", type=int, default=1_000)
    p.add_argument("--evaluate", action="store_true", help="record rollout scores during training")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="score a saved policy by rollouts or FQE")
    p.add_argument("--policy", required=True)
    p.add_argument("--mode", default="rollout", choices=["rollout", "fqe"])
    p.add_argument("--dataset")
    p.add_argument("--refs")
    p.add_argument("--rounds", type=int, default=10)
    p.add_argument("--iterations", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("grid", help="run an experiment manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=_cmd_grid)

    p = sub.add_parser("report", help="recompute summary tables from runs.json")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--manifest")
    group.add_argument("--input")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (RcorlError, ValueError, OSError) as exc:
        print(f"rcorl: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
