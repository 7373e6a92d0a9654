"""
Command-line entry point: train, rollout, plan, eval and demo-gen.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or numerical error.
"""

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd

from src.ablation import METRIC_NAMES, check_ordering, collect_rows, eval_seeds, merge_rows, run_ablation
from src.checkpoint import load_checkpoint
from src.config import VARIANTS, RunConfig
from src.demos import generate_scripted_demos, load_demonstrations, save_demonstrations
from src.dough_env import DoughEnv, make_goal
from src.errors import (CheckpointVersionError, ConfigError, ContractError, EmptySegmentation, NumericalError,
                        ParseError, TrainingError)
from src.export import ReportExporter
from src.metrics import MetricReport
from src.planner import (POSE_COLUMNS, load_waypoints, plan_bimanual, save_trajectory, smoothness_report)
from src.run_dir import RunDirectory
from src.summary import training_summary
from src.trainer import PolicyRunner, Trainer, evaluate_policy, policy_from_checkpoint
from src.utils import load_environment_variables, setup_logging, torch_generator, write_json
from src.visualization import (create_learning_curves, create_metric_bar_chart, create_trajectory_chart,
                               save_figure, save_snapshot)

logger = logging.getLogger("dgform")

USAGE_ERRORS = (ConfigError, ParseError, CheckpointVersionError, ContractError, FileNotFoundError)
RUNTIME_ERRORS = (NumericalError, TrainingError, EmptySegmentation, np.linalg.LinAlgError)


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    return RunConfig.from_json(path)


def apply_overrides(config: RunConfig, args: argparse.Namespace) -> RunConfig:
    trainer = config.trainer
    planner = config.planner
    if getattr(args, "variant", None) is not None:
        trainer = dataclasses.replace(trainer, variant=args.variant)
    if getattr(args, "updates", None) is not None:
        trainer = dataclasses.replace(trainer, updates=args.updates)
    if getattr(args, "horizon", None) is not None:
        trainer = dataclasses.replace(trainer, horizon=args.horizon)
    if getattr(args, "points", None) is not None:
        planner = dataclasses.replace(planner, points=args.points)
    seed = config.seed if getattr(args, "seed", None) is None else args.seed
    out = getattr(args, "out", None) or config.output_dir
    return dataclasses.replace(config, trainer=trainer, planner=planner, seed=seed, output_dir=out).validate()


def open_run(command: str, args: argparse.Namespace, config: Optional[RunConfig] = None) -> RunDirectory:
    arguments = {k: v for k, v in sorted(vars(args).items()) if k != "handler"}
    out = getattr(args, "out", None) or (config.output_dir if config is not None else None)
    run = RunDirectory(command, arguments, path=out)
    run.create()
    logger.info("Writing %s artifacts to %s", command, run.path)
    return run


def try_save_figure(fig, path: Path) -> bool:
    try:
        save_figure(fig, path)
        return True
    except (ImportError, ValueError, RuntimeError) as e:
        logger.warning("Could not export %s: %s", path.name, e)
        return False


def cmd_train(args: argparse.Namespace) -> int:
    config = apply_overrides(load_config(args.config), args)
    demos = load_demonstrations(args.demos) if args.demos else None
    run = open_run("train", args, config)
    trainer = Trainer(config, demos=demos, output_dir=run.path)
    try:
        result = trainer.train()
    except TrainingError:
        run.file("checkpoint.json")
        run.finish("diverged")
        raise
    for name in ("metrics.csv", "checkpoint.json"):
        if (run.path / name).exists():
            run.file(name)
    summary = training_summary(result.history, result.alphas, config.trainer.variant, config.seed)
    write_json(summary, run.file("summary.json"))
    run.finish()
    logger.info("Training finished: %d updates, IoU trend %s", len(result.history), summary["trend"])
    return 0


def cmd_rollout(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    config = checkpoint.config
    if args.goal is not None:
        config = dataclasses.replace(config, env=dataclasses.replace(config.env, goal_radius=args.goal))
    model = policy_from_checkpoint(checkpoint)
    env = DoughEnv(config.env, make_goal("flat_disk", {"radius": config.env.goal_radius,
                                                       "volume": config.env.volume}, config.env))
    runner = PolicyRunner(model, checkpoint.variant, env, config.model)
    run = open_run("rollout", args)
    generator = None if args.deterministic else torch_generator(args.seed)

    state, obs = env.reset(args.seed)
    save_snapshot(obs.rgb, run.file("snapshots/period_00.png"))
    steps, periods = [], []
    done = False
    period = 0
    while not done:
        period += 1
        result = runner.period(state, args.horizon, generator, deterministic=args.deterministic)
        state, done = result.state, result.done
        for u in result.batch.actions:
            steps.append([len(steps), period] + list(runner.codec.to_poses(u).reshape(-1)))
        periods.append({"period": period, "steps": len(result.batch), "reward": float(result.batch.rewards.sum()),
                        "truncated": result.truncated, **env.metrics(state)})
        save_snapshot(env.render(state).rgb, run.file(f"snapshots/period_{period:02d}.png"))
    pd.DataFrame(steps, columns=["step", "period"] + POSE_COLUMNS).to_csv(run.file("trajectory.csv"), index=False)
    pd.DataFrame(periods).to_csv(run.file("periods.csv"), index=False)
    run.finish()
    logger.info("Rollout finished after %d periods, final IoU %.3f", period, periods[-1]["iou"])
    return 0


def cmd_plan(args: argparse.Namespace) -> int:
    config = apply_overrides(load_config(args.config), args)
    planner = config.planner
    if args.coordination_weight is not None:
        planner = dataclasses.replace(planner, coordination_weight=args.coordination_weight)
    waypoints = load_waypoints(args.waypoints)
    demos = load_demonstrations(args.demos)
    run = open_run("plan", args, config)
    plan = plan_bimanual(waypoints, demos, planner, seed=config.seed)
    save_trajectory(plan.trajectory, run.file("trajectory.csv"), run.file("trajectory.json"))
    write_json(smoothness_report(plan), run.file("smoothness.json"))
    traj = plan.trajectory
    fig = create_trajectory_chart(traj.timestamps, traj.left_pose, traj.right_pose)
    if try_save_figure(fig, run.path / "trajectory.png"):
        run.file("trajectory.png")
    run.finish()
    return 0


def _checkpoint_rows(paths: List[str], eval_count: int) -> List[dict]:
    rows = []
    for path in paths:
        checkpoint = load_checkpoint(path)
        model = policy_from_checkpoint(checkpoint)
        seeds = eval_seeds(checkpoint.config.seed, eval_count)
        report = MetricReport.from_episodes(evaluate_policy(model, checkpoint.variant, checkpoint.config, seeds))
        rows.append({"variant": checkpoint.variant, "seed": checkpoint.config.seed, "reward": report.reward_total,
                     "iou": report.iou, "sdf": report.sdf, "density": report.density, "wall_time_s": 0.0})
    return rows


def cmd_eval(args: argparse.Namespace) -> int:
    if not (args.checkpoint or args.runs or args.ablation):
        raise ConfigError("eval needs --checkpoint, --runs or --ablation")
    config = apply_overrides(load_config(args.config), args)
    if args.updates is not None:
        config = dataclasses.replace(config, ablation=dataclasses.replace(config.ablation, updates=args.updates))
    run = open_run("eval", args, config)
    rows, logs = [], {}
    if args.checkpoint:
        rows += _checkpoint_rows(args.checkpoint, config.ablation.eval_seeds)
    for runs_dir in args.runs or []:
        found = collect_rows(runs_dir)
        if not found:
            raise FileNotFoundError(f"No ablation rows found under {runs_dir}")
        rows += found
        for metrics in sorted(Path(runs_dir).glob("*/metrics.csv")):
            logs[metrics.parent.name] = pd.read_csv(metrics)
    if args.ablation:
        report = run_ablation(config, output_dir=run.path)
        rows += report.to_dict(orient="records")
        for metrics in sorted((run.path / "jobs").glob("*/metrics.csv")):
            logs[metrics.parent.name] = pd.read_csv(metrics)

    report = merge_rows(rows)
    ordered = check_ordering(report)
    exporter = ReportExporter()
    run.file("report.csv").write_text(exporter.export_to_csv(report), encoding="utf-8")
    analysis = {"ordering_ok": ordered, "rows": len(report)}
    run.file("report.json").write_text(exporter.export_to_json(report, analysis), encoding="utf-8")
    images = []
    for metric in METRIC_NAMES:
        path = run.path / f"{metric}.png"
        if try_save_figure(create_metric_bar_chart(report, metric), path):
            run.file(path.name)
            images.append(str(path))
    if logs:
        path = run.path / "learning_curves.png"
        if try_save_figure(create_learning_curves(logs, "iou"), path):
            run.file(path.name)
            images.append(str(path))
    run.file("report.pdf").write_bytes(exporter.export_to_pdf(report, analysis, images))
    run.finish()
    logger.info("Evaluation report with %d rows written to %s", len(report), run.path)
    return 0


def cmd_demo_gen(args: argparse.Namespace) -> int:
    config = apply_overrides(load_config(args.config), args)
    run = open_run("demo-gen", args, config)
    dataset = generate_scripted_demos(config.env, args.n, seed=config.seed)
    save_demonstrations(dataset, run.file("demos.jsonl"))
    run.finish()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dgform", description="Graph-based dough rolling policy learning")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train a policy variant")
    train.add_argument("--config")
    train.add_argument("--seed", type=int)
    train.add_argument("--updates", type=int)
    train.add_argument("--horizon", type=int)
    train.add_argument("--demos")
    train.add_argument("--variant", choices=VARIANTS)
    train.add_argument("--out")
    train.set_defaults(handler=cmd_train)

    rollout = sub.add_parser("rollout", help="run a checkpoint period by period")
    rollout.add_argument("--checkpoint", required=True)
    rollout.add_argument("--goal", type=float, help="goal disk radius in metres")
    rollout.add_argument("--horizon", type=int, default=50)
    rollout.add_argument("--deterministic", action="store_true")
    rollout.add_argument("--seed", type=int, default=0)
    rollout.add_argument("--out")
    rollout.set_defaults(handler=cmd_rollout)

    plan = sub.add_parser("plan", help="expand a dual-pose path into a bimanual trajectory")
    plan.add_argument("--waypoints", required=True)
    plan.add_argument("--demos", required=True)
    plan.add_argument("--points", type=int, default=10000)
    plan.add_argument("--coordination-weight", type=float)
    plan.add_argument("--config")
    plan.add_argument("--seed", type=int)
    plan.add_argument("--out")
    plan.set_defaults(handler=cmd_plan)

    evaluate = sub.add_parser("eval", help="merge, evaluate and plot variant comparisons")
    evaluate.add_argument("--checkpoint", nargs="+")
    evaluate.add_argument("--runs", nargs="+", help="directories holding per-job row.json files")
    evaluate.add_argument("--ablation", action="store_true", help="train and evaluate every configured variant")
    evaluate.add_argument("--config")
    evaluate.add_argument("--seed", type=int)
    evaluate.add_argument("--updates", type=int)
    evaluate.add_argument("--out")
    evaluate.set_defaults(handler=cmd_eval)

    demo = sub.add_parser("demo-gen", help="write scripted demonstrations")
    demo.add_argument("--n", type=int, default=10)
    demo.add_argument("--config")
    demo.add_argument("--seed", type=int)
    demo.add_argument("--out")
    demo.set_defaults(handler=cmd_demo_gen)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_environment_variables()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code else 0
    setup_logging(args.log_level)
    try:
        return args.handler(args)
    except USAGE_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
