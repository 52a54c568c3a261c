"""Command-line entry points.

Exit codes: 0 success, 2 invalid config or arguments, 3 training diverged,
4 file I/O failure, 5 malformed input data (game file or trajectory log).
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import ExitStack
from pathlib import Path

from .analytics import coordination_report, evaluate, format_report, sweep_p, write_reports, write_sweep, write_sweep_detail
from .config import ConfigFileError, RunConfig, load_config, resolve_seed
from .env import TrajectoryLogError, read_trajectories, write_trajectories
from .game import GameError, axiom_report, read_game_file, shapley_exact, single_ablation_credit
from .optim import DivergenceError, train, write_record, write_timing
from .policy import PolicyParams, load_checkpoint, save_checkpoint
from .reward import write_reward_table
from .rollout import derive_seed, write_batch

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4
EXIT_DATA = 5


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _p_list(text: str) -> list[float]:
    try:
        values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None
    if not values or any(not 0.0 <= p <= 1.0 for p in values):
        raise argparse.ArgumentTypeError("every p must lie in [0, 1]")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sharplab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def run_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--seed", type=int, help="overrides $SHARP_SEED and the config seed")
        p.add_argument("--out", help="output directory (overrides config output_dir)")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for rollouts")

    p = sub.add_parser("train", help="train a policy and emit record, logs, checkpoints, report")
    run_flags(p)
    p.add_argument("--estimator", choices=("exact", "ablation"))

    p = sub.add_parser("eval", help="evaluation rollouts against a checkpoint")
    run_flags(p)
    p.add_argument("--checkpoint", help="policy checkpoint (default: fresh zero policy)")
    p.add_argument("--episodes", type=int)
    p.add_argument("--estimator", choices=("exact", "ablation"))

    p = sub.add_parser("sweep", help="credit sparsification sweep over p")
    run_flags(p)
    p.add_argument("--p", type=_p_list, default=[0.0, 0.5, 1.0], help="comma list, e.g. 0,0.5,1")
    p.add_argument("--seeds", type=int, default=1, help="seeds per p value")
    p.add_argument("--estimator", choices=("exact", "ablation"))

    p = sub.add_parser("shapley", help="exact Shapley values and axiom residuals for a game file")
    p.add_argument("game", help="game file: 'n=<count>' then '<bitmask> <value>' lines")
    p.add_argument("--json", action="store_true", help="machine-readable output")

    p = sub.add_parser("analyze", help="coordination report for a trajectory log")
    p.add_argument("log")
    p.add_argument("--estimator", choices=("exact", "ablation"), default="exact")
    p.add_argument("--out", help="report CSV path (default: <log>.report.csv)")
    return parser


def _load(args) -> tuple[RunConfig, Path]:
    try:
        config = load_config(args.config)
        seed = resolve_seed(config, args.seed)
        config = config.with_seed(seed)
    except ConfigFileError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    except OSError as exc:
        raise CliError(f"cannot read config: {exc}", EXIT_IO) from None
    if getattr(args, "estimator", None):
        config = config.model_copy(update={"estimator": args.estimator})
    out = Path(args.out or config.output_dir)
    config = config.model_copy(update={"output_dir": str(out)})
    if args.jobs < 1:
        raise CliError("--jobs must be >= 1", EXIT_CONFIG)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory: {exc}", EXIT_IO) from None
    return config, out


def _executor(stack: ExitStack, jobs: int):
    if jobs <= 1:
        return None
    return stack.enter_context(ProcessPoolExecutor(max_workers=jobs))


def cmd_train(args) -> int:
    config, out = _load(args)
    (out / "config.json").write_text(config.dumps())
    init = PolicyParams.for_spec(config.env)
    save_checkpoint(init, out / "checkpoint_init.csv")
    with ExitStack() as stack:
        executor = _executor(stack, args.jobs)
        sinks = []
        if config.log_trajectories:
            traj_fh = stack.enter_context(open(out / "trajectories.jsonl", "w"))
            reward_fh = stack.enter_context(open(out / "rewards.csv", "w"))
            first = [True]

            def sink(step, batch):
                write_batch(batch, traj_fh)
                write_reward_table([batch], reward_fh, header=first[0])
                first[0] = False

            sinks.append(sink)
        try:
            record = train(
                config.env,
                config.train,
                params=init,
                executor=executor,
                on_batch=sinks[0] if sinks else None,
            )
        except DivergenceError as exc:
            raise CliError(str(exc), EXIT_DIVERGED) from None
    with open(out / "training.csv", "w") as fh:
        write_record(record, fh)
    with open(out / "timing.csv", "w") as fh:
        write_timing(record, fh)
    save_checkpoint(record.params, out / "checkpoint.csv")
    result = evaluate(config.env, record.params, config.eval_episodes, derive_seed(config.train.seed, "final-eval"), config.estimator, "final-eval")
    write_trajectories(result.trajectories, out / "eval_trajectories.jsonl")
    with open(out / "report.csv", "w") as fh:
        write_reports([result.report], fh)
    (out / "eval.json").write_text(json.dumps({"success": result.success, "cost": result.cost}, sort_keys=True) + "\n")
    print(f"trained {config.train.steps} steps; eval success={result.success:.4f} cost={result.cost:.3f}")
    print(format_report(result.report))
    return EXIT_OK


def cmd_eval(args) -> int:
    config, out = _load(args)
    if args.checkpoint:
        try:
            params = load_checkpoint(args.checkpoint)
        except OSError as exc:
            raise CliError(f"cannot read checkpoint: {exc}", EXIT_IO) from None
        except (ValueError, KeyError) as exc:
            raise CliError(f"bad checkpoint: {exc}", EXIT_DATA) from None
        expected = PolicyParams.for_spec(config.env)
        if any(params.logits[r].shape != expected.logits[r].shape for r in ("planner", "worker")):
            raise CliError("checkpoint shape does not match the config's environment", EXIT_CONFIG)
    else:
        params = PolicyParams.for_spec(config.env)
    episodes = args.episodes or config.eval_episodes
    result = evaluate(config.env, params, episodes, derive_seed(config.train.seed, "final-eval"), config.estimator, "eval")
    write_trajectories(result.trajectories, out / "eval_trajectories.jsonl")
    with open(out / "report.csv", "w") as fh:
        write_reports([result.report], fh)
    print(f"eval success={result.success:.4f} cost={result.cost:.3f}")
    print(format_report(result.report))
    return EXIT_OK


def cmd_sweep(args) -> int:
    config, out = _load(args)
    if args.seeds < 1:
        raise CliError("--seeds must be >= 1", EXIT_CONFIG)
    base = config.train.seed
    seeds = [base] if args.seeds == 1 else [derive_seed(base, "sweep", k) for k in range(args.seeds)]
    with ExitStack() as stack:
        executor = _executor(stack, args.jobs)
        try:
            rows = sweep_p(config.env, config.train, args.p, seeds, config.eval_episodes, config.estimator, executor)
        except DivergenceError as exc:
            raise CliError(str(exc), EXIT_DIVERGED) from None
    with open(out / "sweep.csv", "w") as fh:
        write_sweep(rows, fh)
    with open(out / "sweep_detail.csv", "w") as fh:
        write_sweep_detail(rows, fh)
    for p in args.p:
        rs = [r for r in rows if r.p == p]
        success = sum(r.final_success for r in rs) / len(rs)
        print(f"p={p:g} replays={sum(r.train_replays for r in rs) / len(rs):.1f} success={success:.4f}")
    return EXIT_OK


def cmd_shapley(args) -> int:
    try:
        game = read_game_file(args.game)
    except OSError as exc:
        raise CliError(f"cannot read game file: {exc}", EXIT_IO) from None
    except GameError as exc:
        raise CliError(f"{args.game}: {exc}", EXIT_DATA) from None
    phi = shapley_exact(game)
    ablation = single_ablation_credit(game)
    axioms = axiom_report(game, phi)
    if args.json:
        print(
            json.dumps(
                {
                    "n": game.n_agents,
                    "exact": phi.tolist(),
                    "ablation": ablation.tolist(),
                    "efficiency_residual": axioms.efficiency,
                    "symmetry_residual": axioms.symmetry,
                    "dummy_residual": axioms.dummy,
                }
            )
        )
        return EXIT_OK
    print("agent,exact,ablation")
    for m in range(game.n_agents):
        print(f"{m},{phi[m]!r},{ablation[m]!r}")
    print(f"efficiency_residual={axioms.efficiency:.3e}")
    if axioms.symmetry is not None:
        print(f"symmetry_residual={axioms.symmetry:.3e} pairs={list(axioms.symmetric_pairs)}")
        print(f"dummy_residual={axioms.dummy:.3e} dummies={list(axioms.dummies)}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    try:
        trajectories = read_trajectories(args.log)
    except OSError as exc:
        raise CliError(f"cannot read log: {exc}", EXIT_IO) from None
    except TrajectoryLogError as exc:
        raise CliError(f"{args.log}: {exc}", EXIT_DATA) from None
    try:
        report = coordination_report(trajectories, args.estimator, source=str(args.log))
    except GameError as exc:
        raise CliError(str(exc), EXIT_DATA) from None
    out = Path(args.out) if args.out else Path(str(args.log) + ".report.csv")
    try:
        with open(out, "w") as fh:
            write_reports([report], fh)
    except OSError as exc:
        raise CliError(f"cannot write report: {exc}", EXIT_IO) from None
    print(format_report(report))
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "shapley": cmd_shapley,
    "analyze": cmd_analyze,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
