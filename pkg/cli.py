import argparse
import csv
import logging
import os
import sys
from datetime import datetime
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from config import LOG_LEVEL, OUTPUT_DIR, RunConfig, load_run_config, write_config_echo
from constants import (
    BENCH_CSV,
    BENCH_SVG,
    CHECKPOINT_FILE,
    CONFIG_ECHO_FILE,
    CORPUS_FILE,
    LOSS_CSV,
    MASK_DUMP_FILE,
    RECORDS_DB_FILE,
    RUN_DIR_FORMAT,
    SAMPLE_CSV,
    VALUE_CURVE_CSV,
    VALUE_CURVE_SVG,
    VERIFY_CSV,
    Command,
    ErrorMsg,
    ExitCode,
)
from crl.encoders import encode_goal, train
from crl.errors import NumericalAbort, ValidationError
from crl.flow_expert import corpus_flow_dataset, flow_condition, sample, train_flow
from crl.masking import bench_sequence, build_mask, mask_bench, mask_to_text
from crl.testbed import expert_policy, expert_rollout, generate_corpus
from crl.verify import run_suites, value_curve
from storage import RecordStore, load_checkpoint, load_corpus, save_checkpoint, save_corpus

logger = logging.getLogger(__name__)


class VerificationFailed(Exception):
    """At least one verification suite did not pass."""


class Run:
    """One CLI invocation: its config, timestamped directory and record store."""

    def __init__(self, command: str, config: RunConfig, base_dir: str):
        stamp = datetime.now().strftime(RUN_DIR_FORMAT)
        name = f"{command}-{stamp}"
        path = os.path.join(base_dir, name)
        suffix = 1
        while os.path.exists(path):
            suffix += 1
            path = os.path.join(base_dir, f"{name}-{suffix}")
        os.makedirs(path)
        self.id = os.path.basename(path)
        self.dir = path
        self.command = command
        self.config = config
        write_config_echo(config, self.path(CONFIG_ECHO_FILE))
        self.records = RecordStore(self.path(RECORDS_DB_FILE))
        self.records.start_run(self.id, command, config.train.seed, config.flat())
        logger.info("Run directory: %s", path)

    def path(self, filename: str) -> str:
        return os.path.join(self.dir, filename)

    def close(self) -> None:
        self.records.close()


def write_csv(path: str, fieldnames: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def save_plot(fig, path: str) -> None:
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)
    logger.info("Plot saved to %s", path)


# =============================================================================
# Subcommands
# =============================================================================

def cmd_gen(run: Run, args: argparse.Namespace) -> int:
    corpus = generate_corpus(run.config.corpus)
    save_corpus(corpus, run.path(CORPUS_FILE))
    print(f"corpus: {len(corpus.goals)} goals, {len(corpus.trajectories)} trajectories, "
          f"{corpus.mdp.num_states} states -> {run.path(CORPUS_FILE)}")
    return ExitCode.SUCCESS


def cmd_train(run: Run, args: argparse.Namespace) -> int:
    if args.corpus:
        corpus = load_corpus(args.corpus)
    else:
        corpus = generate_corpus(run.config.corpus)
    save_corpus(corpus, run.path(CORPUS_FILE))

    result = train(corpus, run.config.train)
    history = [r.to_dict() for r in result.history]
    write_csv(run.path(LOSS_CSV), ["step", "sa_to_l", "l_to_sa", "bc", "temperature", "grad_norm", "total"],
              history)
    run.records.save_steps(run.id, result.history)

    flow_head = None
    if run.config.flow.flow_enabled:
        dataset = corpus_flow_dataset(corpus, result.params, run.config.flow.flow_horizon)
        flow_head, _ = train_flow(dataset, run.config.flow)

    save_checkpoint(run.path(CHECKPOINT_FILE), result.params, run.config.train, flow_head, result.bc_head)
    final = result.history[-1] if result.history else None
    if final is not None:
        print(f"trained {len(history)} steps: total={final.total:.6f} "
              f"sa_to_l={final.sa_to_l:.6f} l_to_sa={final.l_to_sa:.6f}")
    print(f"checkpoint -> {run.path(CHECKPOINT_FILE)}")
    return ExitCode.SUCCESS


def cmd_verify(run: Run, args: argparse.Namespace) -> int:
    if not args.checkpoint:
        raise ValidationError(ErrorMsg.CHECKPOINT_REQUIRED)
    if not args.corpus:
        raise ValidationError(ErrorMsg.CORPUS_REQUIRED)
    checkpoint = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus)
    results = run_suites(checkpoint.params, corpus, checkpoint.train_config, run.config.verify)
    run.records.save_suites(run.id, results)
    write_csv(run.path(VERIFY_CSV), ["suite", "passed", "statistic", "threshold", "detail"],
              [r.to_dict() for r in results])

    print(f"{'suite':<22} {'result':<6} {'statistic':>12} {'threshold':>12}  detail")
    for r in results:
        print(f"{r.suite:<22} {'pass' if r.passed else 'FAIL':<6} {r.statistic:>12.4e} "
              f"{r.threshold:>12.4e}  {r.detail}")
    failed = [r.suite for r in results if not r.passed]
    if failed:
        raise VerificationFailed(f"{ErrorMsg.VERIFICATION_FAILED}: {', '.join(failed)}")
    return ExitCode.SUCCESS


def cmd_value_curve(run: Run, args: argparse.Namespace) -> int:
    if not args.checkpoint:
        raise ValidationError(ErrorMsg.CHECKPOINT_REQUIRED)
    if not args.corpus:
        raise ValidationError(ErrorMsg.CORPUS_REQUIRED)
    if (args.trajectory is None) == (args.start is None):
        raise ValidationError(ErrorMsg.TRAJECTORY_OR_START)
    checkpoint = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.corpus)
    mdp = corpus.mdp

    if args.trajectory is not None:
        if not 0 <= args.trajectory < len(corpus.trajectories):
            raise ValidationError(f"trajectory index {args.trajectory} out of range "
                                  f"[0, {len(corpus.trajectories)})")
        trajectory = corpus.trajectories[args.trajectory]
        correct = trajectory.goal_id if args.correct_goal is None else args.correct_goal
    else:
        correct = mdp.goal_ids[0] if args.correct_goal is None else args.correct_goal
        trajectory = expert_rollout(mdp, expert_policy(mdp), args.start, correct)
    if args.wrong_goal is None:
        wrong = next(g for g in mdp.goal_ids if g != correct)
    else:
        wrong = args.wrong_goal

    curve = value_curve(checkpoint.params, mdp, trajectory, correct, wrong)
    rows = [{"t": int(t), "score_correct": repr(float(c)), "score_wrong": repr(float(w))} for t, c, w in curve]
    write_csv(run.path(VALUE_CURVE_CSV), ["t", "score_correct", "score_wrong"], rows)

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(curve[:, 0], curve[:, 1], color="tab:green", marker="o", label=f"goal {correct} (correct)")
    ax.plot(curve[:, 0], curve[:, 2], color="tab:red", marker="x", label=f"goal {wrong} (wrong)")
    ax.set_xlabel("timestep t")
    ax.set_ylabel("critic score")
    ax.grid(True, linestyle="--", linewidth=0.5)
    ax.legend()
    save_plot(fig, run.path(VALUE_CURVE_SVG))

    below = int(np.sum(curve[:, 1] < curve[:, 2]))
    print(f"value curve: {len(curve)} steps, correct below wrong at {below} -> {run.path(VALUE_CURVE_CSV)}")
    return ExitCode.SUCCESS


def cmd_bench(run: Run, args: argparse.Namespace) -> int:
    config = run.config.bench
    records = mask_bench(config)
    run.records.save_timings(run.id, records)
    write_csv(run.path(BENCH_CSV), ["impl", "seq_len", "block_size", "median_ns", "skipped_fraction", "mask_kind"],
              [r.to_dict() for r in records])

    seq = bench_sequence(min(config.bench_seq_lens), config.bench_segment_length, config.bench_d_model,
                         np.random.default_rng(config.bench_seed))
    with open(run.path(MASK_DUMP_FILE), "w") as f:
        f.write(mask_to_text(seq, build_mask(seq), config.bench_block_size))

    fig, ax = plt.subplots(figsize=(7, 4))
    for impl in ("dense", "block_sparse"):
        for kind in sorted({r.mask_kind for r in records}):
            points = [(r.seq_len, r.median_ns / 1e6) for r in records if r.impl == impl and r.mask_kind == kind]
            ax.plot(*zip(*points), marker="o", label=f"{impl} ({kind} mask)")
    ax.set_xlabel("sequence length")
    ax.set_ylabel("median forward time (ms)")
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.grid(True, which="both", linestyle="--", linewidth=0.5)
    ax.legend()
    save_plot(fig, run.path(BENCH_SVG))

    for r in records:
        print(f"{r.impl:<13} {r.mask_kind:<5} n={r.seq_len:<5} median={r.median_ns / 1e6:9.3f}ms "
              f"skipped={100 * r.skipped_fraction:5.1f}%")
    return ExitCode.SUCCESS


def cmd_sample(run: Run, args: argparse.Namespace) -> int:
    if not args.checkpoint:
        raise ValidationError(ErrorMsg.CHECKPOINT_REQUIRED)
    checkpoint = load_checkpoint(args.checkpoint)
    head = checkpoint.flow_head
    if head is None:
        raise ValidationError(ErrorMsg.NO_FLOW_HEAD)
    params = checkpoint.params
    num_states = head.cond_dim - params.embed_dim
    if not 0 <= args.state < num_states:
        raise ValidationError(f"state {args.state} out of range [0, {num_states})")
    goal = params.goal_ids[0] if args.goal is None else args.goal
    condition = flow_condition(num_states, args.state, encode_goal(params, goal))
    steps = args.steps or run.config.flow.flow_sample_steps
    chunk = sample(head, condition, steps=steps, seed=run.config.flow.flow_seed)

    rows = [{"h": h, "action": int(np.argmax(v)), **{f"a{k}": repr(float(x)) for k, x in enumerate(v)}}
            for h, v in enumerate(chunk.values)]
    write_csv(run.path(SAMPLE_CSV), ["h", "action"] + [f"a{k}" for k in range(head.action_dim)], rows)
    print(f"sampled chunk for state {args.state}, goal {goal} ({steps} Euler steps): "
          f"actions {[r['action'] for r in rows]}")
    return ExitCode.SUCCESS


COMMANDS = {
    Command.GEN: cmd_gen,
    Command.TRAIN: cmd_train,
    Command.VERIFY: cmd_verify,
    Command.VALUE_CURVE: cmd_value_curve,
    Command.BENCH: cmd_bench,
    Command.SAMPLE: cmd_sample,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="dotenv-format run config file")
    common.add_argument("--seed", type=int, default=None, help="seed for every component")
    common.add_argument("--out", default=None, help=f"parent of the run directory (default {OUTPUT_DIR})")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")

    parser = argparse.ArgumentParser(description="Temporally weighted contrastive RL testbed")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser(Command.GEN.value, parents=[common], help="generate an MDP corpus")

    p = sub.add_parser(Command.TRAIN.value, parents=[common], help="train encoders (and the flow head)")
    p.add_argument("--corpus", default=None, help="corpus file; generated from config when omitted")

    p = sub.add_parser(Command.VERIFY.value, parents=[common], help="run every verification suite")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--corpus", default=None)

    p = sub.add_parser(Command.VALUE_CURVE.value, parents=[common], help="critic score along a trajectory")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--corpus", default=None)
    p.add_argument("--trajectory", type=int, default=None, help="corpus trajectory index")
    p.add_argument("--start", type=int, default=None, help="start state of a fresh expert rollout")
    p.add_argument("--correct-goal", type=int, default=None)
    p.add_argument("--wrong-goal", type=int, default=None)

    sub.add_parser(Command.BENCH.value, parents=[common], help="dense vs block-sparse attention timing")

    p = sub.add_parser(Command.SAMPLE.value, parents=[common], help="draw an action chunk from the flow head")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--state", type=int, default=0)
    p.add_argument("--goal", type=int, default=None)
    p.add_argument("--steps", type=int, default=None, help="Euler steps (default flow_sample_steps)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run one subcommand and map errors onto exit codes."""
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors, which would read as a verification failure
        return ExitCode.SUCCESS if e.code == 0 else ExitCode.VALIDATION
    logging.basicConfig(
        level=getattr(logging, LOG_LEVEL, logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    run = None
    try:
        config = load_run_config(args.config, args.overrides, args.seed)
        run = Run(args.command, config, args.out or OUTPUT_DIR)
        return int(COMMANDS[Command(args.command)](run, args))
    except VerificationFailed as e:
        logger.error("%s", e)
        return ExitCode.VERIFICATION
    except NumericalAbort as e:
        logger.error("Numerical abort: %s (step=%s, param norms=%s)", e, e.step, e.param_norms)
        return ExitCode.NUMERICAL
    except ValidationError as e:
        logger.error("Invalid input: %s", e)
        return ExitCode.VALIDATION
    except Exception as e:
        logger.exception("Command %s failed: %s", args.command, e)
        return ExitCode.VALIDATION
    finally:
        if run is not None:
            run.close()


if __name__ == "__main__":
    sys.exit(main())
