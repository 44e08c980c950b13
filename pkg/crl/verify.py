"""Verification suites run by the verify command.

Each suite returns a SuiteResult with one measured statistic and the threshold
it was judged against. Suites that do not apply to a checkpoint are reported
as passed with a "skipped" detail.
"""

import logging
from dataclasses import dataclass, asdict, replace
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .encoders import (
    EncoderParams,
    TrainConfig,
    corpus_samples,
    draw_batch,
    encode_goal,
    encode_sa,
    init_params,
    sa_features,
    train,
)
from .errors import ValidationError
from .flow_expert import FlowHead, fm_loss
from .gradcheck import finite_diff_check, gradient_check
from .masking import (
    block_sparse_attention,
    bc_losses_by_sample,
    build_mask,
    dense_attention,
    init_attention,
    isolation_check,
    pack,
    random_role_counts,
    sequence_from_sample,
    synthetic_sample,
)
from .objectives import (
    BatchSample,
    NormalizationMode,
    SimilarityMatrix,
    bc_token_loss,
    loss_l_to_sa,
    loss_sa_to_l,
    temporal_weights,
)
from .sharding import ShardPlan, shard_report
from .testbed import Corpus, Mdp, Trajectory, expert_policy, occupancy_oracle, split_corpus

logger = logging.getLogger(__name__)


@dataclass
class VerifyConfig:
    """Thresholds and instance counts; keys carry a verify_ prefix."""
    verify_residual_threshold: float = 0.1
    verify_ranking_threshold: float = 0.99
    verify_gradient_instances: int = 20
    verify_gradient_tolerance: float = 1e-5
    verify_mask_sequences: int = 100
    verify_block_sizes: tuple[int, ...] = (1, 4, 16, 64)
    verify_pack_batches: int = 50
    verify_pack_limit: int = 64
    verify_shard_counts: tuple[int, ...] = (1, 2, 4, 8)
    verify_shard_batch: int = 32
    verify_seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SuiteResult:
    suite: str
    passed: bool
    statistic: float
    threshold: float
    detail: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def score_table(params: EncoderParams, batch: Sequence[BatchSample]) -> np.ndarray:
    """Critic scores (B, G) against every goal in the encoder table, temperature included."""
    phi = encode_sa(params, np.stack([s.sa_features for s in batch]))
    psi = np.stack([encode_goal(params, g) for g in params.goal_ids])
    return params.temperature * (phi @ psi.T)


def _oracle_q(corpus: Corpus, batch: Sequence[BatchSample], gamma: float) -> np.ndarray:
    oracle = occupancy_oracle(corpus.mdp, expert_policy(corpus.mdp), gamma)
    return np.array([oracle.q(s.state, s.action, s.goal_id) for s in batch])


def occupancy_residual_suite(params: EncoderParams, corpus: Corpus, gamma: float,
                           threshold: float) -> SuiteResult:
    """Per-goal spread of psi.phi - log Q; the mean per goal is free."""
    name = "occupancy_residual"
    if params.normalization_mode != NormalizationMode.RAW.value:
        logger.warning("Skipping %s: checkpoint is in %s mode", name, params.normalization_mode)
        return SuiteResult(name, True, float("nan"), threshold, "skipped: normalized embeddings")
    batch = corpus_samples(corpus)
    scores = score_table(params, batch)
    log_q = np.log(_oracle_q(corpus, batch, gamma))
    spreads, spans = [], []
    for goal_id in params.goal_ids:
        rows = [s.sample_index for s in batch if s.goal_id == goal_id]
        col = params.goal_row(goal_id)
        residual = scores[rows, col] - log_q[rows]
        spreads.append(float(np.std(residual)))
        spans.append(float(np.ptp(log_q[rows])))
    worst = max(spreads)
    detail = "per-goal std " + ", ".join(f"{s:.4f}" for s in spreads) \
        + "; log Q span " + ", ".join(f"{s:.3f}" for s in spans)
    return SuiteResult(name, worst < threshold, worst, threshold, detail)


def ranking_suite(params: EncoderParams, corpus: Corpus, gamma: float, threshold: float) -> SuiteResult:
    """Minimum per-task Spearman correlation between scores and oracle Q."""
    name = "ranking"
    batch = corpus_samples(corpus)
    scores = score_table(params, batch)
    q = _oracle_q(corpus, batch, gamma)
    correlations = {}
    for goal_id in params.goal_ids:
        rows = [s.sample_index for s in batch if s.goal_id == goal_id]
        if len(np.unique(q[rows])) < 2:
            continue
        rho = stats.spearmanr(scores[rows, params.goal_row(goal_id)], q[rows]).correlation
        correlations[goal_id] = float(rho) if np.isfinite(rho) else -1.0
    if not correlations:
        return SuiteResult(name, False, float("nan"), threshold, "no task has distinct Q values")
    worst = min(correlations.values())
    detail = ", ".join(f"goal {g}: {r:.4f}" for g, r in correlations.items())
    return SuiteResult(name, worst >= threshold, worst, threshold, detail)


def discrimination_accuracy(params: EncoderParams, batch: Sequence[BatchSample]) -> float:
    """Fraction of samples whose own goal strictly outscores every other goal."""
    scores = score_table(params, batch)
    own = np.array([params.goal_row(s.goal_id) for s in batch])
    rows = np.arange(len(batch))
    own_scores = scores[rows, own]
    others = scores.copy()
    others[rows, own] = -np.inf
    return float(np.mean(own_scores > others.max(axis=1)))


def discrimination_suite(params: EncoderParams, corpus: Corpus) -> SuiteResult:
    accuracy = discrimination_accuracy(params, corpus_samples(corpus))
    return SuiteResult("goal_discrimination", accuracy == 1.0, accuracy, 1.0,
                       f"{accuracy:.2%} of expert samples rank their own goal first")


@dataclass
class AblationResult:
    """Goal discrimination on held-out trajectories with and without the contrastive term."""
    with_crl: float
    without_crl: float
    train_trajectories: int
    heldout_samples: int

    def to_dict(self) -> dict:
        return asdict(self)


def heldout_probe(heldout: Corpus) -> list[BatchSample]:
    """Samples of a held-out split, scored by goal discrimination only."""
    if not heldout.trajectories:
        raise ValidationError("held-out split has no trajectories")
    return corpus_samples(heldout)


def crl_ablation(corpus: Corpus, config: TrainConfig, heldout_per_task: int = 1) -> AblationResult:
    """Train lambda_crl = config.lambda_crl and lambda_crl = 0 on the same split, seed and budget."""
    if config.lambda_crl <= 0:
        raise ValidationError("the ablation compares a positive lambda_crl against 0")
    train_split, heldout = split_corpus(corpus, heldout_per_task)
    samples = heldout_probe(heldout)
    with_crl = train(train_split, config).params
    without_crl = train(train_split, replace(config, lambda_crl=0.0)).params
    result = AblationResult(discrimination_accuracy(with_crl, samples), discrimination_accuracy(without_crl, samples),
                            len(train_split.trajectories), len(samples))
    logger.info("Ablation on %d held-out samples: lambda=%g -> %.2f, lambda=0 -> %.2f",
                result.heldout_samples, config.lambda_crl, result.with_crl, result.without_crl)
    return result


def value_curve(params: EncoderParams, mdp: Mdp, trajectory: Trajectory,
                correct_goal: int, wrong_goal: int) -> np.ndarray:
    """Rows (t, score under correct goal, score under wrong goal) along a trajectory."""
    features = np.stack([sa_features(s, a, mdp.num_states, mdp.num_actions)
                         for s, a in zip(trajectory.states, trajectory.actions)])
    phi = encode_sa(params, features)
    scale = params.temperature
    correct = scale * phi @ encode_goal(params, correct_goal)
    wrong = scale * phi @ encode_goal(params, wrong_goal)
    return np.column_stack([np.arange(1, trajectory.length + 1), correct, wrong])


def _random_batch(rng: np.random.Generator, size: int, num_tasks: int, dim: int) -> list[BatchSample]:
    tasks = np.concatenate([np.arange(num_tasks), rng.integers(num_tasks, size=size - num_tasks)])
    samples = []
    for j, task in enumerate(tasks):
        T = int(rng.integers(1, 12))
        samples.append(BatchSample(j, int(task), int(task), int(rng.integers(1, T + 1)), T,
                                   rng.normal(size=dim), (int(task),)))
    return samples


def gradient_suite(config: VerifyConfig, gamma: float) -> SuiteResult:
    """Central-difference checks of every hand-written gradient on random instances."""
    rng = np.random.default_rng(config.verify_seed)
    worst = {"sa_to_l": 0.0, "l_to_sa": 0.0, "bc": 0.0, "flow": 0.0, "encoder": 0.0}
    for _ in range(config.verify_gradient_instances):
        size = int(rng.integers(3, 17))
        num_tasks = int(rng.integers(2, min(size, 5) + 1))
        batch = _random_batch(rng, size, num_tasks, 4)
        goal_ids = tuple(range(num_tasks))
        weights = temporal_weights(batch, gamma)
        logits = rng.normal(size=(size, num_tasks))

        def sa_to_l(x):
            return loss_sa_to_l(SimilarityMatrix(x.reshape(logits.shape), goal_ids), batch, gamma).value

        def l_to_sa(x):
            return loss_l_to_sa(SimilarityMatrix(x.reshape(logits.shape), goal_ids), weights, batch).value

        sim = SimilarityMatrix(logits, goal_ids)
        worst["sa_to_l"] = max(worst["sa_to_l"], gradient_check(
            sa_to_l, loss_sa_to_l(sim, batch, gamma).grad, logits).max_rel_error)
        worst["l_to_sa"] = max(worst["l_to_sa"], gradient_check(
            l_to_sa, loss_l_to_sa(sim, weights, batch).grad, logits).max_rel_error)

        vocab = int(rng.integers(2, 9))
        token_logits = rng.normal(size=(size, vocab))
        targets = rng.integers(vocab, size=size)
        worst["bc"] = max(worst["bc"], gradient_check(
            lambda x: bc_token_loss(x.reshape(token_logits.shape), targets).value,
            bc_token_loss(token_logits, targets).grad, token_logits).max_rel_error)

        head = FlowHead(2, 2, 3, hidden_width=8, rng=rng)
        clean, eps = rng.normal(size=(size, 2, 2)), rng.normal(size=(size, 2, 2))
        tau, cond = rng.random(size), rng.normal(size=(size, 3))
        flat = head.flatten()
        _, flow_grad = fm_loss(head, clean, eps, tau, cond)
        report = gradient_check(lambda x: fm_loss(head.load_flat(x), clean, eps, tau, cond)[0], flow_grad, flat)
        head.load_flat(flat)
        worst["flow"] = max(worst["flow"], report.max_rel_error)

        mode = NormalizationMode.L2_TEMP.value if rng.random() < 0.5 else NormalizationMode.RAW.value
        train_config = TrainConfig(gamma=gamma, hidden_width=5, embed_dim=3, init_scale=0.5,
                                   normalization_mode=mode, init_temperature=2.0)
        params = init_params(4, goal_ids, train_config, rng)
        worst["encoder"] = max(worst["encoder"], finite_diff_check(params, batch, 1e-5, train_config).max_rel_error)

    statistic = max(worst.values())
    detail = ", ".join(f"{k}: {v:.2e}" for k, v in worst.items())
    return SuiteResult("gradient", statistic < config.verify_gradient_tolerance, statistic,
                       config.verify_gradient_tolerance, detail)


def isolation_suite(config: VerifyConfig) -> SuiteResult:
    """Dense vs block-sparse equality plus the three isolation rules on random packs."""
    rng = np.random.default_rng(config.verify_seed)
    worst_diff = 0.0
    failures = []
    for index in range(config.verify_mask_sequences):
        samples = [synthetic_sample(rng, random_role_counts(rng), 16, 8) for _ in range(int(rng.integers(1, 4)))]
        seq = pack(samples, sum(len(s) for s in samples))[0]
        mask = build_mask(seq)
        params = init_attention(16, 2, 8, rng)
        dense = dense_attention(seq, mask, params)
        for block_size in config.verify_block_sizes:
            sparse = block_sparse_attention(seq, mask, params, block_size)
            worst_diff = max(worst_diff, float(np.abs(sparse.outputs - dense).max()))
        report = isolation_check(seq, params, rng)
        worst_diff = max([worst_diff] + list(report.max_diffs.values()))
        if not report.passed:
            failures.append(f"sequence {index}: leaks {report.leaks}")
    threshold = 1e-12
    passed = not failures and worst_diff <= threshold
    return SuiteResult("isolation", passed, worst_diff, threshold, "; ".join(failures) or "all rules hold")


def packing_suite(config: VerifyConfig) -> SuiteResult:
    """Per-sample BC losses under greedy packing against the unpacked evaluation."""
    rng = np.random.default_rng(config.verify_seed + 1)
    worst = 0.0
    for _ in range(config.verify_pack_batches):
        params = init_attention(16, 2, 8, rng)
        samples = [synthetic_sample(rng, random_role_counts(rng, 6), 16, 8) for _ in range(int(rng.integers(2, 8)))]
        limit = max(config.verify_pack_limit, max(len(s) for s in samples))
        for seq in pack(samples, limit):
            packed = bc_losses_by_sample(seq, dense_attention(seq, build_mask(seq), params), params)
            for sample_id, value in packed.items():
                alone = sequence_from_sample(samples[sample_id], sample_id)
                reference = bc_losses_by_sample(alone, dense_attention(alone, build_mask(alone), params), params)
                worst = max(worst, abs(value - reference[sample_id]))
    threshold = 1e-12
    return SuiteResult("packing", worst <= threshold, worst, threshold,
                       f"{config.verify_pack_batches} random batches")


def shard_suite(params: EncoderParams, corpus: Corpus, train_config: TrainConfig,
                config: VerifyConfig) -> SuiteResult:
    """Sharded gradients and loss against the monolithic computation."""
    rng = np.random.default_rng(config.verify_seed)
    samples = corpus_samples(corpus)
    batch = draw_batch(samples, min(config.verify_shard_batch, len(samples)), rng, True)
    worst_grad, worst_loss = 0.0, 0.0
    details = []
    for count in config.verify_shard_counts:
        if count > len(batch):
            continue
        report = shard_report(batch, params, ShardPlan.random(len(batch), count, rng), train_config)
        worst_grad = max(worst_grad, report.max_grad_diff)
        worst_loss = max(worst_loss, report.loss_diff)
        details.append(f"{count} shards: grad {report.max_grad_diff:.1e}, "
                       f"{report.negatives_per_anchor} goal columns")
    threshold = 1e-10
    passed = worst_grad <= threshold and worst_loss <= 1e-12
    return SuiteResult("shard", passed, worst_grad, threshold, "; ".join(details))


def run_suites(params: EncoderParams, corpus: Corpus, train_config: TrainConfig,
               config: Optional[VerifyConfig] = None) -> list[SuiteResult]:
    """Every suite, in a fixed order."""
    config = config or VerifyConfig()
    if tuple(params.goal_ids) != tuple(g.goal_id for g in corpus.goals):
        raise ValidationError("checkpoint goals do not match the corpus goals")
    gamma = train_config.gamma
    results = [
        occupancy_residual_suite(params, corpus, gamma, config.verify_residual_threshold),
        ranking_suite(params, corpus, gamma, config.verify_ranking_threshold),
        discrimination_suite(params, corpus),
        gradient_suite(config, gamma),
        isolation_suite(config),
        packing_suite(config),
        shard_suite(params, corpus, train_config, config),
    ]
    for result in results:
        level = logging.INFO if result.passed else logging.WARNING
        logger.log(level, "suite %s: %s (statistic=%.3e, threshold=%.3e)", result.suite,
                   "pass" if result.passed else "FAIL", result.statistic, result.threshold)
    return results
