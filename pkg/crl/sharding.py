"""In-process simulation of sharded contrastive similarity.

Each shard embeds its own samples, all shards gather the full embedding set in
canonical index order, and each shard scores only its local anchors: its own
rows for sa->l and the goals whose lowest-index sample it holds for l->sa.
Embedding gradients are routed back to the shard that produced them and
parameter gradients are folded in shard order.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict
from typing import Optional, Sequence

import numpy as np

from .encoders import (
    EncoderParams,
    TrainConfig,
    crl_objective,
    encoder_param_grads,
    feature_matrix,
    sa_forward,
)
from .errors import ShardPlanError
from .objectives import BatchSample, combined_crl_loss, compute_similarity, goal_columns, \
    similarity_backward, temporal_weights

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ShardPlan:
    """assignment[j] is the shard holding sample j."""
    num_shards: int
    assignment: tuple[int, ...]

    def validate(self, batch_size: int) -> None:
        if self.num_shards < 1:
            raise ShardPlanError("num_shards must be >= 1")
        if len(self.assignment) != batch_size:
            raise ShardPlanError(f"plan covers {len(self.assignment)} samples, batch has {batch_size}")
        if any(not 0 <= s < self.num_shards for s in self.assignment):
            raise ShardPlanError("assignment refers to a shard outside [0, num_shards)")
        empty = sorted(set(range(self.num_shards)) - set(self.assignment))
        if empty:
            raise ShardPlanError(f"shard {empty[0]} has no samples")

    def rows(self, shard: int) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.assignment) == shard)

    @classmethod
    def contiguous(cls, batch_size: int, num_shards: int) -> "ShardPlan":
        bounds = np.linspace(0, batch_size, num_shards + 1).astype(int)
        assignment = np.searchsorted(bounds, np.arange(batch_size), side="right") - 1
        return cls(num_shards, tuple(int(s) for s in assignment))

    @classmethod
    def random(cls, batch_size: int, num_shards: int, rng: np.random.Generator) -> "ShardPlan":
        base = np.arange(batch_size) % num_shards
        return cls(num_shards, tuple(int(s) for s in rng.permutation(base)))


@dataclass
class ShardOutcome:
    """What one shard contributes before the fold."""
    shard: int
    value: float
    sa_to_l: float
    l_to_sa: float
    grad_phi: np.ndarray
    grad_psi: np.ndarray
    grad_log_temp: float
    negatives_per_anchor: int


@dataclass
class ShardedGradient:
    grad: np.ndarray
    value: float
    sa_to_l: float
    l_to_sa: float
    negatives_per_anchor: int


def goal_owners(batch: Sequence[BatchSample], plan: ShardPlan, goal_ids: Sequence[int]) -> np.ndarray:
    """Shard of the lowest-index sample of each goal column."""
    first = {}
    for sample in batch:
        first.setdefault(sample.goal_id, sample.sample_index)
    return np.array([plan.assignment[first[g]] for g in goal_ids], dtype=np.int64)


def sharded_crl_grad(batch: Sequence[BatchSample], params: EncoderParams, plan: ShardPlan,
                     config: Optional[TrainConfig] = None, remote_grad: bool = True,
                     max_workers: Optional[int] = None) -> ShardedGradient:
    """Combined CRL gradient computed shard by shard.

    With remote_grad=False a shard keeps only the gradient on its own embeddings,
    which is the stop-gradient variant and does not match the monolithic gradient.
    """
    config = config or TrainConfig()
    plan.validate(len(batch))
    features = feature_matrix(batch)
    goal_ids = goal_columns(batch)
    table_rows = np.array([params.goal_row(g) for g in goal_ids], dtype=np.int64)
    owners = goal_owners(batch, plan, goal_ids)
    weights = temporal_weights(batch, config.gamma)
    shard_rows = [plan.rows(s) for s in range(plan.num_shards)]
    workers = max_workers or plan.num_shards

    with ThreadPoolExecutor(max_workers=workers) as executor:
        local = list(executor.map(lambda rows: sa_forward(params, features[rows]), shard_rows))

        phi = np.zeros((len(batch), params.embed_dim))
        for rows, (phi_local, _) in zip(shard_rows, local):
            phi[rows] = phi_local
        psi = params.goal_table[table_rows]

        def score(shard: int) -> ShardOutcome:
            sim, cache = compute_similarity(phi, psi, goal_ids, params.normalization_mode,
                                            params.log_temperature)
            loss = combined_crl_loss(sim, batch, config.gamma, config.lambda_crl, weights,
                                     sample_anchors=shard_rows[shard],
                                     goal_anchors=np.flatnonzero(owners == shard),
                                     normalization=config.sa_to_l_normalization)
            grad_phi, grad_psi, grad_log_temp = similarity_backward(loss.grad, cache)
            if not remote_grad:
                keep = np.zeros((len(batch), 1))
                keep[shard_rows[shard]] = 1.0
                grad_phi = grad_phi * keep
            return ShardOutcome(shard, loss.value, loss.sa_to_l, loss.l_to_sa, grad_phi, grad_psi,
                                grad_log_temp, sim.logits.shape[1])

        outcomes = list(executor.map(score, range(plan.num_shards)))

        grad_phi = outcomes[0].grad_phi
        grad_psi = outcomes[0].grad_psi
        grad_log_temp = outcomes[0].grad_log_temp
        value = outcomes[0].value
        for outcome in outcomes[1:]:
            grad_phi = grad_phi + outcome.grad_phi
            grad_psi = grad_psi + outcome.grad_psi
            grad_log_temp = grad_log_temp + outcome.grad_log_temp
            value = value + outcome.value

        def backprop(shard: int) -> np.ndarray:
            rows = shard_rows[shard]
            hidden = local[shard][1]
            if shard == 0:
                return encoder_param_grads(params, features[rows], hidden, grad_phi[rows], table_rows,
                                           grad_psi, grad_log_temp)
            return encoder_param_grads(params, features[rows], hidden, grad_phi[rows], table_rows,
                                       np.zeros_like(grad_psi), 0.0)

        param_grads = list(executor.map(backprop, range(plan.num_shards)))

    grad = param_grads[0]
    for shard_grad in param_grads[1:]:
        grad = grad + shard_grad

    negatives = {o.negatives_per_anchor for o in outcomes}
    if len(negatives) != 1:
        raise ShardPlanError(f"shards disagree on the negative pool size: {sorted(negatives)}")
    # components are reported unscaled like combined_crl_loss
    sa_to_l = sum(o.sa_to_l for o in outcomes)
    l_to_sa = sum(o.l_to_sa for o in outcomes)
    return ShardedGradient(grad, value, sa_to_l, l_to_sa, negatives.pop())


@dataclass
class ShardReport:
    num_shards: int
    max_grad_diff: float
    loss_diff: float
    negatives_per_anchor: int

    def to_dict(self) -> dict:
        return asdict(self)


def shard_report(batch: Sequence[BatchSample], params: EncoderParams, plan: ShardPlan,
                 config: Optional[TrainConfig] = None, remote_grad: bool = True) -> ShardReport:
    """Compare the sharded gradient and loss against the monolithic computation."""
    config = config or TrainConfig()
    mono_loss, mono_grad = crl_objective(params, batch, feature_matrix(batch), config)
    sharded = sharded_crl_grad(batch, params, plan, config, remote_grad)
    report = ShardReport(plan.num_shards, float(np.abs(sharded.grad - mono_grad).max()),
                         abs(sharded.value - mono_loss.value), sharded.negatives_per_anchor)
    logger.debug("shard report: %s", report.to_dict())
    return report
