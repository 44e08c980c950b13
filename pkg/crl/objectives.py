"""Temporally weighted bidirectional InfoNCE objectives.

Logits are laid out samples x goals: row j holds phi_j against every unique
goal column of the batch. The sa->l loss normalizes each row, the l->sa loss
normalizes each column. Both return the exact gradient with respect to the
logits; similarity_backward carries it on to the embeddings.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import ValidationError

logger = logging.getLogger(__name__)

NORM_EPS = 1e-12            # floor for l2 norms
LOGIT_BOUND_SLACK = 1e-9    # tolerance on |logit| <= temperature


class NormalizationMode(str, Enum):
    RAW = "raw"            # plain inner product, temperature fixed at 1
    L2_TEMP = "l2_temp"    # cosine similarity scaled by a learnable temperature


class SaToLNormalization(str, Enum):
    BATCH = "batch"              # divide by batch size
    WEIGHT_SUM = "weight_sum"    # divide by the sum of anchor weights


@dataclass(eq=False)
class BatchSample:
    """One (s_t, a_t, goal) tuple from an expert trajectory."""
    sample_index: int
    task_id: int
    goal_id: int
    t: int
    T: int
    sa_features: np.ndarray
    goal_tokens: tuple[int, ...]
    state: int = -1
    action: int = -1

    def __post_init__(self):
        if not 1 <= self.t <= self.T:
            raise ValidationError(f"sample {self.sample_index}: need 1 <= t <= T, got t={self.t}, T={self.T}")

    @property
    def remaining(self) -> int:
        return self.T - self.t


class LossTerm(NamedTuple):
    value: float
    grad: np.ndarray


@dataclass
class TemporalWeightTable:
    """q[i, j] for anchor i and sample j; zero outside the anchor's task."""
    weights: np.ndarray
    positive_sets: tuple[np.ndarray, ...]

    def for_goals(self, batch: Sequence[BatchSample], goal_ids: Sequence[int]) -> np.ndarray:
        """One target row per goal column, shape (G, B)."""
        first = {}
        for sample in batch:
            first.setdefault(sample.goal_id, sample.sample_index)
        rows = [first[g] for g in goal_ids]
        return self.weights[rows]


@dataclass
class SimilarityMatrix:
    """Logits phi_j . psi_g (temperature-scaled), shape (B, G)."""
    logits: np.ndarray
    goal_ids: tuple[int, ...]
    normalization_mode: str = NormalizationMode.RAW.value
    temperature: float = 1.0

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.ndim != 2 or self.logits.shape[1] != len(self.goal_ids):
            raise ValidationError(
                f"logits shape {self.logits.shape} does not match {len(self.goal_ids)} goal columns"
            )
        if not np.all(np.isfinite(self.logits)):
            raise ValidationError("similarity logits must be finite")
        if self.normalization_mode == NormalizationMode.L2_TEMP.value:
            bound = self.temperature * (1.0 + LOGIT_BOUND_SLACK)
            if np.abs(self.logits).max(initial=0.0) > bound:
                raise ValidationError("l2_temp logits exceed the temperature bound")


@dataclass
class SimilarityCache:
    """Intermediates needed to push logit gradients back to embeddings."""
    mode: str
    phi_unit: np.ndarray
    psi_unit: np.ndarray
    phi_norm: np.ndarray
    psi_norm: np.ndarray
    temperature: float
    logits: np.ndarray


def validate_batch(batch: Sequence[BatchSample]) -> None:
    """Nonempty, indexed 0..B-1 in order, one goal per task."""
    if not batch:
        raise ValidationError("batch is empty")
    goal_of_task: dict[int, int] = {}
    task_of_goal: dict[int, int] = {}
    for position, sample in enumerate(batch):
        if sample.sample_index != position:
            raise ValidationError(f"sample at position {position} has index {sample.sample_index}")
        if goal_of_task.setdefault(sample.task_id, sample.goal_id) != sample.goal_id:
            raise ValidationError(f"task {sample.task_id} maps to more than one goal")
        if task_of_goal.setdefault(sample.goal_id, sample.task_id) != sample.task_id:
            raise ValidationError(f"goal {sample.goal_id} maps to more than one task")


def goal_columns(batch: Sequence[BatchSample]) -> tuple[int, ...]:
    """Unique goal ids of the batch in ascending order."""
    return tuple(sorted({s.goal_id for s in batch}))


def own_goal_columns(batch: Sequence[BatchSample], goal_ids: Sequence[int]) -> np.ndarray:
    index = {g: c for c, g in enumerate(goal_ids)}
    try:
        return np.array([index[s.goal_id] for s in batch], dtype=np.int64)
    except KeyError as exc:
        raise ValidationError(f"goal {exc.args[0]} has no similarity column") from None


def log_discounts(batch: Sequence[BatchSample], gamma: float) -> np.ndarray:
    """(T_j - t_j) * log(gamma) per sample."""
    if not 0.0 < gamma < 1.0:
        raise ValidationError(f"gamma must lie in (0, 1), got {gamma}")
    remaining = np.array([s.remaining for s in batch], dtype=np.float64)
    return remaining * np.log(gamma)


def temporal_weights(batch: Sequence[BatchSample], gamma: float) -> TemporalWeightTable:
    """q_ij = gamma^(T_j - t_j) normalized over the anchor's positive set, in log space."""
    validate_batch(batch)
    log_w = log_discounts(batch, gamma)
    tasks = np.array([s.task_id for s in batch])
    same_task = tasks[:, None] == tasks[None, :]
    if not same_task.any(axis=1).all():
        raise ValidationError("an anchor has an empty positive set")
    masked = np.where(same_task, log_w[None, :], -np.inf)
    log_norm = logsumexp(masked, axis=1, keepdims=True)
    weights = np.where(same_task, np.exp(masked - log_norm), 0.0)
    positive_sets = tuple(np.flatnonzero(row) for row in same_task)
    return TemporalWeightTable(weights, positive_sets)


def _anchor_mask(anchors: Optional[np.ndarray], size: int) -> np.ndarray:
    if anchors is None:
        return np.ones(size)
    mask = np.zeros(size)
    mask[np.asarray(anchors, dtype=np.int64)] = 1.0
    return mask


def loss_sa_to_l(sim: SimilarityMatrix, batch: Sequence[BatchSample], gamma: float,
                 anchors: Optional[np.ndarray] = None,
                 normalization: str = SaToLNormalization.BATCH.value) -> LossTerm:
    """State-action anchors classify their own goal among the unique goal columns.

    Args:
        sim: similarity logits (B, G)
        batch: samples in row order
        gamma: discount for the per-anchor weight gamma^(T_i - t_i)
        anchors: optional subset of row indices to score; normalization stays global
        normalization: "batch" or "weight_sum"

    Returns:
        LossTerm with the loss and its gradient wrt the logits
    """
    logits = sim.logits
    size = len(batch)
    if logits.shape[0] != size:
        raise ValidationError(f"logits have {logits.shape[0]} rows for a batch of {size}")
    if len(sim.goal_ids) < 2:
        logger.warning("sa->l loss on a single-task batch has no negatives; returning 0")

    cols = own_goal_columns(batch, sim.goal_ids)
    weights = np.exp(log_discounts(batch, gamma))
    if normalization == SaToLNormalization.BATCH.value:
        denom = float(size)
    elif normalization == SaToLNormalization.WEIGHT_SUM.value:
        denom = float(weights.sum())
    else:
        raise ValidationError(f"unknown sa->l normalization '{normalization}'")

    scale = _anchor_mask(anchors, size) * weights / denom
    rows = np.arange(size)
    log_probs = logits - logsumexp(logits, axis=1, keepdims=True)
    value = float(np.sum(scale * -log_probs[rows, cols]))

    grad = np.exp(log_probs)
    grad[rows, cols] -= 1.0
    grad *= scale[:, None]
    return LossTerm(value, grad)


def loss_l_to_sa(sim: SimilarityMatrix, weights: TemporalWeightTable, batch: Sequence[BatchSample],
                 anchors: Optional[np.ndarray] = None) -> LossTerm:
    """Goal anchors match the temporal-weight distribution over every sample of the batch.

    Each goal column is one anchor; its softmax runs over all B rows. The mean is over
    the G goal columns. anchors optionally restricts which columns are scored.
    """
    logits = sim.logits
    num_goals = len(sim.goal_ids)
    if logits.shape[0] != len(batch) or weights.weights.shape != (len(batch), len(batch)):
        raise ValidationError("similarity, weight table and batch sizes disagree")

    targets = weights.for_goals(batch, sim.goal_ids).T
    scale = _anchor_mask(anchors, num_goals) / num_goals
    log_probs = logits - logsumexp(logits, axis=0, keepdims=True)
    value = float(np.sum(scale * np.sum(targets * -log_probs, axis=0)))
    grad = (np.exp(log_probs) - targets) * scale[None, :]
    return LossTerm(value, grad)


@dataclass
class CrlLoss:
    """lambda * (sa->l + l->sa) with its logit gradient."""
    value: float
    sa_to_l: float
    l_to_sa: float
    grad: np.ndarray


def combined_crl_loss(sim: SimilarityMatrix, batch: Sequence[BatchSample], gamma: float,
                      lambda_crl: float, weights: Optional[TemporalWeightTable] = None,
                      sample_anchors: Optional[np.ndarray] = None,
                      goal_anchors: Optional[np.ndarray] = None,
                      normalization: str = SaToLNormalization.BATCH.value) -> CrlLoss:
    """Combined contrastive objective.

    Component values are reported unscaled; value and grad carry lambda_crl.
    """
    if lambda_crl < 0:
        raise ValidationError(f"lambda_crl must be >= 0, got {lambda_crl}")
    if weights is None:
        weights = temporal_weights(batch, gamma)
    forward = loss_sa_to_l(sim, batch, gamma, sample_anchors, normalization)
    backward = loss_l_to_sa(sim, weights, batch, goal_anchors)
    if lambda_crl == 0:
        return CrlLoss(0.0, forward.value, backward.value, np.zeros_like(sim.logits))
    value = lambda_crl * (forward.value + backward.value)
    grad = lambda_crl * (forward.grad + backward.grad)
    return CrlLoss(value, forward.value, backward.value, grad)


def bc_token_loss(logits: np.ndarray, targets: np.ndarray,
                  mask: Optional[np.ndarray] = None) -> LossTerm:
    """Mean next-token cross-entropy over the positions selected by mask.

    Raises:
        IndexError: a target lies outside the vocabulary
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    vocab = logits.shape[1]
    if targets.shape[0] != logits.shape[0]:
        raise ValidationError(f"{targets.shape[0]} targets for {logits.shape[0]} logit rows")
    bad = (targets < 0) | (targets >= vocab)
    if bad.any():
        raise IndexError(f"target token {int(targets[bad][0])} outside vocabulary of size {vocab}")

    selected = np.ones(len(targets)) if mask is None else np.asarray(mask, dtype=np.float64)
    count = selected.sum()
    if count == 0:
        return LossTerm(0.0, np.zeros_like(logits))
    rows = np.arange(len(targets))
    log_probs = logits - logsumexp(logits, axis=1, keepdims=True)
    value = float(np.sum(selected * -log_probs[rows, targets]) / count)
    grad = softmax(logits, axis=1)
    grad[rows, targets] -= 1.0
    grad *= (selected / count)[:, None]
    return LossTerm(value, grad)


def compute_similarity(phi: np.ndarray, psi: np.ndarray, goal_ids: Sequence[int],
                       mode: str = NormalizationMode.RAW.value,
                       log_temperature: float = 0.0) -> tuple[SimilarityMatrix, SimilarityCache]:
    """Logits between raw state-action embeddings (B, d) and goal embeddings (G, d)."""
    phi = np.asarray(phi, dtype=np.float64)
    psi = np.asarray(psi, dtype=np.float64)
    phi_norm = np.maximum(np.linalg.norm(phi, axis=1, keepdims=True), NORM_EPS)
    psi_norm = np.maximum(np.linalg.norm(psi, axis=1, keepdims=True), NORM_EPS)
    if mode == NormalizationMode.RAW.value:
        temperature = 1.0
        phi_unit, psi_unit = phi, psi
        logits = phi @ psi.T
    elif mode == NormalizationMode.L2_TEMP.value:
        temperature = float(np.exp(log_temperature))
        phi_unit, psi_unit = phi / phi_norm, psi / psi_norm
        logits = temperature * (phi_unit @ psi_unit.T)
    else:
        raise ValidationError(f"unknown normalization mode '{mode}'")
    sim = SimilarityMatrix(logits, tuple(goal_ids), mode, temperature)
    cache = SimilarityCache(mode, phi_unit, psi_unit, phi_norm, psi_norm, temperature, logits)
    return sim, cache


def _unit_backward(unit: np.ndarray, norm: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    radial = np.sum(unit * grad_unit, axis=1, keepdims=True)
    return (grad_unit - unit * radial) / norm


def similarity_backward(grad_logits: np.ndarray,
                        cache: SimilarityCache) -> tuple[np.ndarray, np.ndarray, float]:
    """Gradients wrt raw phi, raw psi and log-temperature."""
    if cache.mode == NormalizationMode.RAW.value:
        return grad_logits @ cache.psi_unit, grad_logits.T @ cache.phi_unit, 0.0
    grad_phi_unit = cache.temperature * (grad_logits @ cache.psi_unit)
    grad_psi_unit = cache.temperature * (grad_logits.T @ cache.phi_unit)
    grad_log_temp = float(np.sum(grad_logits * cache.logits))
    return (_unit_backward(cache.phi_unit, cache.phi_norm, grad_phi_unit),
            _unit_backward(cache.psi_unit, cache.psi_norm, grad_psi_unit),
            grad_log_temp)
