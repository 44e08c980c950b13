"""State-action and goal encoders plus the loop that fits them.

phi is a tanh MLP over one_hot(state) + one_hot(action); psi is a lookup table
over goal ids. Gradients are hand-written numpy backprop through
objectives.similarity_backward.
"""

import logging
import math
from dataclasses import dataclass, field, asdict, replace
from enum import Enum
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import NumericalAbort, ValidationError
from .objectives import (
    BatchSample,
    CrlLoss,
    NormalizationMode,
    SaToLNormalization,
    bc_token_loss,
    combined_crl_loss,
    compute_similarity,
    goal_columns,
    similarity_backward,
    temporal_weights,
    NORM_EPS,
)
from .testbed import Corpus, GoalSpec

logger = logging.getLogger(__name__)

# Adam constants
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class OptimizerKind(str, Enum):
    SGD = "sgd"
    ADAM = "adam"


class LrSchedule(str, Enum):
    CONSTANT = "constant"
    COSINE = "cosine"


@dataclass
class TrainConfig:
    """Encoder training settings.

    init_temperature (1/0.07) only matters in l2_temp mode; raw mode pins the
    temperature at 1. batch_size 0 means full batch.
    """
    gamma: float = 0.995
    lambda_crl: float = 1.0
    learning_rate: float = 1e-2
    steps: int = 2000
    batch_size: int = 0
    seed: int = 0
    optimizer: str = OptimizerKind.ADAM.value
    normalization_mode: str = NormalizationMode.RAW.value
    hidden_width: int = 64
    embed_dim: int = 16
    init_scale: float = 0.05
    init_temperature: float = 1.0 / 0.07
    bc_weight: float = 0.0
    sa_to_l_normalization: str = SaToLNormalization.BATCH.value
    lr_schedule: str = LrSchedule.COSINE.value
    log_every: int = 500

    def validate(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise ValidationError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.lambda_crl < 0:
            raise ValidationError("lambda_crl must be >= 0")
        if self.learning_rate <= 0 or self.steps < 0:
            raise ValidationError("learning_rate must be > 0 and steps >= 0")
        if self.batch_size == 1 or self.batch_size < 0:
            raise ValidationError("batch_size must be 0 (full batch) or >= 2")
        if self.optimizer not in {k.value for k in OptimizerKind}:
            raise ValidationError(f"unknown optimizer '{self.optimizer}'")
        if self.normalization_mode not in {m.value for m in NormalizationMode}:
            raise ValidationError(f"unknown normalization mode '{self.normalization_mode}'")
        if self.sa_to_l_normalization not in {m.value for m in SaToLNormalization}:
            raise ValidationError(f"unknown sa->l normalization '{self.sa_to_l_normalization}'")
        if self.lr_schedule not in {s.value for s in LrSchedule}:
            raise ValidationError(f"unknown lr schedule '{self.lr_schedule}'")
        if self.embed_dim < 2 or self.hidden_width < 1:
            raise ValidationError("embed_dim must be >= 2 and hidden_width >= 1")
        if self.init_temperature <= 0 or self.bc_weight < 0:
            raise ValidationError("init_temperature must be > 0 and bc_weight >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncoderParams:
    """phi MLP weights, psi table rows (ordered like goal_ids) and log-temperature."""
    sa_w1: np.ndarray
    sa_b1: np.ndarray
    sa_w2: np.ndarray
    sa_b2: np.ndarray
    goal_table: np.ndarray
    goal_ids: tuple[int, ...]
    log_temperature: float = 0.0
    normalization_mode: str = NormalizationMode.RAW.value

    def __post_init__(self):
        if self.sa_w2.shape[1] < 2 or self.goal_table.shape[1] != self.sa_w2.shape[1]:
            raise ValidationError("embedding dimension must be >= 2 and shared by both encoders")
        if self.goal_table.shape[0] != len(self.goal_ids):
            raise ValidationError("goal_table rows must match goal_ids")
        if self.normalization_mode == NormalizationMode.RAW.value:
            self.log_temperature = 0.0
        if not np.isfinite(self.flatten()).all():
            raise ValidationError("encoder parameters must be finite")

    @property
    def embed_dim(self) -> int:
        return self.sa_w2.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.sa_w1.shape[0]

    @property
    def temperature(self) -> float:
        return math.exp(self.log_temperature)

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "sa_w1": self.sa_w1,
            "sa_b1": self.sa_b1,
            "sa_w2": self.sa_w2,
            "sa_b2": self.sa_b2,
            "goal_table": self.goal_table,
            "log_temperature": np.array([self.log_temperature]),
        }

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays().values()])

    def unflatten(self, flat: np.ndarray) -> "EncoderParams":
        """New params with this object's shapes, filled from flat."""
        flat = np.asarray(flat, dtype=np.float64)
        arrays = self.arrays()
        expected = sum(array.size for array in arrays.values())
        if flat.size != expected:
            raise ValidationError(f"flat vector has {flat.size} entries, expected {expected}")
        pieces = {}
        offset = 0
        for name, array in arrays.items():
            pieces[name] = flat[offset:offset + array.size].reshape(array.shape).copy()
            offset += array.size
        return EncoderParams(
            pieces["sa_w1"], pieces["sa_b1"], pieces["sa_w2"], pieces["sa_b2"],
            pieces["goal_table"], self.goal_ids, float(pieces["log_temperature"][0]),
            self.normalization_mode,
        )

    def norms(self) -> dict[str, float]:
        return {name: float(np.linalg.norm(a)) for name, a in self.arrays().items()}

    def goal_row(self, goal_id: int) -> int:
        try:
            return self.goal_ids.index(goal_id)
        except ValueError:
            raise ValidationError(f"goal {goal_id} is not in the encoder table") from None


def init_params(feature_dim: int, goal_ids: Sequence[int], config: TrainConfig,
                rng: Optional[np.random.Generator] = None) -> EncoderParams:
    """Gaussian weights with std init_scale, zero biases."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    h, d = config.hidden_width, config.embed_dim
    scale = config.init_scale
    log_temp = math.log(config.init_temperature) \
        if config.normalization_mode == NormalizationMode.L2_TEMP.value else 0.0
    return EncoderParams(
        sa_w1=rng.normal(0.0, scale, (feature_dim, h)),
        sa_b1=np.zeros(h),
        sa_w2=rng.normal(0.0, scale, (h, d)),
        sa_b2=np.zeros(d),
        goal_table=rng.normal(0.0, scale, (len(goal_ids), d)),
        goal_ids=tuple(goal_ids),
        log_temperature=log_temp,
        normalization_mode=config.normalization_mode,
    )


def sa_features(state: int, action: int, num_states: int, num_actions: int) -> np.ndarray:
    """one_hot(state) followed by one_hot(action)."""
    features = np.zeros(num_states + num_actions)
    features[state] = 1.0
    features[num_states + action] = 1.0
    return features


def corpus_samples(corpus: Corpus) -> list[BatchSample]:
    """Every (s_t, a_t) of every trajectory, with t counted from 1."""
    mdp = corpus.mdp
    tokens = {g.goal_id: g.token_seq for g in corpus.goals}
    samples = []
    for traj in corpus.trajectories:
        for t, (state, action) in enumerate(zip(traj.states, traj.actions), start=1):
            samples.append(BatchSample(
                sample_index=len(samples),
                task_id=traj.goal_id,
                goal_id=traj.goal_id,
                t=t,
                T=traj.length,
                sa_features=sa_features(state, action, mdp.num_states, mdp.num_actions),
                goal_tokens=tokens[traj.goal_id],
                state=state,
                action=action,
            ))
    return samples


def feature_matrix(batch: Sequence[BatchSample]) -> np.ndarray:
    return np.stack([s.sa_features for s in batch])


def _check_features(params: EncoderParams, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.shape[-1] != params.feature_dim:
        raise ValidationError(f"feature dimension {features.shape[-1]} != {params.feature_dim}")
    if not np.isfinite(features).all():
        raise ValidationError("state-action features must be finite")
    return features


def sa_forward(params: EncoderParams, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    hidden = np.tanh(features @ params.sa_w1 + params.sa_b1)
    return hidden @ params.sa_w2 + params.sa_b2, hidden


def _normalize(vectors: np.ndarray, mode: str) -> np.ndarray:
    if mode != NormalizationMode.L2_TEMP.value:
        return vectors
    norms = np.maximum(np.linalg.norm(vectors, axis=-1, keepdims=True), NORM_EPS)
    return vectors / norms


def encode_sa(params: EncoderParams, features: np.ndarray) -> np.ndarray:
    """phi(s, a) for one feature vector or a (B, F) matrix."""
    features = _check_features(params, features)
    phi, _ = sa_forward(params, features)
    return _normalize(phi, params.normalization_mode)


def encode_goal(params: EncoderParams, goal: Union[int, GoalSpec]) -> np.ndarray:
    """psi(goal); a copy of the table row."""
    goal_id = goal.goal_id if isinstance(goal, GoalSpec) else int(goal)
    row = params.goal_table[params.goal_row(goal_id)].copy()
    return _normalize(row, params.normalization_mode)


def crl_objective(params: EncoderParams, batch: Sequence[BatchSample], features: np.ndarray,
                  config: TrainConfig, weights=None) -> tuple[CrlLoss, np.ndarray]:
    """Combined CRL loss and its gradient wrt the flattened parameters."""
    goal_ids = goal_columns(batch)
    rows = np.array([params.goal_row(g) for g in goal_ids], dtype=np.int64)
    phi, hidden = sa_forward(params, features)
    psi = params.goal_table[rows]
    if not np.isfinite(phi @ psi.T).all():
        raise NumericalAbort("similarity logits overflowed", param_norms=params.norms())
    sim, cache = compute_similarity(phi, psi, goal_ids, params.normalization_mode,
                                    params.log_temperature)
    loss = combined_crl_loss(sim, batch, config.gamma, config.lambda_crl, weights,
                             normalization=config.sa_to_l_normalization)
    grad_phi, grad_psi, grad_log_temp = similarity_backward(loss.grad, cache)
    return loss, encoder_param_grads(params, features, hidden, grad_phi, rows, grad_psi, grad_log_temp)


def encoder_param_grads(params: EncoderParams, features: np.ndarray, hidden: np.ndarray,
                        grad_phi: np.ndarray, rows: np.ndarray, grad_psi: np.ndarray,
                        grad_log_temp: float) -> np.ndarray:
    grad_hidden = (grad_phi @ params.sa_w2.T) * (1.0 - hidden ** 2)
    grad_table = np.zeros_like(params.goal_table)
    np.add.at(grad_table, rows, grad_psi)
    if params.normalization_mode == NormalizationMode.RAW.value:
        grad_log_temp = 0.0
    return np.concatenate([
        (features.T @ grad_hidden).ravel(),
        grad_hidden.sum(axis=0),
        (hidden.T @ grad_phi).ravel(),
        grad_phi.sum(axis=0),
        grad_table.ravel(),
        [grad_log_temp],
    ])


class Optimizer:
    """SGD or Adam over a flat parameter vector."""

    def __init__(self, kind: str, learning_rate: float, size: int):
        self.kind = kind
        self.learning_rate = learning_rate
        self.step_count = 0
        self.first = np.zeros(size)
        self.second = np.zeros(size)

    def update(self, flat: np.ndarray, grad: np.ndarray, lr: Optional[float] = None) -> np.ndarray:
        lr = self.learning_rate if lr is None else lr
        self.step_count += 1
        if self.kind == OptimizerKind.SGD.value:
            return flat - lr * grad
        self.first = ADAM_BETA1 * self.first + (1.0 - ADAM_BETA1) * grad
        self.second = ADAM_BETA2 * self.second + (1.0 - ADAM_BETA2) * grad ** 2
        first_hat = self.first / (1.0 - ADAM_BETA1 ** self.step_count)
        second_hat = self.second / (1.0 - ADAM_BETA2 ** self.step_count)
        return flat - lr * first_hat / (np.sqrt(second_hat) + ADAM_EPS)


def scheduled_lr(config: TrainConfig, step: int) -> float:
    if config.lr_schedule == LrSchedule.CONSTANT.value or config.steps == 0:
        return config.learning_rate
    return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / config.steps))


@dataclass
class BcHead:
    """Linear softmax action head over one_hot(state) + one_hot(goal)."""
    weights: np.ndarray
    bias: np.ndarray
    num_states: int
    goal_ids: tuple[int, ...]

    def features(self, batch: Sequence[BatchSample]) -> np.ndarray:
        x = np.zeros((len(batch), self.num_states + len(self.goal_ids)))
        for row, sample in enumerate(batch):
            x[row, sample.state] = 1.0
            x[row, self.num_states + self.goal_ids.index(sample.goal_id)] = 1.0
        return x

    def logits(self, batch: Sequence[BatchSample]) -> np.ndarray:
        return self.features(batch) @ self.weights + self.bias

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.weights.ravel(), self.bias])

    def unflatten(self, flat: np.ndarray) -> "BcHead":
        split = self.weights.size
        return BcHead(flat[:split].reshape(self.weights.shape).copy(), flat[split:].copy(),
                      self.num_states, self.goal_ids)


def bc_objective(head: BcHead, batch: Sequence[BatchSample]) -> tuple[float, np.ndarray]:
    """BC cross-entropy and its gradient wrt the flattened head."""
    x = head.features(batch)
    term = bc_token_loss(x @ head.weights + head.bias, np.array([s.action for s in batch]))
    return term.value, np.concatenate([(x.T @ term.grad).ravel(), term.grad.sum(axis=0)])


@dataclass
class StepRecord:
    """Loss breakdown for one optimizer step, measured before the update."""
    step: int
    sa_to_l: float
    l_to_sa: float
    bc: float
    temperature: float
    grad_norm: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    params: EncoderParams
    history: list[StepRecord] = field(default_factory=list)
    bc_head: Optional[BcHead] = None
    initial_params: Optional[EncoderParams] = None


def draw_batch(samples: list[BatchSample], size: int, rng: np.random.Generator,
               need_two_tasks: bool) -> list[BatchSample]:
    """Random batch re-indexed from 0; the last slot switches task if only one is present."""
    order = rng.permutation(len(samples))
    chosen = list(order[:size])
    if need_two_tasks and len({samples[i].task_id for i in chosen}) < 2:
        first_task = samples[chosen[0]].task_id
        other = [i for i in order[size:] if samples[i].task_id != first_task]
        chosen[-1] = other[0]
    return [replace(samples[i], sample_index=k) for k, i in enumerate(chosen)]


def train(corpus: Corpus, config: TrainConfig,
          on_step: Optional[Callable[[StepRecord], None]] = None) -> TrainResult:
    """Fit the encoders (and optional BC head) to the corpus.

    Raises:
        ValidationError: bad config, or fewer than 2 tasks with lambda_crl > 0
        NumericalAbort: the loss became non-finite
    """
    config.validate()
    samples = corpus_samples(corpus)
    goal_ids = tuple(g.goal_id for g in corpus.goals)
    num_tasks = len({s.task_id for s in samples})
    if config.lambda_crl > 0 and num_tasks < 2:
        raise ValidationError("contrastive training needs at least 2 tasks in the corpus")
    full_batch = config.batch_size == 0 or config.batch_size >= len(samples)

    rng = np.random.default_rng(config.seed)
    params = init_params(len(samples[0].sa_features), goal_ids, config, rng)
    initial = params
    flat = params.flatten()
    optimizer = Optimizer(config.optimizer, config.learning_rate, flat.size)

    head = None
    head_flat = head_opt = None
    if config.bc_weight > 0:
        num_states = corpus.mdp.num_states
        head = BcHead(rng.normal(0.0, config.init_scale, (num_states + len(goal_ids), corpus.mdp.num_actions)),
                      np.zeros(corpus.mdp.num_actions), num_states, goal_ids)
        head_flat = head.flatten()
        head_opt = Optimizer(config.optimizer, config.learning_rate, head_flat.size)

    batch, features, weights = samples, feature_matrix(samples), None
    if full_batch:
        weights = temporal_weights(samples, config.gamma)

    history = []
    logger.info("Training encoders: %d samples, %d tasks, %d steps, mode=%s",
                len(samples), num_tasks, config.steps, config.normalization_mode)
    for step in range(config.steps):
        if not full_batch:
            batch = draw_batch(samples, config.batch_size, rng, config.lambda_crl > 0)
            features = feature_matrix(batch)
        try:
            loss, grad = crl_objective(params, batch, features, config, weights)
        except NumericalAbort as exc:
            raise NumericalAbort(f"step {step}: {exc}", step=step, param_norms=params.norms()) from None

        bc_value = 0.0
        if head is not None:
            bc_value, head_grad = bc_objective(head, batch)
            head_flat = head_opt.update(head_flat, config.bc_weight * head_grad, scheduled_lr(config, step))
            head = head.unflatten(head_flat)

        total = loss.value + config.bc_weight * bc_value
        if not (math.isfinite(total) and np.isfinite(grad).all()):
            raise NumericalAbort(f"non-finite loss at step {step}", step=step, param_norms=params.norms())

        record = StepRecord(step, loss.sa_to_l, loss.l_to_sa, bc_value, params.temperature,
                            float(np.linalg.norm(grad)), total)
        history.append(record)
        if on_step is not None:
            on_step(record)
        if config.log_every and step % config.log_every == 0:
            logger.info("step %d: total=%.6f sa_to_l=%.6f l_to_sa=%.6f grad_norm=%.3e",
                        step, total, loss.sa_to_l, loss.l_to_sa, record.grad_norm)

        flat = optimizer.update(flat, grad, scheduled_lr(config, step))
        try:
            params = params.unflatten(flat)
        except ValidationError:
            raise NumericalAbort(f"non-finite parameters after step {step}", step=step,
                                 param_norms=params.norms()) from None

    return TrainResult(params, history, head, initial)
