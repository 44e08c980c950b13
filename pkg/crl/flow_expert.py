"""Flow-matching action head.

Noised chunks follow the straight path x_tau = tau * a + (1 - tau) * eps and the
head regresses the velocity a - eps. Sampling integrates forward Euler from
noise at tau = 0 to data at tau = 1.
"""

import logging
import math
from dataclasses import dataclass, asdict
from enum import Enum
from typing import Callable, Optional, Union

import numpy as np

from .encoders import Optimizer, OptimizerKind, encode_goal
from .errors import NumericalAbort, ValidationError

logger = logging.getLogger(__name__)

VelocityField = Callable[[np.ndarray, float, Optional[np.ndarray]], np.ndarray]


class HeadKind(str, Enum):
    MLP = "mlp"
    LINEAR = "linear"


class TauDistribution(str, Enum):
    UNIFORM = "uniform"


@dataclass(eq=False)
class ActionChunk:
    """H x d_a block of continuous actions."""
    values: np.ndarray

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if self.values.shape[0] < 1:
            raise ValidationError("action chunk needs H >= 1")
        if not np.isfinite(self.values).all():
            raise ValidationError("action chunk must be finite")

    @property
    def horizon(self) -> int:
        return self.values.shape[0]


@dataclass(eq=False)
class FlowState:
    tau: Union[float, np.ndarray]
    noised: np.ndarray
    eps: np.ndarray


def _tau_like(tau, clean: np.ndarray) -> np.ndarray:
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(tau < 0.0) or np.any(tau > 1.0):
        raise ValidationError("tau must lie in [0, 1]")
    if tau.ndim == 1 and clean.ndim > 1:
        tau = tau.reshape((-1,) + (1,) * (clean.ndim - 1))
    return tau


def interpolate(clean, eps, tau) -> FlowState:
    """noised = tau * clean + (1 - tau) * eps; tau may carry one value per batch row."""
    clean = clean.values if isinstance(clean, ActionChunk) else np.asarray(clean, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if clean.shape != eps.shape:
        raise ValidationError(f"clean shape {clean.shape} != noise shape {eps.shape}")
    t = _tau_like(tau, clean)
    return FlowState(tau, t * clean + (1.0 - t) * eps, eps)


class FlowHead:
    """Velocity model f(x_tau, tau, condition) as an MLP or a linear map.

    Inputs are flattened chunks concatenated with tau and the condition vector.
    """

    def __init__(self, horizon: int, action_dim: int, cond_dim: int, kind: str = HeadKind.MLP.value,
                 hidden_width: int = 128, rng: Optional[np.random.Generator] = None):
        if kind not in {k.value for k in HeadKind}:
            raise ValidationError(f"unknown flow head kind '{kind}'")
        if horizon < 1 or action_dim < 1 or cond_dim < 0:
            raise ValidationError("horizon and action_dim must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.horizon = horizon
        self.action_dim = action_dim
        self.cond_dim = cond_dim
        self.kind = kind
        self.hidden_width = hidden_width
        in_dim = horizon * action_dim + 1 + cond_dim
        out_dim = horizon * action_dim
        if kind == HeadKind.MLP.value:
            self.params = {
                "w1": rng.normal(0.0, 1.0 / math.sqrt(in_dim), (in_dim, hidden_width)),
                "b1": np.zeros(hidden_width),
                "w2": rng.normal(0.0, 1.0 / math.sqrt(hidden_width), (hidden_width, out_dim)),
                "b2": np.zeros(out_dim),
            }
        else:
            self.params = {"w": np.zeros((in_dim, out_dim)), "b": np.zeros(out_dim)}

    @property
    def chunk_shape(self) -> tuple[int, int]:
        return self.horizon, self.action_dim

    def flatten(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params.values()])

    def load_flat(self, flat: np.ndarray) -> "FlowHead":
        expected = sum(array.size for array in self.params.values())
        if len(flat) != expected:
            raise ValidationError(f"flat vector has {len(flat)} entries, expected {expected}")
        offset = 0
        for name, array in self.params.items():
            self.params[name] = np.asarray(flat[offset:offset + array.size], dtype=np.float64).reshape(array.shape)
            offset += array.size
        return self

    def config(self) -> dict:
        return {"horizon": self.horizon, "action_dim": self.action_dim, "cond_dim": self.cond_dim,
                "kind": self.kind, "hidden_width": self.hidden_width}

    def _inputs(self, noised, tau, condition) -> tuple[np.ndarray, bool]:
        noised = np.asarray(noised, dtype=np.float64)
        single = noised.ndim == 2
        batch = noised.reshape(-1, self.horizon * self.action_dim)
        n = batch.shape[0]
        taus = np.broadcast_to(np.asarray(tau, dtype=np.float64).reshape(-1), (n,))
        if self.cond_dim:
            cond = np.asarray(condition, dtype=np.float64).reshape(-1, self.cond_dim)
            cond = np.broadcast_to(cond, (n, self.cond_dim))
        else:
            cond = np.zeros((n, 0))
        return np.concatenate([batch, taus[:, None], cond], axis=1), single

    def forward(self, noised, tau, condition=None) -> tuple[np.ndarray, tuple]:
        z, single = self._inputs(noised, tau, condition)
        if self.kind == HeadKind.MLP.value:
            hidden = np.tanh(z @ self.params["w1"] + self.params["b1"])
            out = hidden @ self.params["w2"] + self.params["b2"]
        else:
            hidden = None
            out = z @ self.params["w"] + self.params["b"]
        shape = self.chunk_shape if single else (-1,) + self.chunk_shape
        return out.reshape(shape), (z, hidden)

    def __call__(self, noised, tau, condition=None) -> np.ndarray:
        return self.forward(noised, tau, condition)[0]

    def backward(self, cache: tuple, grad_out: np.ndarray) -> np.ndarray:
        """Flat parameter gradient for an upstream gradient on the velocity."""
        z, hidden = cache
        g = grad_out.reshape(z.shape[0], -1)
        if self.kind == HeadKind.LINEAR.value:
            return np.concatenate([(z.T @ g).ravel(), g.sum(axis=0)])
        grad_hidden = (g @ self.params["w2"].T) * (1.0 - hidden ** 2)
        return np.concatenate([
            (z.T @ grad_hidden).ravel(), grad_hidden.sum(axis=0),
            (hidden.T @ g).ravel(), g.sum(axis=0),
        ])


def fm_loss(model: FlowHead, clean, eps, tau, condition=None) -> tuple[float, np.ndarray]:
    """Mean squared error between f(x_tau, tau, c) and clean - eps, with the flat gradient.

    Raises:
        NumericalAbort: the model produced a non-finite velocity
    """
    state = interpolate(clean, eps, tau)
    clean = clean.values if isinstance(clean, ActionChunk) else np.asarray(clean, dtype=np.float64)
    target = clean - state.eps
    prediction, cache = model.forward(state.noised, tau, condition)
    if not np.isfinite(prediction).all():
        raise NumericalAbort("flow head produced a non-finite velocity")
    residual = prediction - target
    loss = float(np.mean(residual ** 2))
    grad = model.backward(cache, 2.0 * residual / residual.size)
    return loss, grad


def initial_noise(shape: tuple[int, ...], seed: int) -> np.ndarray:
    """x_0 drawn by sample() for a given seed."""
    return np.random.default_rng(seed).standard_normal(shape)


def sample(model: Union[FlowHead, VelocityField], condition: Optional[np.ndarray] = None, steps: int = 5,
           seed: int = 0, shape: Optional[tuple[int, int]] = None) -> ActionChunk:
    """Forward Euler from tau = 0 to 1 with step 1 / steps."""
    if steps < 1:
        raise ValidationError("steps must be >= 1")
    if shape is None:
        shape = model.chunk_shape
    x = initial_noise(shape, seed)
    delta = 1.0 / steps
    for i in range(steps):
        x = x + delta * np.asarray(model(x, i * delta, condition))
    return ActionChunk(x)


def constant_field(velocity: np.ndarray) -> VelocityField:
    velocity = np.asarray(velocity, dtype=np.float64)
    return lambda x, tau, condition=None: np.broadcast_to(velocity, x.shape)


def point_mass_field(target: np.ndarray) -> VelocityField:
    """Exact velocity (a* - x) / (1 - tau) toward a point-mass target."""
    target = np.asarray(target, dtype=np.float64)
    return lambda x, tau, condition=None: (target - x) / (1.0 - tau)


def gaussian_field(mean: np.ndarray, std: float) -> VelocityField:
    """Exact marginal velocity for data N(mean, std^2 I) and standard normal noise.

    v(x, tau) = m + k(tau) (x - tau m), k = (tau s^2 - (1 - tau)) / (tau^2 s^2 + (1 - tau)^2).
    The ODE carries x_0 to mean + std * x_0.
    """
    mean = np.asarray(mean, dtype=np.float64)

    def field(x, tau, condition=None):
        var = tau ** 2 * std ** 2 + (1.0 - tau) ** 2
        slope = (tau * std ** 2 - (1.0 - tau)) / var
        return mean + slope * (x - tau * mean)

    return field


def euler_gain(std: float, steps: int) -> float:
    """Product of (1 + delta k(tau_i)) that Euler applies to x_0 - 0 under gaussian_field."""
    delta = 1.0 / steps
    gain = 1.0
    for i in range(steps):
        tau = i * delta
        gain *= 1.0 + delta * (tau * std ** 2 - (1.0 - tau)) / (tau ** 2 * std ** 2 + (1.0 - tau) ** 2)
    return gain


@dataclass
class FlowConfig:
    """Flow-head settings; keys carry a flow_ prefix so they stay unique in run configs."""
    flow_enabled: bool = False
    flow_kind: str = HeadKind.MLP.value
    flow_horizon: int = 4
    flow_hidden: int = 128
    flow_steps: int = 2000
    flow_batch_size: int = 256
    flow_learning_rate: float = 3e-3
    flow_tau_distribution: str = TauDistribution.UNIFORM.value
    flow_sample_steps: int = 5
    flow_seed: int = 0

    def validate(self) -> None:
        if self.flow_kind not in {k.value for k in HeadKind}:
            raise ValidationError(f"unknown flow head kind '{self.flow_kind}'")
        if self.flow_tau_distribution not in {t.value for t in TauDistribution}:
            raise ValidationError(f"unknown tau distribution '{self.flow_tau_distribution}'")
        if min(self.flow_horizon, self.flow_hidden, self.flow_batch_size, self.flow_sample_steps) < 1:
            raise ValidationError("flow horizon, width, batch size and sample steps must be >= 1")
        if self.flow_steps < 0 or self.flow_learning_rate <= 0:
            raise ValidationError("flow_steps must be >= 0 and flow_learning_rate > 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FlowDataset:
    """Clean chunks (N, H, d_a) with their conditions (N, c)."""
    chunks: np.ndarray
    conditions: np.ndarray

    def __post_init__(self):
        if len(self.chunks) != len(self.conditions) or len(self.chunks) == 0:
            raise ValidationError("flow dataset needs one condition per chunk and at least one chunk")


def train_flow(dataset: FlowDataset, config: FlowConfig) -> tuple[FlowHead, list[float]]:
    """Adam on freshly drawn (eps, tau) pairs each step; returns the head and loss history."""
    config.validate()
    rng = np.random.default_rng(config.flow_seed)
    _, horizon, action_dim = dataset.chunks.shape
    model = FlowHead(horizon, action_dim, dataset.conditions.shape[1], config.flow_kind,
                     config.flow_hidden, rng)
    flat = model.flatten()
    optimizer = Optimizer(OptimizerKind.ADAM.value, config.flow_learning_rate, flat.size)
    history = []
    for step in range(config.flow_steps):
        rows = rng.integers(len(dataset.chunks), size=config.flow_batch_size)
        clean = dataset.chunks[rows]
        eps = rng.standard_normal(clean.shape)
        tau = rng.random(config.flow_batch_size)
        loss, grad = fm_loss(model, clean, eps, tau, dataset.conditions[rows])
        history.append(loss)
        lr = config.flow_learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / config.flow_steps))
        flat = optimizer.update(flat, grad, lr)
        model.load_flat(flat)
    if history:
        logger.info("flow head trained: %d steps, final loss %.5f", config.flow_steps, history[-1])
    return model, history


def corpus_flow_dataset(corpus, params, horizon: int) -> FlowDataset:
    """Chunks of the next H actions (unit vectors, zero after the goal) per expert step.

    Conditions are one_hot(state) followed by psi(goal) from the trained encoder.
    """
    mdp = corpus.mdp
    chunks, conditions = [], []
    for traj in corpus.trajectories:
        psi = encode_goal(params, traj.goal_id)
        for t, state in enumerate(traj.states):
            chunk = np.zeros((horizon, mdp.num_actions))
            for h, action in enumerate(traj.actions[t:t + horizon]):
                chunk[h, action] = 1.0
            chunks.append(chunk)
            conditions.append(flow_condition(mdp.num_states, state, psi))
    return FlowDataset(np.stack(chunks), np.stack(conditions))


def flow_condition(num_states: int, state: int, psi: np.ndarray) -> np.ndarray:
    code = np.zeros(num_states)
    code[state] = 1.0
    return np.concatenate([code, psi])
