"""Synthetic goal-reaching corpora and discounted-occupancy oracles.

Every MDP built here has a deterministic successor graph (except the small
stochastic ones used in oracle tests) and one extra absorbing sink state.
All actions at a goal state lead to the sink, so an expert path visits its
goal exactly once and the discounted occupancy of a demonstration sample is
(1 - gamma) * gamma ** (T - t).
"""

import hashlib
import logging
from collections import deque
from dataclasses import dataclass, field, asdict
from enum import Enum
from typing import Optional

import numpy as np
from scipy import linalg

from .errors import CorpusError, OracleConvergenceError, ValidationError

logger = logging.getLogger(__name__)

# Transition validation
ROW_SUM_TOLERANCE = 1e-12

# Oracle solver settings
DIRECT_SOLVE_MAX_STATES = 512
POWER_ITERATION_TOLERANCE = 1e-12
POWER_ITERATION_MAX_ITERS = 200_000

UNREACHABLE = -1


class MdpFamily(str, Enum):
    """Shapes of synthetic MDP."""
    CHAIN = "chain"
    GRID = "grid"
    DAG = "dag"


class StartRegion(str, Enum):
    """Where expert rollouts for a task may start."""
    ANY = "any"          # any start state that reaches the goal
    VORONOI = "voronoi"  # only states strictly closer to this goal than to any other


# Grid actions: up, down, left, right
GRID_MOVES = ((0, -1), (0, 1), (-1, 0), (1, 0))


@dataclass
class Mdp:
    """Tabular MDP with a goal-id -> goal-state map.

    transition[s, a] is a distribution over next states. The last state is
    the absorbing sink when sink_state is set.
    """
    num_states: int
    num_actions: int
    transition: np.ndarray
    goal_states: dict[int, int]
    start_states: tuple[int, ...] = ()
    sink_state: Optional[int] = None

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        expected = (self.num_states, self.num_actions, self.num_states)
        if self.transition.shape != expected:
            raise ValidationError(f"transition has shape {self.transition.shape}, expected {expected}")
        if np.any(self.transition < 0):
            raise ValidationError("transition has negative probabilities")
        row_error = np.abs(self.transition.sum(axis=2) - 1.0).max()
        if row_error > ROW_SUM_TOLERANCE:
            raise ValidationError(f"transition rows must sum to 1 (max error {row_error:.3e})")
        for goal_id, state in self.goal_states.items():
            if not 0 <= state < self.num_states:
                raise ValidationError(f"goal {goal_id} has out-of-range state {state}")
        if not self.start_states:
            excluded = set(self.goal_states.values()) | {self.sink_state}
            self.start_states = tuple(s for s in range(self.num_states) if s not in excluded)
        self.start_states = tuple(int(s) for s in self.start_states)

    @property
    def goal_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self.goal_states))

    def goal_index(self, goal_id: int) -> int:
        """Column of goal_id in oracle tables and policies."""
        try:
            return self.goal_ids.index(goal_id)
        except ValueError:
            raise ValidationError(f"unknown goal id {goal_id}") from None

    @property
    def is_deterministic(self) -> bool:
        return bool(np.all((self.transition == 0.0) | (self.transition == 1.0)))

    def successor(self, state: int, action: int) -> int:
        """Next state of a deterministic transition."""
        return int(np.argmax(self.transition[state, action]))

    def check_index(self, state: int, action: int) -> None:
        if not 0 <= state < self.num_states:
            raise ValidationError(f"state {state} out of range [0, {self.num_states})")
        if not 0 <= action < self.num_actions:
            raise ValidationError(f"action {action} out of range [0, {self.num_actions})")

    def goal_distances(self, goal_id: int) -> np.ndarray:
        """Shortest step count from each state into the goal, or UNREACHABLE.

        Other goal states and the sink are never passed through.
        """
        goal_state = self.goal_states[goal_id]
        blocked = set(self.goal_states.values()) | {self.sink_state}
        support = self.transition > 0.0
        predecessors: list[list[int]] = [[] for _ in range(self.num_states)]
        for s, _, nxt in zip(*np.nonzero(support)):
            predecessors[nxt].append(int(s))

        dist = np.full(self.num_states, UNREACHABLE, dtype=np.int64)
        dist[goal_state] = 0
        queue = deque([goal_state])
        while queue:
            node = queue.popleft()
            for prev in predecessors[node]:
                if prev in blocked or dist[prev] != UNREACHABLE:
                    continue
                dist[prev] = dist[node] + 1
                queue.append(prev)
        return dist

    def check_reachability(self) -> None:
        """Every goal must be reachable from every start state."""
        for goal_id in self.goal_ids:
            dist = self.goal_distances(goal_id)
            for start in self.start_states:
                if dist[start] == UNREACHABLE:
                    raise CorpusError(
                        f"goal {goal_id} (state {self.goal_states[goal_id]}) is unreachable "
                        f"from start state {start}",
                        goal_id=goal_id,
                    )


@dataclass(frozen=True)
class GoalSpec:
    """A task goal and the symbol string standing in for its instruction."""
    goal_id: int
    token_seq: tuple[int, ...]
    target_state: int

    def __post_init__(self):
        if not self.token_seq:
            raise ValidationError(f"goal {self.goal_id} has an empty token sequence")


@dataclass(frozen=True)
class Trajectory:
    """Expert rollout s_1..s_T, a_1..a_T; a_T moves s_T into the goal."""
    goal_id: int
    states: tuple[int, ...]
    actions: tuple[int, ...]

    def __post_init__(self):
        if len(self.states) < 1:
            raise ValidationError("trajectory must have at least one step")
        if len(self.states) != len(self.actions):
            raise ValidationError(
                f"trajectory has {len(self.states)} states but {len(self.actions)} actions"
            )

    @property
    def length(self) -> int:
        return len(self.states)


@dataclass
class CorpusConfig:
    """Corpus generation settings.

    size is the chain length, the grid side, or the DAG node count.
    """
    family: str = MdpFamily.CHAIN.value
    num_tasks: int = 2
    trajectories_per_task: int = 4
    size: int = 24
    gamma: float = 0.995
    seed: int = 0
    token_length: int = 4
    vocab_size: int = 32
    min_length: int = 1
    start_region: str = StartRegion.VORONOI.value
    dag_actions: int = 4

    def validate(self) -> None:
        if self.family not in {f.value for f in MdpFamily}:
            raise ValidationError(f"unknown MDP family '{self.family}'")
        if self.start_region not in {r.value for r in StartRegion}:
            raise ValidationError(f"unknown start region '{self.start_region}'")
        if self.num_tasks < 2:
            raise ValidationError("num_tasks must be at least 2")
        if self.trajectories_per_task < 1:
            raise ValidationError("trajectories_per_task must be at least 1")
        if self.size < 2:
            raise ValidationError("size must be at least 2")
        if not 0.0 < self.gamma < 1.0:
            raise ValidationError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.token_length < 1 or self.vocab_size < 2:
            raise ValidationError("token_length >= 1 and vocab_size >= 2 are required")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Corpus:
    """Generated MDP, goals and expert trajectories."""
    config: CorpusConfig
    mdp: Mdp
    goals: list[GoalSpec]
    trajectories: list[Trajectory] = field(default_factory=list)

    def goal(self, goal_id: int) -> GoalSpec:
        for spec in self.goals:
            if spec.goal_id == goal_id:
                return spec
        raise ValidationError(f"unknown goal id {goal_id}")

    def trajectories_for(self, goal_id: int) -> list[Trajectory]:
        return [traj for traj in self.trajectories if traj.goal_id == goal_id]


def _goal_only_to_sink(transition: np.ndarray, goal_states, sink: int) -> None:
    for state in goal_states:
        transition[state] = 0.0
        transition[state, :, sink] = 1.0
    transition[sink] = 0.0
    transition[sink, :, sink] = 1.0


def chain_mdp(length: int, goal_states: dict[int, int],
              start_states: tuple[int, ...] = ()) -> Mdp:
    """Chain 0..length-1 with actions right (0) and left (1); sink at index length."""
    num_states = length + 1
    sink = length
    transition = np.zeros((num_states, 2, num_states))
    for s in range(length):
        transition[s, 0, min(s + 1, length - 1)] = 1.0
        transition[s, 1, max(s - 1, 0)] = 1.0
    _goal_only_to_sink(transition, goal_states.values(), sink)
    mdp = Mdp(num_states, 2, transition, dict(goal_states), start_states, sink)
    mdp.check_reachability()
    return mdp


def grid_mdp(side: int, goal_states: dict[int, int],
             start_states: tuple[int, ...] = ()) -> Mdp:
    """side x side grid, state = y * side + x, walls keep the agent in place."""
    cells = side * side
    sink = cells
    transition = np.zeros((cells + 1, len(GRID_MOVES), cells + 1))
    for y in range(side):
        for x in range(side):
            for action, (dx, dy) in enumerate(GRID_MOVES):
                nx = min(max(x + dx, 0), side - 1)
                ny = min(max(y + dy, 0), side - 1)
                transition[y * side + x, action, ny * side + nx] = 1.0
    _goal_only_to_sink(transition, goal_states.values(), sink)
    mdp = Mdp(cells + 1, len(GRID_MOVES), transition, dict(goal_states), start_states, sink)
    mdp.check_reachability()
    return mdp


def random_dag_mdp(num_nodes: int, num_goals: int, num_actions: int,
                   rng: np.random.Generator) -> Mdp:
    """Forward-only random graph whose last interior node branches to every goal.

    Interior nodes are 0..m-1 with m = num_nodes - num_goals; goal g lives at m + g.
    Action 0 always steps to the next interior node, so every goal is reachable.
    """
    interior = num_nodes - num_goals
    if interior < 2:
        raise ValidationError("random DAG needs at least two interior nodes")
    num_actions = max(num_actions, num_goals, 2)
    sink = num_nodes
    goal_nodes = [interior + g for g in range(num_goals)]
    transition = np.zeros((num_nodes + 1, num_actions, num_nodes + 1))
    for node in range(interior - 1):
        transition[node, 0, node + 1] = 1.0
        targets = list(range(node + 1, interior)) + goal_nodes
        for action in range(1, num_actions):
            transition[node, action, targets[rng.integers(len(targets))]] = 1.0
    for action in range(num_actions):
        transition[interior - 1, action, goal_nodes[action % num_goals]] = 1.0
    goal_states = {g: node for g, node in enumerate(goal_nodes)}
    _goal_only_to_sink(transition, goal_nodes, sink)
    mdp = Mdp(num_nodes + 1, num_actions, transition, goal_states, tuple(range(interior)), sink)
    mdp.check_reachability()
    return mdp


def expert_policy(mdp: Mdp) -> np.ndarray:
    """Deterministic shortest-path policy, shape (num_states, num_goals).

    Ties go to the lowest action index; states that cannot reach a goal get action 0.
    """
    if not mdp.is_deterministic:
        raise ValidationError("expert_policy needs a deterministic MDP")
    policy = np.zeros((mdp.num_states, len(mdp.goal_ids)), dtype=np.int64)
    for gi, goal_id in enumerate(mdp.goal_ids):
        dist = mdp.goal_distances(goal_id)
        for state in range(mdp.num_states):
            if dist[state] <= 0:
                continue
            for action in range(mdp.num_actions):
                nxt = mdp.successor(state, action)
                if dist[nxt] == dist[state] - 1:
                    policy[state, gi] = action
                    break
    return policy


def expert_rollout(mdp: Mdp, policy: np.ndarray, start: int, goal_id: int) -> Trajectory:
    """Follow the expert policy from start until the next state is the goal."""
    goal_state = mdp.goal_states[goal_id]
    gi = mdp.goal_index(goal_id)
    if mdp.goal_distances(goal_id)[start] <= 0:
        raise CorpusError(f"goal {goal_id} is unreachable from state {start}", goal_id=goal_id)
    states, actions = [], []
    state = start
    for _ in range(mdp.num_states):
        action = int(policy[state, gi])
        states.append(state)
        actions.append(action)
        state = mdp.successor(state, action)
        if state == goal_state:
            return Trajectory(goal_id, tuple(states), tuple(actions))
    raise CorpusError(f"expert rollout toward goal {goal_id} did not terminate", goal_id=goal_id)


def goal_tokens(goal_id: int, length: int, vocab_size: int) -> tuple[int, ...]:
    """Hash a goal id into a fixed symbol string."""
    digest = hashlib.sha256(f"goal:{goal_id}".encode()).digest()
    while len(digest) < length:
        digest += hashlib.sha256(digest).digest()
    return tuple(b % vocab_size for b in digest[:length])


def _place_goals(config: CorpusConfig, rng: np.random.Generator) -> Mdp:
    family = MdpFamily(config.family)
    if family == MdpFamily.CHAIN:
        # an inner goal would cut the chain in two
        if config.num_tasks > 2:
            raise CorpusError(f"a chain holds at most two goals, got {config.num_tasks}")
        return chain_mdp(config.size, {0: 0, 1: config.size - 1})
    if family == MdpFamily.GRID:
        side = config.size
        corners = [0, side - 1, side * (side - 1), side * side - 1]
        cells = corners[:config.num_tasks]
        if config.num_tasks > len(corners):
            interior = [c for c in range(side * side) if c not in corners]
            extra = rng.choice(interior, size=config.num_tasks - len(corners), replace=False)
            cells += [int(c) for c in extra]
        return grid_mdp(side, {g: c for g, c in enumerate(cells)})
    return random_dag_mdp(config.size, config.num_tasks, config.dag_actions, rng)


def _start_candidates(mdp: Mdp, goal_id: int, distances: dict[int, np.ndarray],
                      config: CorpusConfig) -> list[int]:
    own = distances[goal_id]
    candidates = []
    for state in mdp.start_states:
        if own[state] < max(config.min_length, 1):
            continue
        if config.start_region == StartRegion.VORONOI.value:
            others = [distances[g][state] for g in mdp.goal_ids if g != goal_id]
            if any(0 <= d <= own[state] for d in others):
                continue
        candidates.append(state)
    return candidates


def generate_corpus(config: CorpusConfig) -> Corpus:
    """Build an MDP, its goal specs and expert trajectories, deterministically per seed.

    Raises:
        CorpusError: a goal cannot be reached, or has no admissible start state
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    mdp = _place_goals(config, rng)
    policy = expert_policy(mdp)
    distances = {g: mdp.goal_distances(g) for g in mdp.goal_ids}

    goals = [
        GoalSpec(g, goal_tokens(g, config.token_length, config.vocab_size), mdp.goal_states[g])
        for g in mdp.goal_ids
    ]
    trajectories = []
    for goal_id in mdp.goal_ids:
        candidates = _start_candidates(mdp, goal_id, distances, config)
        if not candidates:
            raise CorpusError(
                f"goal {goal_id} has no start state with min_length={config.min_length} "
                f"in region '{config.start_region}'",
                goal_id=goal_id,
            )
        for _ in range(config.trajectories_per_task):
            start = candidates[int(rng.integers(len(candidates)))]
            trajectories.append(expert_rollout(mdp, policy, start, goal_id))

    logger.info("Generated %s corpus: %d states, %d goals, %d trajectories",
                config.family, mdp.num_states, len(goals), len(trajectories))
    return Corpus(config, mdp, goals, trajectories)


def split_corpus(corpus: Corpus, heldout_per_task: int = 1) -> tuple[Corpus, Corpus]:
    """Split trajectories by start state into (train, held-out) corpora.

    Per task, trajectories from the heldout_per_task start states nearest the
    goal are held out; at least one start state always stays in training.

    Raises:
        ValidationError: heldout_per_task < 1
        CorpusError: a task has fewer than two distinct start states
    """
    if heldout_per_task < 1:
        raise ValidationError("heldout_per_task must be >= 1")
    train, heldout = [], []
    for goal_id in corpus.mdp.goal_ids:
        trajectories = corpus.trajectories_for(goal_id)
        dist = corpus.mdp.goal_distances(goal_id)
        starts = sorted({t.states[0] for t in trajectories}, key=lambda s: (dist[s], s))
        if len(starts) < 2:
            raise CorpusError(f"goal {goal_id} has {len(starts)} distinct start state(s), need 2 to split",
                              goal_id=goal_id)
        held = set(starts[:min(heldout_per_task, len(starts) - 1)])
        for traj in trajectories:
            (heldout if traj.states[0] in held else train).append(traj)
    logger.info("Split corpus: %d training and %d held-out trajectories", len(train), len(heldout))
    return (Corpus(corpus.config, corpus.mdp, corpus.goals, train),
            Corpus(corpus.config, corpus.mdp, corpus.goals, heldout))


def goal_reaching_reward(mdp: Mdp, state: int, action: int, goal_id: int, gamma: float) -> float:
    """(1 - gamma) * p(s' = s_goal | s, a)."""
    mdp.check_index(state, action)
    _check_gamma(gamma)
    goal_state = mdp.goal_states.get(goal_id)
    if goal_state is None:
        raise ValidationError(f"unknown goal id {goal_id}")
    return float((1.0 - gamma) * mdp.transition[state, action, goal_state])


def _check_gamma(gamma: float) -> None:
    if not 0.0 < gamma < 1.0:
        raise ValidationError(f"gamma must lie in (0, 1), got {gamma}")


@dataclass
class OccupancyOracle:
    """Q[s, a, g] = (1 - gamma) * sum_k gamma^k Pr(s_{t+1+k} = s_g | s, a, then policy)."""
    gamma: float
    q_table: np.ndarray
    goal_ids: tuple[int, ...]

    def q(self, state: int, action: int, goal_id: int) -> float:
        return float(self.q_table[state, action, self.goal_ids.index(goal_id)])

    @property
    def reach_table(self) -> np.ndarray:
        """Same table without the goal-independent (1 - gamma) factor."""
        return self.q_table / (1.0 - self.gamma)

    def bellman_residual(self, mdp: Mdp, policy: np.ndarray) -> float:
        """max |Q - (r_g + gamma * E[Q(s', policy(s', g), g)])| over (s, a, g)."""
        worst = 0.0
        states = np.arange(mdp.num_states)
        for gi, goal_id in enumerate(self.goal_ids):
            goal_state = mdp.goal_states[goal_id]
            reward = (1.0 - self.gamma) * mdp.transition[:, :, goal_state]
            on_policy = self.q_table[states, policy[:, gi], gi]
            target = reward + self.gamma * mdp.transition @ on_policy
            worst = max(worst, float(np.abs(self.q_table[:, :, gi] - target).max()))
        return worst


def _solve_values(p_pi: np.ndarray, r_pi: np.ndarray, gamma: float,
                  method: str, max_iters: int) -> np.ndarray:
    n = len(r_pi)
    if method == "solve" or (method == "auto" and n <= DIRECT_SOLVE_MAX_STATES):
        return linalg.solve(np.eye(n) - gamma * p_pi, r_pi)
    values = r_pi.copy()
    residual = np.inf
    for _ in range(max_iters):
        updated = r_pi + gamma * (p_pi @ values)
        residual = float(np.abs(updated - values).max())
        values = updated
        if residual < POWER_ITERATION_TOLERANCE:
            return values
    raise OracleConvergenceError(
        f"power iteration did not converge in {max_iters} iterations (residual {residual:.3e})",
        residual=residual,
    )


def occupancy_oracle(mdp: Mdp, policy: np.ndarray, gamma: float, method: str = "auto",
                     max_iters: int = POWER_ITERATION_MAX_ITERS) -> OccupancyOracle:
    """Exact discounted goal occupancy for every (state, action, goal).

    Args:
        mdp: the MDP
        policy: (num_states, num_goals) action table
        gamma: discount in (0, 1)
        method: "auto", "solve" or "power"
        max_iters: power-iteration cap

    Returns:
        OccupancyOracle with q_table of shape (num_states, num_actions, num_goals)
    """
    _check_gamma(gamma)
    policy = np.asarray(policy, dtype=np.int64)
    if policy.shape != (mdp.num_states, len(mdp.goal_ids)):
        raise ValidationError(
            f"policy has shape {policy.shape}, expected {(mdp.num_states, len(mdp.goal_ids))}"
        )
    if policy.min() < 0 or policy.max() >= mdp.num_actions:
        raise ValidationError("policy contains out-of-range actions")

    states = np.arange(mdp.num_states)
    q_table = np.zeros((mdp.num_states, mdp.num_actions, len(mdp.goal_ids)))
    for gi, goal_id in enumerate(mdp.goal_ids):
        goal_state = mdp.goal_states[goal_id]
        p_pi = mdp.transition[states, policy[:, gi]]
        r_pi = (1.0 - gamma) * p_pi[:, goal_state]
        values = _solve_values(p_pi, r_pi, gamma, method, max_iters)
        q_table[:, :, gi] = (1.0 - gamma) * mdp.transition[:, :, goal_state] \
            + gamma * mdp.transition @ values
    return OccupancyOracle(gamma, q_table, mdp.goal_ids)


def _sample_rows(rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(rows, axis=1)
    u = rng.random(len(rows))[:, None]
    return np.minimum((u >= cdf).sum(axis=1), rows.shape[1] - 1)


def monte_carlo_occupancy(mdp: Mdp, policy: np.ndarray, state: int, action: int,
                          goal_id: int, gamma: float, num_rollouts: int,
                          rng: np.random.Generator) -> tuple[float, float]:
    """Estimate Q(s, a, g) by sampling the time offset K ~ Geometric and rolling out.

    Returns:
        (estimate, standard error)
    """
    mdp.check_index(state, action)
    _check_gamma(gamma)
    gi = mdp.goal_index(goal_id)
    offsets = rng.geometric(1.0 - gamma, size=num_rollouts) - 1
    current = _sample_rows(np.broadcast_to(mdp.transition[state, action],
                                           (num_rollouts, mdp.num_states)), rng)
    for step in range(1, int(offsets.max()) + 1):
        active = np.nonzero(offsets >= step)[0]
        rows = mdp.transition[current[active], policy[current[active], gi]]
        current[active] = _sample_rows(rows, rng)
    hits = current == mdp.goal_states[goal_id]
    estimate = float(hits.mean())
    return estimate, float(np.sqrt(max(estimate * (1.0 - estimate), 1e-300) / num_rollouts))
