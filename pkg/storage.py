import io
import json
import time
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Generator, Iterable, Optional

import numpy as np
from sqlalchemy import create_engine, Column, String, Float, Integer, Boolean, Text, BigInteger, Index
from sqlalchemy.orm import declarative_base, sessionmaker, Session

from constants import (
    CHECKPOINT_FORMAT,
    CHECKPOINT_VERSION,
    CORPUS_FORMAT,
    CORPUS_VERSION,
    ErrorMsg,
)
from crl.encoders import BcHead, EncoderParams, StepRecord, TrainConfig
from crl.errors import ValidationError
from crl.flow_expert import FlowHead
from crl.masking import TimingRecord
from crl.testbed import Corpus, CorpusConfig, GoalSpec, Mdp, Trajectory
from crl.verify import SuiteResult

Base = declarative_base()


class RunRow(Base):
    __tablename__ = 'runs'

    id = Column(String, primary_key=True)
    command = Column(String, nullable=False)
    seed = Column(Integer)
    started_at = Column(BigInteger)
    config = Column(Text, default="")


class StepRow(Base):
    __tablename__ = 'train_steps'

    id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(String, nullable=False, index=True)
    step = Column(Integer, nullable=False)
    sa_to_l = Column(Float)
    l_to_sa = Column(Float)
    bc = Column(Float, default=0)
    temperature = Column(Float)
    grad_norm = Column(Float)
    total = Column(Float)

    __table_args__ = (
        Index('idx_run_step', 'run_id', 'step'),
    )


class SuiteRow(Base):
    __tablename__ = 'verify_suites'

    id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(String, nullable=False, index=True)
    suite = Column(String, nullable=False)
    passed = Column(Boolean, nullable=False)
    statistic = Column(Float)
    threshold = Column(Float)
    detail = Column(Text, default="")


class TimingRow(Base):
    __tablename__ = 'bench_timings'

    id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(String, nullable=False, index=True)
    impl = Column(String, nullable=False)
    seq_len = Column(Integer)
    block_size = Column(Integer)
    median_ns = Column(BigInteger)
    skipped_fraction = Column(Float)
    mask_kind = Column(String, default="role")


class RecordStore:
    """SQLite file of runs, training curves, verification suites and timings."""

    def __init__(self, db_path: str = ":memory:"):
        url = "sqlite://" if db_path == ":memory:" else f"sqlite:///{db_path}"
        self.engine = create_engine(url)
        Base.metadata.create_all(self.engine)
        self.SessionLocal = sessionmaker(bind=self.engine)

    @contextmanager
    def session(self) -> Generator[Session, None, None]:
        """Session as a context manager; rolled back on error."""
        session = self.SessionLocal()
        try:
            yield session
        except Exception:
            session.rollback()
            raise
        finally:
            session.close()

    def close(self) -> None:
        self.engine.dispose()

    def start_run(self, run_id: str, command: str, seed: int, config: dict) -> None:
        with self.session() as session:
            session.add(RunRow(id=run_id, command=command, seed=seed,
                               started_at=int(time.time() * 1000),
                               config=json.dumps(config, sort_keys=True)))
            session.commit()

    def save_steps(self, run_id: str, records: Iterable[StepRecord]) -> None:
        with self.session() as session:
            session.add_all([StepRow(run_id=run_id, **r.to_dict()) for r in records])
            session.commit()

    def save_suites(self, run_id: str, results: Iterable[SuiteResult]) -> None:
        with self.session() as session:
            session.add_all([SuiteRow(run_id=run_id, **r.to_dict()) for r in results])
            session.commit()

    def save_timings(self, run_id: str, records: Iterable[TimingRecord]) -> None:
        with self.session() as session:
            session.add_all([TimingRow(run_id=run_id, **r.to_dict()) for r in records])
            session.commit()

    def load_steps(self, run_id: str) -> list[dict]:
        with self.session() as session:
            rows = session.query(StepRow).filter(StepRow.run_id == run_id).order_by(StepRow.step).all()
            return [{
                "step": r.step,
                "sa_to_l": r.sa_to_l,
                "l_to_sa": r.l_to_sa,
                "bc": r.bc,
                "temperature": r.temperature,
                "grad_norm": r.grad_norm,
                "total": r.total,
            } for r in rows]

    def load_suites(self, run_id: str) -> list[dict]:
        with self.session() as session:
            rows = session.query(SuiteRow).filter(SuiteRow.run_id == run_id).order_by(SuiteRow.id).all()
            return [{
                "suite": r.suite,
                "passed": r.passed,
                "statistic": r.statistic,
                "threshold": r.threshold,
                "detail": r.detail or "",
            } for r in rows]

    def load_timings(self, run_id: str) -> list[dict]:
        with self.session() as session:
            rows = session.query(TimingRow).filter(TimingRow.run_id == run_id).order_by(TimingRow.id).all()
            return [{
                "impl": r.impl,
                "seq_len": r.seq_len,
                "block_size": r.block_size,
                "median_ns": r.median_ns,
                "skipped_fraction": r.skipped_fraction,
                "mask_kind": r.mask_kind,
            } for r in rows]

    def runs(self) -> list[dict]:
        with self.session() as session:
            rows = session.query(RunRow).order_by(RunRow.started_at, RunRow.id).all()
            return [{"id": r.id, "command": r.command, "seed": r.seed, "started_at": r.started_at}
                    for r in rows]


# =============================================================================
# Corpus files
# =============================================================================

def _dumps(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def corpus_to_text(corpus: Corpus) -> str:
    """JSON lines: a header with the sparse transition table, then goals, then trajectories."""
    mdp = corpus.mdp
    transitions = [[int(s), int(a), int(n), float(mdp.transition[s, a, n])]
                   for s, a, n in zip(*np.nonzero(mdp.transition))]
    header = {
        "format": CORPUS_FORMAT,
        "version": CORPUS_VERSION,
        "config": corpus.config.to_dict(),
        "mdp": {
            "num_states": mdp.num_states,
            "num_actions": mdp.num_actions,
            "goal_states": {str(g): int(s) for g, s in sorted(mdp.goal_states.items())},
            "start_states": list(mdp.start_states),
            "sink_state": mdp.sink_state,
            "transitions": transitions,
        },
    }
    lines = [_dumps(header)]
    for goal in corpus.goals:
        lines.append(_dumps({"type": "goal", "goal_id": goal.goal_id,
                             "token_seq": list(goal.token_seq), "target_state": goal.target_state}))
    for traj in corpus.trajectories:
        lines.append(_dumps({"type": "trajectory", "goal_id": traj.goal_id,
                             "states": list(traj.states), "actions": list(traj.actions)}))
    return "\n".join(lines) + "\n"


def corpus_from_text(text: str) -> Corpus:
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise ValidationError(f"{ErrorMsg.BAD_CORPUS_FILE}: empty")
    try:
        header = json.loads(lines[0])
        records = [json.loads(line) for line in lines[1:]]
    except json.JSONDecodeError as e:
        raise ValidationError(f"{ErrorMsg.BAD_CORPUS_FILE}: {e}") from None
    if header.get("format") != CORPUS_FORMAT or header.get("version") != CORPUS_VERSION:
        raise ValidationError(f"{ErrorMsg.BAD_CORPUS_FILE}: header is {header.get('format')} "
                              f"v{header.get('version')}")

    spec = header["mdp"]
    transition = np.zeros((spec["num_states"], spec["num_actions"], spec["num_states"]))
    for s, a, n, p in spec["transitions"]:
        transition[s, a, n] = p
    mdp = Mdp(spec["num_states"], spec["num_actions"], transition,
              {int(g): s for g, s in spec["goal_states"].items()},
              tuple(spec["start_states"]), spec["sink_state"])
    goals = [GoalSpec(r["goal_id"], tuple(r["token_seq"]), r["target_state"])
             for r in records if r.get("type") == "goal"]
    trajectories = [Trajectory(r["goal_id"], tuple(r["states"]), tuple(r["actions"]))
                    for r in records if r.get("type") == "trajectory"]
    return Corpus(CorpusConfig(**header["config"]), mdp, goals, trajectories)


def save_corpus(corpus: Corpus, path: str) -> None:
    with open(path, "w") as handle:
        handle.write(corpus_to_text(corpus))


def load_corpus(path: str) -> Corpus:
    with open(path) as handle:
        return corpus_from_text(handle.read())


# =============================================================================
# Checkpoints
# =============================================================================

def save_checkpoint(path: str, params: EncoderParams, train_config: TrainConfig,
                    flow_head: Optional[FlowHead] = None, bc_head: Optional[BcHead] = None) -> None:
    """npz archive of flat parameter vectors plus a JSON header that rebuilds their shapes."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "train_config": train_config.to_dict(),
        "goal_ids": list(params.goal_ids),
        "normalization_mode": params.normalization_mode,
        "shapes": {name: list(a.shape) for name, a in params.arrays().items()},
        "flow": flow_head.config() if flow_head is not None else None,
        "bc": {"shape": list(bc_head.weights.shape), "num_states": bc_head.num_states}
        if bc_head is not None else None,
    }
    arrays = {"header": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
              "encoder": params.flatten()}
    if flow_head is not None:
        arrays["flow"] = flow_head.flatten()
    if bc_head is not None:
        arrays["bc"] = bc_head.flatten()
    with open(path, "wb") as handle:
        np.savez(handle, **arrays)


@dataclass
class Checkpoint:
    params: EncoderParams
    train_config: TrainConfig
    flow_head: Optional[FlowHead] = None
    bc_head: Optional[BcHead] = None


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as handle:
        data = np.load(io.BytesIO(handle.read()))
    if "header" not in data.files:
        raise ValidationError(f"{ErrorMsg.BAD_CHECKPOINT_FILE}: {path}")
    header = json.loads(data["header"].tobytes().decode())
    if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"{ErrorMsg.BAD_CHECKPOINT_FILE}: {path}")

    shapes = header["shapes"]
    template = EncoderParams(
        np.zeros(shapes["sa_w1"]), np.zeros(shapes["sa_b1"]), np.zeros(shapes["sa_w2"]),
        np.zeros(shapes["sa_b2"]), np.zeros(shapes["goal_table"]), tuple(header["goal_ids"]),
        0.0, header["normalization_mode"],
    )
    params = template.unflatten(data["encoder"])
    train_config = TrainConfig(**header["train_config"])

    flow_head = None
    if header.get("flow"):
        flow_head = FlowHead(**header["flow"]).load_flat(data["flow"])
    bc_head = None
    if header.get("bc"):
        shape = header["bc"]["shape"]
        bc_head = BcHead(np.zeros(shape), np.zeros(shape[1]), header["bc"]["num_states"],
                         params.goal_ids).unflatten(data["bc"])
    return Checkpoint(params, train_config, flow_head, bc_head)
