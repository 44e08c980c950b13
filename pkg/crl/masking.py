"""Role-aware causal masking over packed token sequences.

A packed sequence concatenates several samples (segments). Inside a segment,
tokens carry one of five roles in a fixed order. build_mask turns roles,
segments and positions into a boolean permission matrix; the block layout
classifies block pairs as skip, partial or full so the block-sparse evaluator
only touches blocks with at least one permitted pair.
"""

import logging
import time
from dataclasses import dataclass, field, asdict
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from scipy.special import softmax

from .errors import MaskStructureError, ValidationError
from .objectives import bc_token_loss

logger = logging.getLogger(__name__)

ISOLATION_TOLERANCE = 1e-12


class TokenRole(str, Enum):
    VISION_STATE = "VisionState"   # images and proprioception
    INSTRUCTION = "Instruction"
    AR_ACTION = "ArAction"
    CRL_ACTION = "CrlAction"
    CRL_GOAL = "CrlGoal"


ROLES = tuple(TokenRole)
ROLE_CODE = {role: code for code, role in enumerate(ROLES)}

# ROLE_TABLE[query, key]: may a query of this role see a key of that role (before causality)
ROLE_TABLE = np.zeros((len(ROLES), len(ROLES)), dtype=bool)
for _query, _keys in {
    TokenRole.VISION_STATE: (TokenRole.VISION_STATE, TokenRole.INSTRUCTION),
    TokenRole.INSTRUCTION: (TokenRole.VISION_STATE, TokenRole.INSTRUCTION),
    TokenRole.AR_ACTION: (TokenRole.VISION_STATE, TokenRole.INSTRUCTION, TokenRole.AR_ACTION),
    TokenRole.CRL_ACTION: (TokenRole.VISION_STATE, TokenRole.CRL_ACTION),
    TokenRole.CRL_GOAL: (TokenRole.CRL_GOAL,),
}.items():
    for _key in _keys:
        ROLE_TABLE[ROLE_CODE[_query], ROLE_CODE[_key]] = True

CRL_CODES = (ROLE_CODE[TokenRole.CRL_ACTION], ROLE_CODE[TokenRole.CRL_GOAL])


class BlockStatus(int, Enum):
    SKIP = 0
    PARTIAL = 1
    FULL = 2


@dataclass(eq=False)
class TokenSample:
    """One unpacked sample: token features, roles and next-token targets (-1 = none)."""
    tokens: np.ndarray
    roles: tuple[TokenRole, ...]
    targets: Optional[np.ndarray] = None

    def __post_init__(self):
        self.tokens = np.atleast_2d(np.asarray(self.tokens, dtype=np.float64))
        self.roles = tuple(TokenRole(r) for r in self.roles)
        if self.targets is None:
            self.targets = np.full(len(self.roles), -1, dtype=np.int64)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        if not (len(self.tokens) == len(self.roles) == len(self.targets)):
            raise ValidationError("tokens, roles and targets must have the same length")

    def __len__(self) -> int:
        return len(self.roles)


@dataclass(eq=False)
class PackedSequence:
    """Packed token stream; role_codes index into ROLES."""
    tokens: np.ndarray
    role_codes: np.ndarray
    segment_ids: np.ndarray
    positions: np.ndarray
    targets: np.ndarray
    sample_ids: tuple[int, ...] = ()
    limit: Optional[int] = None

    def __post_init__(self):
        self.tokens = np.atleast_2d(np.asarray(self.tokens, dtype=np.float64))
        self.role_codes = np.asarray(self.role_codes, dtype=np.int64)
        self.segment_ids = np.asarray(self.segment_ids, dtype=np.int64)
        self.positions = np.asarray(self.positions, dtype=np.int64)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        n = len(self.role_codes)
        if not (len(self.tokens) == len(self.segment_ids) == len(self.positions) == len(self.targets) == n):
            raise ValidationError("packed sequence arrays must share one length")
        if self.limit is not None and n > self.limit:
            raise MaskStructureError(f"packed length {n} exceeds limit {self.limit}")
        self.validate()

    def __len__(self) -> int:
        return len(self.role_codes)

    @property
    def roles(self) -> list[TokenRole]:
        return [ROLES[c] for c in self.role_codes]

    def validate(self) -> None:
        """Role order, segment monotonicity and positions, naming the first bad position."""
        for i in range(len(self)):
            code = self.role_codes[i]
            if not 0 <= code < len(ROLES):
                raise MaskStructureError(f"position {i}: unknown role code {code}", position=i)
            if i == 0 or self.segment_ids[i] != self.segment_ids[i - 1]:
                if i > 0 and self.segment_ids[i] < self.segment_ids[i - 1]:
                    raise MaskStructureError(f"position {i}: segment ids decrease", position=i)
                if self.positions[i] != 0:
                    raise MaskStructureError(f"position {i}: segment must start at position 0", position=i)
                continue
            if self.positions[i] != self.positions[i - 1] + 1:
                raise MaskStructureError(f"position {i}: positions must count up within a segment", position=i)
            if code < self.role_codes[i - 1]:
                raise MaskStructureError(
                    f"position {i}: role {ROLES[code].value} follows {ROLES[self.role_codes[i - 1]].value}",
                    position=i,
                )

    def indices_of(self, *roles: TokenRole) -> np.ndarray:
        codes = [ROLE_CODE[r] for r in roles]
        return np.flatnonzero(np.isin(self.role_codes, codes))

    def without_crl_blocks(self) -> tuple["PackedSequence", np.ndarray]:
        """Same sequence with CrlAction and CrlGoal tokens removed, plus the kept indices."""
        kept = np.flatnonzero(~np.isin(self.role_codes, CRL_CODES))
        return PackedSequence(self.tokens[kept], self.role_codes[kept], self.segment_ids[kept],
                              self.positions[kept], self.targets[kept], self.sample_ids), kept

    def with_tokens(self, tokens: np.ndarray) -> "PackedSequence":
        return PackedSequence(tokens, self.role_codes, self.segment_ids, self.positions,
                              self.targets, self.sample_ids, self.limit)


def sequence_from_sample(sample: TokenSample, sample_id: int = 0) -> PackedSequence:
    """Unpacked single-segment sequence."""
    n = len(sample)
    return PackedSequence(sample.tokens, [ROLE_CODE[r] for r in sample.roles], np.zeros(n),
                          np.arange(n), sample.targets, (sample_id,))


def pack(samples: Sequence[TokenSample], limit: int) -> list[PackedSequence]:
    """Greedy first-fit packing; each sample goes into the first pack with room.

    Raises:
        ValidationError: a sample is longer than limit
    """
    if limit < 1:
        raise ValidationError("pack limit must be >= 1")
    bins: list[list[int]] = []
    used: list[int] = []
    for index, sample in enumerate(samples):
        if len(sample) > limit:
            raise ValidationError(f"sample {index} has length {len(sample)}, pack limit is {limit}")
        for slot, size in enumerate(used):
            if size + len(sample) <= limit:
                bins[slot].append(index)
                used[slot] += len(sample)
                break
        else:
            bins.append([index])
            used.append(len(sample))

    packs = []
    for members in bins:
        parts = [samples[i] for i in members]
        packs.append(PackedSequence(
            tokens=np.concatenate([p.tokens for p in parts]),
            role_codes=np.concatenate([[ROLE_CODE[r] for r in p.roles] for p in parts]),
            segment_ids=np.concatenate([np.full(len(p), seg) for seg, p in enumerate(parts)]),
            positions=np.concatenate([np.arange(len(p)) for p in parts]),
            targets=np.concatenate([p.targets for p in parts]),
            sample_ids=tuple(members),
            limit=limit,
        ))
    logger.debug("packed %d samples into %d sequences", len(samples), len(packs))
    return packs


@dataclass
class BlockLayout:
    """Per (query block, key block) status plus element masks for partial blocks."""
    block_size: int
    length: int
    status: np.ndarray
    partial: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    @property
    def num_blocks(self) -> int:
        return self.status.shape[0]

    @property
    def skipped_fraction(self) -> float:
        return float(np.mean(self.status == BlockStatus.SKIP))

    def key_blocks(self, query_block: int) -> np.ndarray:
        """Non-skip key blocks of a query block in ascending order."""
        return np.flatnonzero(self.status[query_block] != BlockStatus.SKIP)

    def block_range(self, block: int) -> slice:
        return slice(block * self.block_size, min((block + 1) * self.block_size, self.length))

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.length, self.length), dtype=bool)
        for qb, kb in zip(*np.nonzero(self.status == BlockStatus.FULL)):
            dense[self.block_range(qb), self.block_range(kb)] = True
        for (qb, kb), sub in self.partial.items():
            dense[self.block_range(qb), self.block_range(kb)] = sub
        return dense


@dataclass
class RoleMask:
    """Dense query x key permission matrix."""
    permission: np.ndarray

    def block_layout(self, block_size: int) -> BlockLayout:
        if block_size < 1:
            raise ValidationError("block_size must be >= 1")
        n = self.permission.shape[0]
        nb = -(-n // block_size)
        status = np.zeros((nb, nb), dtype=np.int8)
        partial = {}
        for qb in range(nb):
            rows = slice(qb * block_size, min((qb + 1) * block_size, n))
            for kb in range(nb):
                sub = self.permission[rows, kb * block_size:min((kb + 1) * block_size, n)]
                if sub.all():
                    status[qb, kb] = BlockStatus.FULL
                elif sub.any():
                    status[qb, kb] = BlockStatus.PARTIAL
                    partial[(qb, kb)] = sub.copy()
        return BlockLayout(block_size, n, status, partial)


def build_mask(seq: PackedSequence) -> RoleMask:
    """permission[q, k] = same segment and k not after q and ROLE_TABLE[role q, role k]."""
    seq.validate()
    same_segment = seq.segment_ids[:, None] == seq.segment_ids[None, :]
    causal = seq.positions[None, :] <= seq.positions[:, None]
    allowed = ROLE_TABLE[seq.role_codes[:, None], seq.role_codes[None, :]]
    return RoleMask(same_segment & causal & allowed)


@dataclass
class AttentionParams:
    """Single attention layer plus an output head onto the action-token vocabulary."""
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_out: np.ndarray
    num_heads: int = 1

    def __post_init__(self):
        if self.wq.shape[1] % self.num_heads:
            raise ValidationError("model width must be divisible by num_heads")

    @property
    def head_dim(self) -> int:
        return self.wq.shape[1] // self.num_heads


def init_attention(d_model: int, num_heads: int, vocab_size: int,
                   rng: np.random.Generator, scale: Optional[float] = None) -> AttentionParams:
    scale = scale if scale is not None else 1.0 / np.sqrt(d_model)
    return AttentionParams(*(rng.normal(0.0, scale, (d_model, d_model)) for _ in range(4)),
                           rng.normal(0.0, scale, (d_model, vocab_size)), num_heads)


def _project(seq: PackedSequence, params: AttentionParams):
    n, h, dh = len(seq), params.num_heads, params.head_dim
    q = (seq.tokens @ params.wq).reshape(n, h, dh)
    k = (seq.tokens @ params.wk).reshape(n, h, dh)
    v = (seq.tokens @ params.wv).reshape(n, h, dh)
    return q, k, v


def dense_attention(seq: PackedSequence, mask: RoleMask, params: AttentionParams) -> np.ndarray:
    """Scaled dot-product attention over permitted keys, one row per token."""
    permission = mask.permission
    empty = np.flatnonzero(~permission.any(axis=1))
    if empty.size:
        raise MaskStructureError(f"query {empty[0]} has no permitted key", position=int(empty[0]))
    q, k, v = _project(seq, params)
    heads = np.empty_like(q)
    for head in range(params.num_heads):
        scores = q[:, head] @ k[:, head].T / np.sqrt(params.head_dim)
        probs = softmax(np.where(permission, scores, -np.inf), axis=1)
        heads[:, head] = probs @ v[:, head]
    return heads.reshape(len(seq), -1) @ params.wo


@dataclass
class SparseResult:
    outputs: np.ndarray
    skipped_fraction: float
    blocks_computed: int


def _key_index(layout: BlockLayout, blocks: np.ndarray):
    if blocks.size and blocks[-1] - blocks[0] + 1 == blocks.size:
        return slice(blocks[0] * layout.block_size, min((blocks[-1] + 1) * layout.block_size, layout.length))
    return np.concatenate([np.arange(layout.length)[layout.block_range(b)] for b in blocks])


def block_sparse_attention(seq: PackedSequence, mask: RoleMask, params: AttentionParams,
                           block_size: int, layout: Optional[BlockLayout] = None) -> SparseResult:
    """Attention that visits only non-skip key blocks of each query block."""
    layout = layout or mask.block_layout(block_size)
    q, k, v = _project(seq, params)
    heads = np.empty_like(q)
    scale = np.sqrt(params.head_dim)
    computed = 0
    for qb in range(layout.num_blocks):
        rows = layout.block_range(qb)
        blocks = layout.key_blocks(qb)
        if blocks.size == 0:
            raise MaskStructureError(f"query block {qb} has no permitted key block", position=rows.start)
        computed += blocks.size
        cols = _key_index(layout, blocks)
        needs_mask = np.any(layout.status[qb, blocks] == BlockStatus.PARTIAL)
        sub_mask = mask.permission[rows][:, cols] if needs_mask else None
        for head in range(params.num_heads):
            scores = q[rows, head] @ k[cols, head].T / scale
            if sub_mask is not None:
                scores = np.where(sub_mask, scores, -np.inf)
            heads[rows, head] = softmax(scores, axis=1) @ v[cols, head]
    outputs = heads.reshape(len(seq), -1) @ params.wo
    return SparseResult(outputs, layout.skipped_fraction, computed)


def token_logits(outputs: np.ndarray, params: AttentionParams) -> np.ndarray:
    return outputs @ params.w_out


def bc_losses_by_sample(seq: PackedSequence, outputs: np.ndarray,
                        params: AttentionParams) -> dict[int, float]:
    """BC cross-entropy on each segment's ArAction targets, keyed by sample id."""
    logits = token_logits(outputs, params)
    losses = {}
    for segment in np.unique(seq.segment_ids):
        rows = np.flatnonzero((seq.segment_ids == segment)
                              & (seq.role_codes == ROLE_CODE[TokenRole.AR_ACTION])
                              & (seq.targets >= 0))
        if rows.size == 0:
            continue
        sample_id = seq.sample_ids[segment] if seq.sample_ids else int(segment)
        losses[sample_id] = bc_token_loss(logits[rows], seq.targets[rows]).value
    return losses


@dataclass
class IsolationReport:
    passed: bool
    max_diffs: dict[str, float]
    leaks: list[tuple[str, str]] = field(default_factory=list)
    violations: list[tuple[int, int, str, str]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def mask_violations(seq: PackedSequence, permission: np.ndarray) -> list[tuple[int, int, str, str]]:
    """Permitted pairs that the role rules forbid, as (query, key, query role, key role)."""
    expected = build_mask(seq).permission
    extra = np.argwhere(permission & ~expected)
    return [(int(qi), int(ki), ROLES[seq.role_codes[qi]].value, ROLES[seq.role_codes[ki]].value)
            for qi, ki in extra]


def isolation_check(seq: PackedSequence, params: AttentionParams,
                    rng: Optional[np.random.Generator] = None,
                    mask: Optional[RoleMask] = None) -> IsolationReport:
    """Run the three perturbation tests; mask overrides the role mask for negative controls.

    (a) new Instruction features must leave CrlAction outputs unchanged;
    (b) new features on every non-CrlGoal token must leave CrlGoal outputs unchanged;
    (c) dropping both Crl blocks must leave every other output and the BC loss unchanged.
    """
    rng = rng or np.random.default_rng(0)
    mask = mask or build_mask(seq)
    base = dense_attention(seq, mask, params)
    diffs: dict[str, float] = {}
    leaks: list[tuple[str, str]] = []

    def perturbed(indices: np.ndarray) -> np.ndarray:
        tokens = seq.tokens.copy()
        tokens[indices] = rng.normal(size=(len(indices), tokens.shape[1]))
        return dense_attention(seq.with_tokens(tokens), mask, params)

    crl_action = seq.indices_of(TokenRole.CRL_ACTION)
    instruction = seq.indices_of(TokenRole.INSTRUCTION)
    out_a = perturbed(instruction)
    diffs["instruction_to_crl_action"] = float(np.abs(out_a[crl_action] - base[crl_action]).max(initial=0.0))
    if diffs["instruction_to_crl_action"] > ISOLATION_TOLERANCE:
        leaks.append((TokenRole.CRL_ACTION.value, TokenRole.INSTRUCTION.value))

    crl_goal = seq.indices_of(TokenRole.CRL_GOAL)
    others = np.setdiff1d(np.arange(len(seq)), crl_goal)
    out_b = perturbed(others)
    diffs["context_to_crl_goal"] = float(np.abs(out_b[crl_goal] - base[crl_goal]).max(initial=0.0))
    if diffs["context_to_crl_goal"] > ISOLATION_TOLERANCE:
        leaks.append((TokenRole.CRL_GOAL.value, "non-CrlGoal"))

    reduced, kept = seq.without_crl_blocks()
    out_c = dense_attention(reduced, build_mask(reduced), params)
    diffs["crl_blocks_to_bc"] = float(np.abs(out_c - base[kept]).max(initial=0.0))
    full_bc = bc_losses_by_sample(seq, base, params)
    reduced_bc = bc_losses_by_sample(reduced, out_c, params)
    diffs["bc_loss"] = max((abs(full_bc[k] - reduced_bc.get(k, np.inf)) for k in full_bc), default=0.0)
    if max(diffs["crl_blocks_to_bc"], diffs["bc_loss"]) > ISOLATION_TOLERANCE:
        leaks.append((TokenRole.AR_ACTION.value, "Crl blocks"))

    violations = mask_violations(seq, mask.permission)
    for qi, ki, q_role, k_role in violations:
        logger.warning("mask permits %s query %d to see %s key %d", q_role, qi, k_role, ki)
    return IsolationReport(not leaks and not violations, diffs, leaks, violations)


def synthetic_sample(rng: np.random.Generator, role_counts: Sequence[int], d_model: int,
                     vocab_size: int) -> TokenSample:
    """Random token sample with role_counts[i] tokens of ROLES[i]; ArAction tokens get targets."""
    roles = [role for role, count in zip(ROLES, role_counts) for _ in range(count)]
    targets = np.array([rng.integers(vocab_size) if r == TokenRole.AR_ACTION else -1 for r in roles],
                       dtype=np.int64)
    return TokenSample(rng.normal(size=(len(roles), d_model)), tuple(roles), targets)


def random_role_counts(rng: np.random.Generator, max_per_role: int = 4) -> list[int]:
    """At least one token per role."""
    return [int(c) for c in rng.integers(1, max_per_role + 1, size=len(ROLES))]


def mask_to_text(seq: PackedSequence, mask: RoleMask, block_size: int) -> str:
    """Role run-length encoding per segment, then the block layout."""
    layout = mask.block_layout(block_size)
    lines = [f"mask v1 length={len(seq)} block_size={block_size}"]
    for segment in np.unique(seq.segment_ids):
        codes = seq.role_codes[seq.segment_ids == segment]
        runs = []
        start = 0
        for i in range(1, len(codes) + 1):
            if i == len(codes) or codes[i] != codes[start]:
                runs.append(f"{ROLES[codes[start]].value}*{i - start}")
                start = i
        lines.append(f"segment {segment}: {' '.join(runs)}")
    lines.append("blocks:")
    for qb in range(layout.num_blocks):
        lines.append(f"{qb}: " + "".join("spf"[s] for s in layout.status[qb]))
    return "\n".join(lines) + "\n"


@dataclass
class MaskDump:
    length: int
    block_size: int
    segments: list[list[tuple[TokenRole, int]]]
    status: np.ndarray

    def skeleton(self) -> PackedSequence:
        """Zero-feature sequence carrying the dumped roles and segments."""
        codes, segments, positions = [], [], []
        for seg, runs in enumerate(self.segments):
            roles = [ROLE_CODE[role] for role, count in runs for _ in range(count)]
            codes += roles
            segments += [seg] * len(roles)
            positions += list(range(len(roles)))
        return PackedSequence(np.zeros((len(codes), 1)), codes, segments, positions,
                              np.full(len(codes), -1))

    def to_mask(self) -> RoleMask:
        return build_mask(self.skeleton())


def mask_from_text(text: str) -> MaskDump:
    """Parse a mask_to_text dump.

    Raises:
        ValidationError: the dump is truncated or malformed
    """
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines or not lines[0].startswith("mask v1 "):
        raise ValidationError("Not a mask dump")
    try:
        header = dict(part.split("=") for part in lines[0].split()[2:])
        length, block_size = int(header["length"]), int(header["block_size"])
        segments = []
        index = 1
        while lines[index].startswith("segment"):
            runs = []
            for run in lines[index].split(":", 1)[1].split():
                role, count = run.split("*")
                runs.append((TokenRole(role), int(count)))
            segments.append(runs)
            index += 1
        if lines[index] != "blocks:":
            raise ValidationError("mask dump is missing its block listing")
        status = np.array([["spf".index(c) for c in line.split(": ")[1]] for line in lines[index + 1:]],
                          dtype=np.int8)
    except (IndexError, KeyError, ValueError) as e:
        raise ValidationError(f"malformed mask dump: {e}") from e
    if sum(count for runs in segments for _, count in runs) != length:
        raise ValidationError(f"mask dump segments do not add up to length {length}")
    num_blocks = -(-length // block_size)
    if status.shape != (num_blocks, num_blocks):
        raise ValidationError(f"mask dump lists {status.shape} blocks, expected {num_blocks}x{num_blocks}")
    return MaskDump(length, block_size, segments, status)


@dataclass
class BenchConfig:
    """Dense vs block-sparse timing settings."""
    bench_seq_lens: tuple[int, ...] = (512, 1024, 2048, 4096)
    bench_block_size: int = 64
    bench_warmup: int = 3
    bench_repeats: int = 5
    bench_heads: int = 2
    bench_d_model: int = 32
    bench_segment_length: int = 512
    bench_seed: int = 0

    def validate(self) -> None:
        if self.bench_warmup < 3:
            raise ValidationError("bench_warmup must be >= 3")
        if self.bench_repeats < 1 or self.bench_block_size < 1:
            raise ValidationError("bench_repeats and bench_block_size must be >= 1")


@dataclass
class TimingRecord:
    impl: str
    seq_len: int
    block_size: int
    median_ns: int
    skipped_fraction: float
    mask_kind: str = "role"

    def to_dict(self) -> dict:
        return asdict(self)


def _segment_lengths(seq_len: int, segment_length: int) -> list[int]:
    """Split seq_len into segments; a tail too short to hold every role joins the previous one."""
    lengths = [segment_length] * (seq_len // segment_length)
    tail = seq_len % segment_length
    if tail >= len(ROLES) or not lengths:
        lengths.append(tail)
    else:
        lengths[-1] += tail
    return [n for n in lengths if n > 0]


def bench_sequence(seq_len: int, segment_length: int, d_model: int,
                   rng: np.random.Generator) -> PackedSequence:
    """Packed sequence of exactly seq_len tokens; each segment puts a quarter of its tokens in the Crl blocks.

    Raises:
        ValidationError: seq_len or segment_length cannot hold one token per role
    """
    if seq_len < len(ROLES) or segment_length < len(ROLES):
        raise ValidationError(f"bench sequences need at least {len(ROLES)} tokens per segment")
    shares = (0.40, 0.10, 0.25, 0.15, 0.10)
    samples = []
    for length in _segment_lengths(seq_len, segment_length):
        spare = length - len(ROLES)
        counts = [1 + int(spare * s) for s in shares]
        counts[0] += length - sum(counts)
        samples.append(synthetic_sample(rng, counts, d_model, vocab_size=8))
    packs = pack(samples, seq_len)
    assert len(packs) == 1 and len(packs[0]) == seq_len
    return packs[0]


def _median_ns(fn, warmup: int, repeats: int) -> int:
    for _ in range(warmup):
        fn()
    timings = []
    for _ in range(repeats):
        start = time.perf_counter_ns()
        fn()
        timings.append(time.perf_counter_ns() - start)
    return int(np.median(timings))


def mask_bench(config: BenchConfig, mask_kinds: Sequence[str] = ("role", "full")) -> list[TimingRecord]:
    """Median wall time of dense and block-sparse attention per sequence length.

    mask_kind "role" uses the role mask; "full" permits every pair, so nothing is skipped.
    """
    config.validate()
    rng = np.random.default_rng(config.bench_seed)
    params = init_attention(config.bench_d_model, config.bench_heads, 8, rng)
    records = []
    for seq_len in config.bench_seq_lens:
        seq = bench_sequence(seq_len, config.bench_segment_length, config.bench_d_model, rng)
        for kind in mask_kinds:
            mask = build_mask(seq) if kind == "role" else RoleMask(np.ones((len(seq), len(seq)), dtype=bool))
            layout = mask.block_layout(config.bench_block_size)
            dense_ns = _median_ns(lambda: dense_attention(seq, mask, params),
                                  config.bench_warmup, config.bench_repeats)
            sparse_ns = _median_ns(
                lambda: block_sparse_attention(seq, mask, params, config.bench_block_size, layout),
                config.bench_warmup, config.bench_repeats)
            records.append(TimingRecord("dense", seq_len, config.bench_block_size, dense_ns, 0.0, kind))
            records.append(TimingRecord("block_sparse", seq_len, config.bench_block_size, sparse_ns,
                                        layout.skipped_fraction, kind))
            logger.info("bench %s n=%d: dense=%.2fms sparse=%.2fms skipped=%.1f%%", kind, seq_len,
                        dense_ns / 1e6, sparse_ns / 1e6, 100 * layout.skipped_fraction)
    return records
