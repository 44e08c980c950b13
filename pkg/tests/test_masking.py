"""Tests for role masks, packing and block-sparse attention.

Sections:
1. Role mask - permission table, segment isolation, structure errors
2. Packing - first-fit placement, limits, invariance of per-sample outputs
3. Block layout - dense reconstruction, sparse vs dense agreement
4. Isolation check - role mask passes, causal-only mask leaks
5. Mask dumps and timing
"""

import numpy as np
import pytest

from crl.errors import MaskStructureError, ValidationError
from crl.masking import (
    ROLES,
    BenchConfig,
    PackedSequence,
    RoleMask,
    TokenRole,
    TokenSample,
    bench_sequence,
    block_sparse_attention,
    build_mask,
    dense_attention,
    init_attention,
    isolation_check,
    mask_bench,
    mask_from_text,
    mask_to_text,
    pack,
    random_role_counts,
    sequence_from_sample,
    synthetic_sample,
)

D_MODEL = 8
VOCAB = 5


def one_of_each() -> PackedSequence:
    sample = TokenSample(np.eye(5, D_MODEL), tuple(ROLES))
    return sequence_from_sample(sample)


def random_samples(rng, count):
    return [synthetic_sample(rng, random_role_counts(rng), D_MODEL, VOCAB) for _ in range(count)]


def causal_only(seq: PackedSequence) -> RoleMask:
    same_segment = seq.segment_ids[:, None] == seq.segment_ids[None, :]
    return RoleMask(same_segment & (seq.positions[None, :] <= seq.positions[:, None]))


@pytest.fixture
def attention(rng):
    return init_attention(D_MODEL, 2, VOCAB, rng)


# =============================================================================
# Role mask
# =============================================================================


class TestRoleMask:

    def test_permission_table(self):
        permission = build_mask(one_of_each()).permission
        expected = np.array([
            [1, 0, 0, 0, 0],   # VisionState
            [1, 1, 0, 0, 0],   # Instruction
            [1, 1, 1, 0, 0],   # ArAction
            [1, 0, 0, 1, 0],   # CrlAction
            [0, 0, 0, 0, 1],   # CrlGoal
        ], dtype=bool)
        np.testing.assert_array_equal(permission, expected)

    def test_segments_never_see_each_other(self, rng):
        seq = pack(random_samples(rng, 4), limit=200)[0]
        permission = build_mask(seq).permission
        cross = seq.segment_ids[:, None] != seq.segment_ids[None, :]
        assert not np.any(permission & cross)

    def test_every_query_sees_itself(self, rng):
        seq = pack(random_samples(rng, 3), limit=200)[0]
        assert np.all(np.diag(build_mask(seq).permission))

    def test_role_order_violation_names_position(self):
        with pytest.raises(MaskStructureError) as exc_info:
            PackedSequence(np.zeros((3, 2)), [0, 2, 1], [0, 0, 0], [0, 1, 2], [-1, -1, -1])
        assert exc_info.value.position == 2

    def test_segment_must_restart_positions(self):
        with pytest.raises(MaskStructureError) as exc_info:
            PackedSequence(np.zeros((3, 2)), [0, 1, 0], [0, 0, 1], [0, 1, 2], [-1, -1, -1])
        assert exc_info.value.position == 2

    def test_empty_query_row_is_rejected(self, attention):
        seq = one_of_each()
        permission = build_mask(seq).permission.copy()
        permission[3] = False
        with pytest.raises(MaskStructureError) as exc_info:
            dense_attention(seq, RoleMask(permission), attention)
        assert exc_info.value.position == 3

    def test_token_sample_lengths_must_agree(self):
        with pytest.raises(ValidationError):
            TokenSample(np.zeros((2, 3)), (TokenRole.VISION_STATE,))


# =============================================================================
# Packing
# =============================================================================


class TestPacking:

    def test_first_fit(self, rng):
        samples = [synthetic_sample(rng, counts, D_MODEL, VOCAB)
                   for counts in ([1, 1, 1, 1, 1], [1, 1, 1, 0, 0], [1, 1, 1, 1, 0], [1, 1, 0, 0, 0])]
        packs = pack(samples, limit=8)
        assert [p.sample_ids for p in packs] == [(0, 1), (2, 3)]
        assert [len(p) for p in packs] == [8, 6]

    def test_oversize_sample_is_rejected(self, rng):
        sample = synthetic_sample(rng, [3, 3, 3, 3, 3], D_MODEL, VOCAB)
        with pytest.raises(ValidationError):
            pack([sample], limit=10)

    def test_packs_respect_limit(self, rng):
        packs = pack(random_samples(rng, 40), limit=32)
        assert all(len(p) <= 32 for p in packs)
        assert sorted(i for p in packs for i in p.sample_ids) == list(range(40))

    def test_limit_is_enforced_on_construction(self):
        with pytest.raises(MaskStructureError):
            PackedSequence(np.zeros((3, 2)), [0, 0, 0], [0, 0, 0], [0, 1, 2], [-1, -1, -1], limit=2)

    def test_packing_leaves_per_sample_outputs_unchanged(self, rng, attention):
        samples = random_samples(rng, 6)
        for packed in pack(samples, limit=48):
            outputs = dense_attention(packed, build_mask(packed), attention)
            for segment, sample_id in enumerate(packed.sample_ids):
                alone = sequence_from_sample(samples[sample_id])
                expected = dense_attention(alone, build_mask(alone), attention)
                got = outputs[packed.segment_ids == segment]
                np.testing.assert_allclose(got, expected, atol=1e-12)


# =============================================================================
# Block layout
# =============================================================================


class TestBlockLayout:

    @pytest.mark.parametrize("block_size", [1, 4, 16, 64])
    def test_layout_reconstructs_permission(self, rng, block_size):
        seq = pack(random_samples(rng, 8), limit=160)[0]
        mask = build_mask(seq)
        layout = mask.block_layout(block_size)
        np.testing.assert_array_equal(layout.to_dense(), mask.permission)
        assert 0.0 <= layout.skipped_fraction < 1.0

    @pytest.mark.parametrize("block_size", [1, 4, 16, 64])
    def test_sparse_matches_dense(self, rng, attention, block_size):
        seq = pack(random_samples(rng, 8), limit=160)[0]
        mask = build_mask(seq)
        dense = dense_attention(seq, mask, attention)
        sparse = block_sparse_attention(seq, mask, attention, block_size)
        np.testing.assert_allclose(sparse.outputs, dense, atol=1e-12)
        assert sparse.blocks_computed <= mask.block_layout(block_size).num_blocks ** 2

    def test_packed_segments_are_skipped(self, rng, attention):
        samples = [synthetic_sample(rng, [4, 4, 4, 2, 2], D_MODEL, VOCAB) for _ in range(4)]
        seq = pack(samples, limit=64)[0]
        result = block_sparse_attention(seq, build_mask(seq), attention, 16)
        # four 16-token segments on the block diagonal; everything off it is skipped
        assert result.skipped_fraction >= 12 / 16

    def test_bad_block_size(self):
        with pytest.raises(ValidationError):
            build_mask(one_of_each()).block_layout(0)


# =============================================================================
# Isolation check
# =============================================================================


class TestIsolation:

    def test_role_mask_isolates_crl_blocks(self, rng, attention):
        for packed in pack(random_samples(rng, 10), limit=64):
            report = isolation_check(packed, attention, np.random.default_rng(1))
            assert report.passed, report.max_diffs
            assert max(report.max_diffs.values()) <= 1e-12

    def test_causal_only_mask_leaks(self, rng, attention):
        seq = pack(random_samples(rng, 3), limit=64)[0]
        report = isolation_check(seq, attention, np.random.default_rng(1), mask=causal_only(seq))
        assert not report.passed
        assert (TokenRole.CRL_ACTION.value, TokenRole.INSTRUCTION.value) in report.leaks
        assert report.violations
        assert report.max_diffs["instruction_to_crl_action"] > 1e-6


# =============================================================================
# Mask dumps and timing
# =============================================================================


class TestMaskDumpAndBench:

    def test_mask_text_round_trip(self, rng):
        seq = pack(random_samples(rng, 5), limit=80)[0]
        mask = build_mask(seq)
        dump = mask_from_text(mask_to_text(seq, mask, 8))
        assert dump.length == len(seq) and dump.block_size == 8
        np.testing.assert_array_equal(dump.status, mask.block_layout(8).status)
        np.testing.assert_array_equal(dump.to_mask().permission, mask.permission)

    def test_mask_text_lists_role_runs(self):
        text = mask_to_text(one_of_each(), build_mask(one_of_each()), 2)
        assert "segment 0: VisionState*1 Instruction*1 ArAction*1 CrlAction*1 CrlGoal*1" in text

    def test_small_bench(self):
        config = BenchConfig(bench_seq_lens=(64, 128), bench_block_size=16, bench_repeats=1,
                             bench_segment_length=32, bench_d_model=8)
        records = mask_bench(config)
        assert len(records) == 8
        assert {r.impl for r in records} == {"dense", "block_sparse"}
        role_sparse = [r for r in records if r.impl == "block_sparse" and r.mask_kind == "role"]
        full_sparse = [r for r in records if r.impl == "block_sparse" and r.mask_kind == "full"]
        assert all(r.skipped_fraction > 0.5 for r in role_sparse)
        assert all(r.skipped_fraction == 0.0 for r in full_sparse)
        assert all(r.median_ns > 0 for r in records)

    def test_warmup_floor(self):
        with pytest.raises(ValidationError):
            mask_bench(BenchConfig(bench_warmup=2))

    @pytest.mark.parametrize("seq_len,segment_length", [(66, 32), (64, 32), (37, 32), (20, 64), (101, 16)])
    def test_bench_sequence_has_exact_length(self, rng, seq_len, segment_length):
        seq = bench_sequence(seq_len, segment_length, 4, rng)
        assert len(seq) == seq_len
        seq.validate()
        for segment in np.unique(seq.segment_ids):
            assert set(seq.role_codes[seq.segment_ids == segment]) == set(range(len(ROLES)))

    def test_bench_sequence_too_short(self, rng):
        with pytest.raises(ValidationError):
            bench_sequence(4, 32, 4, rng)

    def test_bench_with_ragged_length(self):
        config = BenchConfig(bench_seq_lens=(66,), bench_block_size=16, bench_repeats=1,
                             bench_segment_length=32, bench_d_model=8)
        records = mask_bench(config)
        assert len(records) == 4
        assert {r.seq_len for r in records} == {66}


class TestMaskDumpErrors:

    @pytest.fixture
    def dump_text(self, rng):
        seq = pack(random_samples(rng, 3), limit=64)[0]
        return mask_to_text(seq, build_mask(seq), 8)

    def test_truncated_dump(self, dump_text):
        lines = dump_text.splitlines()
        with pytest.raises(ValidationError):
            mask_from_text("\n".join(lines[:2]))

    def test_unknown_role(self, dump_text):
        with pytest.raises(ValidationError, match="malformed"):
            mask_from_text(dump_text.replace("VisionState", "Audio", 1))

    def test_lengths_must_add_up(self, dump_text):
        with pytest.raises(ValidationError, match="add up"):
            mask_from_text(dump_text.replace("mask v1 length=", "mask v1 length=9", 1))

    def test_missing_block_rows(self, dump_text):
        with pytest.raises(ValidationError, match="blocks"):
            mask_from_text(dump_text.rstrip("\n").rsplit("\n", 1)[0])

    @pytest.mark.parametrize("text", ["", "not a dump\n", "mask v1 length=x block_size=8\nblocks:\n"])
    def test_bad_header(self, text):
        with pytest.raises(ValidationError):
            mask_from_text(text)


@pytest.mark.slow
class TestBenchTrend:

    @staticmethod
    def ratios(kind: str) -> float:
        records = mask_bench(BenchConfig(bench_seq_lens=(4096,)), mask_kinds=(kind,))
        by_impl = {r.impl: r.median_ns for r in records}
        return by_impl["block_sparse"] / by_impl["dense"]

    def test_role_mask_sparse_within_bound_of_dense(self):
        assert self.ratios("role") <= 1.3

    def test_full_mask_sparse_within_bound_of_dense(self):
        assert self.ratios("full") <= 1.3
