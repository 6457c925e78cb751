"""Gated linear pair semantics: hand-worked examples, the Top-k value
mask, the sparsity schedule, the L1 gate penalty, and equivalence of the
masked and gather/scatter execution paths."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import dynagate.tensor as T
from dynagate.errors import ContractError, DimensionError
from dynagate.gating import (GateMask, GatePredictor, SparsitySchedule,
                             anneal, dgl_pair_forward,
                             dgl_pair_forward_compact, gate_flops,
                             gate_logits, kept_count, predict_gate,
                             sparsity_loss, top_r)
from dynagate.tensor import Tensor

from helpers import topr_keep_oracle


def mask_from(values, keep):
    return top_r(Tensor(np.asarray(values, dtype=np.float64)), keep)


class TestHandExamples:
    def test_pair_forward_worked_example(self):
        # batch of one single-token sequence, two hidden units, binary
        # mask keeping unit 0
        x = Tensor(np.array([[[1.0, 0.0]]]))
        w1 = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        w2 = Tensor(np.array([[1.0], [1.0]]))
        gm = mask_from([[1.0, 0.0]], 0.5)
        y, z = dgl_pair_forward(x, w1, w2, gm)
        np.testing.assert_allclose(y.data, [[[1.0, 0.0]]])
        np.testing.assert_allclose(z.data, [[[1.0]]])

    def test_mask_carries_values_not_ones(self):
        # kept units keep their gate VALUES, so the hidden features and
        # the second matmul are both scaled
        x = Tensor(np.array([[[1.0, 1.0]]]))
        w1 = Tensor(np.eye(2))
        w2 = Tensor(np.eye(2))
        gm = mask_from([[2.0, 0.5]], 0.5)  # keeps unit 0 with value 2.0
        y, z = dgl_pair_forward(x, w1, w2, gm)
        np.testing.assert_allclose(y.data, [[[2.0, 0.0]]])
        np.testing.assert_allclose(z.data, [[[4.0, 0.0]]])  # scaled twice

    def test_tie_break_prefers_lower_index(self):
        gm = mask_from([[0.3, 0.3, 0.3, 0.3]], 0.5)
        assert sorted(np.flatnonzero(gm.support[0])) == [0, 1]

    def test_sparsity_loss_worked_example(self):
        gm = GateMask(logits=Tensor(np.array([0.2, 0.3])),
                      mask=Tensor(np.array([0.2, 0.3])),
                      kept_count=2, support=np.array([True, True]))
        loss = sparsity_loss([gm], 0.005)
        assert loss.data == pytest.approx(0.0025)

    def test_sparsity_loss_sums_over_masks_and_batch(self):
        a = GateMask(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])),
                     Tensor(np.zeros((2, 2))), 1, np.zeros((2, 2), bool))
        b = GateMask(Tensor(np.array([[5.0]])),
                     Tensor(np.zeros((1, 1))), 1, np.zeros((1, 1), bool))
        assert sparsity_loss([a, b], 0.1).data == pytest.approx(1.5)

    def test_sparsity_loss_empty(self):
        assert sparsity_loss([], 0.005).data == pytest.approx(0.0)
        assert sparsity_loss([None], 0.005).data == pytest.approx(0.0)


class TestKeptCount:
    def test_rounding_half_up(self):
        assert kept_count(0.5, 4) == 2
        assert kept_count(0.5, 5) == 3
        assert kept_count(0.25, 6) == 2  # 1.5 rounds up
        assert kept_count(1.0, 7) == 7

    def test_floor_of_one(self):
        assert kept_count(0.01, 8) == 1

    def test_rejects_out_of_range(self):
        with pytest.raises(ContractError):
            kept_count(0.0, 4)
        with pytest.raises(ContractError):
            kept_count(1.2, 4)
        with pytest.raises(ContractError):
            kept_count(0.5, 0)

    @given(st.floats(0.01, 1.0), st.integers(1, 64))
    def test_count_bounds(self, keep, width):
        k = kept_count(keep, width)
        assert 1 <= k <= width


class TestTopR:
    def test_matches_sort_oracle_exhaustively(self):
        # every width up to 16, several keeps, random values with ties
        rng = np.random.default_rng(0)
        for width in range(1, 17):
            for keep in (0.1, 0.25, 0.5, 0.75, 1.0):
                vals = np.round(rng.uniform(0, 1, size=width), 1)
                gm = mask_from([vals], keep)
                kept = sorted(np.flatnonzero(gm.support[0]))
                assert kept == topr_keep_oracle(vals, gm.kept_count), (
                    width, keep, vals)

    def test_support_shape_and_count(self):
        vals = np.random.default_rng(1).uniform(size=(3, 8))
        gm = mask_from(vals, 0.5)
        assert gm.support.shape == (3, 8)
        assert (gm.support.sum(axis=-1) == 4).all()

    def test_mask_zeroes_dropped(self):
        vals = np.array([[0.9, 0.1, 0.5, 0.3]])
        gm = mask_from(vals, 0.5)
        np.testing.assert_allclose(gm.mask.data, [[0.9, 0.0, 0.5, 0.0]])

    @given(st.integers(1, 16), st.floats(0.05, 1.0), st.integers(0, 2**31))
    @settings(max_examples=60, deadline=None)
    def test_oracle_property(self, width, keep, seed):
        vals = np.random.default_rng(seed).uniform(0, 1, size=width)
        gm = mask_from([vals], keep)
        assert sorted(np.flatnonzero(gm.support[0])) == topr_keep_oracle(
            vals, gm.kept_count)


class TestSchedule:
    def test_starts_dense_ends_at_target(self):
        s = SparsitySchedule(0.5, 100)
        assert s.sparsity(0) == 0.0
        assert s.sparsity(100) == 0.5
        assert s.sparsity(250) == 0.5

    def test_halfway_point_exact(self):
        s = SparsitySchedule(0.5, 100)
        assert s.sparsity(50) == pytest.approx(0.25)

    def test_non_decreasing(self):
        s = SparsitySchedule(0.7, 37)
        vals = [s.sparsity(t) for t in range(120)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))

    def test_zero_anneal_steps_is_immediate(self):
        s = SparsitySchedule(0.5, 0)
        assert s.sparsity(0) == 0.5
        assert anneal(s, 0) == 0.5

    def test_keep_fraction_complements(self):
        s = SparsitySchedule(0.3, 10)
        for t in (0, 3, 10, 99):
            assert s.keep_fraction(t) == pytest.approx(1.0 - s.sparsity(t))

    def test_rejects_bad_arguments(self):
        with pytest.raises(ContractError):
            SparsitySchedule(1.0, 10)
        with pytest.raises(ContractError):
            SparsitySchedule(-0.1, 10)
        with pytest.raises(ContractError):
            SparsitySchedule(0.5, -1)


class TestMaskedCompactEquivalence:
    def _random_case(self, rng, with_bias, with_hidden, invariant_mask):
        b, n = int(rng.integers(1, 4)), int(rng.integers(1, 6))
        c, cbar = int(rng.integers(1, 6)), int(rng.integers(1, 9))
        x = rng.normal(size=(b, n, c))
        w1 = rng.normal(size=(c, cbar))
        w2 = rng.normal(size=(cbar, c))
        b1 = rng.normal(size=cbar) if with_bias else None
        b2 = rng.normal(size=c) if with_bias else None
        keep = float(rng.uniform(0.2, 1.0))
        if invariant_mask:
            logits = np.abs(rng.normal(size=cbar))
        else:
            logits = np.abs(rng.normal(size=(b, cbar)))
        gm = top_r(Tensor(logits), keep)
        hidden = None
        hidden_compact = None
        if with_hidden:
            def hidden(y):
                return T.relu(y)

            def hidden_compact(y, idx):
                return np.maximum(y, 0.0)
        y_m, z_m = dgl_pair_forward(
            Tensor(x), Tensor(w1), Tensor(w2), gm,
            None if b1 is None else Tensor(b1),
            None if b2 is None else Tensor(b2), hidden)
        y_c, z_c = dgl_pair_forward_compact(x, w1, w2, gm, b1, b2,
                                            hidden_compact)
        np.testing.assert_allclose(y_c, y_m.data, atol=1e-5, rtol=1e-5)
        np.testing.assert_allclose(z_c, z_m.data, atol=1e-5, rtol=1e-5)

    def test_equivalence_random_cases(self):
        rng = np.random.default_rng(7)
        for case in range(40):
            self._random_case(rng, with_bias=bool(case % 2),
                              with_hidden=bool((case // 2) % 2),
                              invariant_mask=bool((case // 4) % 2))

    def test_dense_path_when_mask_none(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(2, 3, 4))
        w1 = rng.normal(size=(4, 6))
        w2 = rng.normal(size=(6, 4))
        y_m, z_m = dgl_pair_forward(Tensor(x), Tensor(w1), Tensor(w2), None)
        y_c, z_c = dgl_pair_forward_compact(x, w1, w2, None)
        np.testing.assert_allclose(y_c, y_m.data, atol=1e-12)
        np.testing.assert_allclose(z_c, z_m.data, atol=1e-12)

    def test_width_mismatch_raises(self):
        x = Tensor(np.zeros((1, 2, 3)))
        w1 = Tensor(np.zeros((3, 4)))
        w2 = Tensor(np.zeros((5, 3)))
        with pytest.raises(DimensionError):
            dgl_pair_forward(x, w1, w2, None)


class TestPredictor:
    def test_fresh_predictor_gates_near_one(self):
        rng = np.random.default_rng(0)
        pred = GatePredictor(4, 8, rng)
        x = Tensor(rng.normal(size=(2, 5, 4)))
        w1 = Tensor(rng.normal(size=(4, 8)) * 0.1)
        logits = gate_logits(x, w1, pred)
        assert logits.data.shape == (2, 8)
        np.testing.assert_allclose(logits.data, np.ones((2, 8)), atol=0.5)

    def test_predictor_hidden_width_floor(self):
        pred = GatePredictor(4, 8, np.random.default_rng(0))
        assert pred.fc1.weight.data.shape == (8, 4)  # max(4, 8 // 4) = 4
        pred = GatePredictor(4, 64, np.random.default_rng(0))
        assert pred.fc1.weight.data.shape == (64, 16)

    def test_predict_gate_masks_per_instance(self):
        rng = np.random.default_rng(3)
        pred = GatePredictor(4, 8, rng)
        # make gates depend strongly on the input
        pred.fc2.weight.data[:] = rng.normal(
            size=pred.fc2.weight.data.shape) * 3.0
        x = Tensor(rng.normal(size=(3, 6, 4)))
        w1 = Tensor(rng.normal(size=(4, 8)))
        gm = predict_gate(x, w1, pred, 0.5)
        assert gm.support.shape == (3, 8)
        assert (gm.support.sum(axis=-1) == 4).all()


class TestGateFlops:
    def test_scales_with_sequence_only_in_pooling(self):
        base = gate_flops(64, 32, 128)
        longer = gate_flops(128, 32, 128)
        assert longer - base == 64 * 32  # only the pooling term grows

    def test_positive_and_modest(self):
        # the predictor must stay tiny next to its pair: N * C * Cbar
        pair = 64 * 32 * 128
        assert 0 < gate_flops(64, 32, 128) < pair
