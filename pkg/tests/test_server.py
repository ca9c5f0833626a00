import json

import numpy as np
import pytest

from oracles import brute_consistency, reference_aggregate
from stylefl import numerics as nx
from stylefl.client import ClientUpload
from stylefl.errors import EmptyRoundError, ProtocolError
from stylefl.server import (
    AggregatorState,
    PrototypeTensor,
    aggregate,
    aggregator_loss,
    assemble,
    dump_round,
    encode_tokens,
    server_consistency_loss,
    split,
    train_aggregator,
)


def random_cp(rng, M, C, d, p_present=0.7, ids=None):
    mask = rng.random((M, C)) < p_present
    mask[0, :] = True  # every class present at least once
    values = np.where(mask[..., None], rng.normal(size=(M, C, d)), 0.0)
    counts = np.where(mask, rng.integers(1, 9, size=(M, C)), 0)
    ids = np.arange(M) if ids is None else np.asarray(ids)
    return PrototypeTensor(values, mask, ids, counts)


def random_agg(rng, K, C, d, heads=2):
    agg = AggregatorState.init(K, C, d, heads, rng)
    for p in agg.parameters():
        p.value = p.value + rng.normal(size=p.shape) * 0.3
    return agg


# ---------------------------------------------------------------------------


class TestAssemble:
    def uploads(self):
        return [
            ClientUpload(7, {0: np.ones(3)}, {0: 4}, 3),
            ClientUpload(2, {1: np.full(3, 2.0), 2: np.zeros(3)}, {1: 1, 2: 5}, 3),
        ]

    def test_disjoint_mask(self):
        cp = assemble(self.uploads(), 3)
        assert cp.mask.tolist() == [[True, False, False], [False, True, True]]
        assert cp.client_ids.tolist() == [7, 2]
        assert not cp.values[~cp.mask].any()

    def test_full_row(self):
        up = ClientUpload(0, {c: np.ones(2) for c in range(4)}, {c: 1 for c in range(4)}, 4)
        assert assemble([up], 4).mask.all()

    def test_round_trip(self):
        ups = self.uploads()
        back = split(assemble(ups, 3))
        for a, b in zip(ups, back):
            assert a.to_dict() == b.to_dict()
            assert a.client_id == b.client_id

    def test_duplicate_id(self):
        ups = self.uploads()
        with pytest.raises(ProtocolError):
            assemble([ups[0], ups[0]], 3)

    def test_empty(self):
        with pytest.raises(EmptyRoundError):
            assemble([], 3)


class TestAggregate:
    def test_matches_straight_line_reference(self):
        rng = np.random.default_rng(0)
        agg = random_agg(rng, 5, 2, 4, heads=2)
        cp = random_cp(rng, 3, 2, 4, ids=[4, 0, 2])
        cp.mask[1, 1] = False
        cp.values[1, 1] = 0.0
        res = aggregate(agg, cp)
        protos, alpha, Z = reference_aggregate(agg, cp)
        np.testing.assert_allclose(res.Z, Z, atol=1e-9, rtol=0)
        np.testing.assert_allclose(res.attention, alpha, atol=1e-9, rtol=0)
        np.testing.assert_allclose(res.global_protos, protos, atol=1e-9, rtol=0)

    def test_single_client(self):
        rng = np.random.default_rng(1)
        agg = AggregatorState.init(3, 3, 8, 4, rng)
        cp = random_cp(rng, 1, 3, 8)
        res = aggregate(agg, cp)
        assert res.attention.tolist() == [[1.0, 1.0, 1.0]]
        np.testing.assert_array_equal(res.global_protos, res.Z[0])

    def test_identical_uploads_give_uniform_weights(self):
        rng = np.random.default_rng(2)
        agg = AggregatorState.init(4, 2, 8, 4, rng)
        agg.client_emb.value[:] = agg.client_emb.value[0]
        base = rng.normal(size=(2, 8))
        cp = PrototypeTensor(np.stack([base] * 4), np.ones((4, 2), bool), np.arange(4), np.ones((4, 2), int))
        np.testing.assert_allclose(aggregate(agg, cp).attention, 0.25, atol=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_attention_invariants(self, seed):
        rng = np.random.default_rng(seed)
        M, C = rng.integers(1, 5), rng.integers(1, 4)
        agg = random_agg(rng, 6, C, 8, heads=4)
        cp = random_cp(rng, M, C, 8, ids=rng.choice(6, M, replace=False))
        res = aggregate(agg, cp)
        for c in range(C):
            col = res.attention[:, c]
            assert abs(col.sum() - 1) <= 1e-9
            assert np.all(col >= 0)
            assert np.all(col[~cp.mask[:, c]] == 0)
            # global prototype lies in the span of the present Z rows
            basis = res.Z[cp.mask[:, c], c].T
            coef, *_ = np.linalg.lstsq(basis, res.global_protos[c], rcond=None)
            assert np.linalg.norm(basis @ coef - res.global_protos[c]) < 1e-8

    def test_masked_entries_do_not_leak(self):
        rng = np.random.default_rng(3)
        agg = random_agg(rng, 4, 3, 8, heads=4)
        cp = random_cp(rng, 4, 3, 8)
        cp.mask[2, 1] = False
        cp.values[2, 1] = 0.0
        before = aggregate(agg, cp)
        cp.values[2, 1] = rng.normal(size=8) * 100  # garbage under the mask
        after = aggregate(agg, cp)
        np.testing.assert_array_equal(before.Z, after.Z)
        assert not before.Z[2, 1].any()

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(4)
        agg = random_agg(rng, 5, 3, 8, heads=4)
        cp = random_cp(rng, 4, 3, 8, ids=[3, 0, 4, 1])
        order = [2, 0, 3, 1]
        a, b = aggregate(agg, cp), aggregate(agg, cp.permuted(order))
        np.testing.assert_allclose(b.Z, a.Z[order], atol=1e-9)
        np.testing.assert_allclose(b.global_protos, a.global_protos, atol=1e-9)

    def test_gradient(self):
        rng = np.random.default_rng(5)
        agg = random_agg(rng, 3, 2, 4, heads=2)
        cp = random_cp(rng, 3, 2, 4)
        w = rng.normal(size=(2, 4))

        def objective():
            Z = encode_tokens(agg, cp)
            return server_consistency_loss(Z, cp) + (Z.sum(axis=0) * w).sum() * 0.1

        assert nx.grad_check(objective, agg.parameters(), max_entries=6, rng=rng) < 1e-4


class TestConsistencyLoss:
    def test_identity_and_equal_uploads(self):
        rng = np.random.default_rng(6)
        agg = AggregatorState.init(3, 2, 4, 2, rng)
        agg.set_identity()
        agg.zero_embeddings()
        base = rng.normal(size=(2, 4))
        cp = PrototypeTensor(np.stack([base] * 3), np.ones((3, 2), bool), np.arange(3), np.ones((3, 2), int))
        assert aggregator_loss(agg, cp).item() == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal(self):
        cp = PrototypeTensor(
            np.array([[[1.0, 0.0]], [[2.0, 0.0]]]), np.ones((2, 1), bool), np.arange(2), np.ones((2, 1), int)
        )
        Z = np.array([[[0.0, 1.0]], [[0.0, 3.0]]])
        assert server_consistency_loss(Z, cp).item() == pytest.approx(1.0, abs=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        cp = random_cp(rng, 2, 2, 3)
        Z = np.where(cp.mask[..., None], rng.normal(size=(2, 2, 3)), 0.0)
        assert abs(server_consistency_loss(Z, cp).item() - brute_consistency(Z, cp)) < 1e-12

    def test_empty(self):
        cp = PrototypeTensor(np.zeros((1, 2, 3)), np.zeros((1, 2), bool), np.arange(1), np.zeros((1, 2), int))
        with pytest.raises(EmptyRoundError):
            server_consistency_loss(np.zeros((1, 2, 3)), cp)


class TestTraining:
    def test_zero_lr_is_bit_identical(self):
        rng = np.random.default_rng(7)
        agg = AggregatorState.init(4, 3, 8, 4, rng)
        cp = random_cp(rng, 4, 3, 8)
        before = agg.snapshot()
        train_aggregator(agg, cp, 5, 0.0)
        assert all(np.array_equal(a, b) for a, b in zip(before, agg.snapshot()))

    def test_descent(self):
        rng = np.random.default_rng(8)
        agg = AggregatorState.init(4, 3, 8, 4, rng)
        cp = random_cp(rng, 4, 3, 8)
        report = train_aggregator(agg, cp, 20, 1e-3)
        assert report.final_loss <= report.initial_loss
        assert aggregator_loss(agg, cp).item() == pytest.approx(report.final_loss, abs=1e-12)

    def test_rejection_keeps_loss_monotone(self):
        rng = np.random.default_rng(9)
        agg = AggregatorState.init(4, 3, 8, 4, rng)
        cp = random_cp(rng, 4, 3, 8)
        report = train_aggregator(agg, cp, 20, 50.0)
        assert report.final_loss <= report.initial_loss
        assert aggregator_loss(agg, cp).item() == pytest.approx(report.final_loss, abs=1e-12)

    def test_non_finite_aborts_and_restores(self):
        rng = np.random.default_rng(10)
        agg = AggregatorState.init(4, 3, 8, 4, rng)
        cp = random_cp(rng, 4, 3, 8)
        before = agg.snapshot()
        agg.params["wq"].value = agg.params["wq"].value * np.nan
        report = train_aggregator(agg, cp, 3, 1e-3)
        assert report.aborted
        agg.restore(before)


def test_dump_round(tmp_path):
    rng = np.random.default_rng(11)
    agg = AggregatorState.init(3, 2, 4, 2, rng)
    cp = random_cp(rng, 2, 2, 4)
    res = aggregate(agg, cp)
    dump_round(tmp_path / "r.json", 3, res, cp)
    payload = json.loads((tmp_path / "r.json").read_text())
    assert payload["round"] == 3
    np.testing.assert_array_equal(np.array(payload["Z"]), res.Z)
