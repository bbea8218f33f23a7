import logging
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from pafs import oracles
from pafs.errors import ContractError
from pafs.losses import (APLConfig, CPLConfig, apl_batch, apl_loss, compute_prototypes, cpl_loss,
                         draw_cpl_negatives, few_shot_loss, mine_triplets, proto_distances,
                         squared_euclidean, total_loss, triplet_angles)
from pafs.model import l2_normalize_rows

D = torch.float64


def _t(x):
    return torch.tensor(x, dtype=D)


def _unit(rng, shape):
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _episode(rng, n, k, q, dim):
    support = rng.standard_normal((n * k, dim))
    query = rng.standard_normal((n * q, dim))
    s_lab = np.repeat(np.arange(n), k)
    q_lab = np.repeat(np.arange(n), q)
    return support, s_lab, query, q_lab


# -- prototypes and distances ----------------------------------------------------------------

def test_prototype_examples():
    v = _t([[0.3, -1.2]] * 4)
    assert torch.equal(compute_prototypes(v, [0] * 4, 1), v[:1])
    assert torch.equal(compute_prototypes(_t([[0, 0], [2, 0]]), [0, 0], 1), _t([[1, 0]]))
    with pytest.raises(ContractError):
        compute_prototypes(_t([[0, 0], [2, 0]]), [0, 0], 2)


def test_prototypes_match_oracle():
    rng = np.random.default_rng(0)
    s, lab, _, _ = _episode(rng, 5, 5, 1, 7)
    fast = compute_prototypes(_t(s), lab, 5).numpy()
    np.testing.assert_allclose(fast, oracles.naive_prototypes(s.tolist(), lab.tolist(), 5), atol=1e-12, rtol=0)


def test_distance_examples():
    assert squared_euclidean(_t([[1.5, 2.0]]), _t([[1.5, 2.0]])).item() == 0
    assert squared_euclidean(_t([[0, 0]]), _t([[3, 4]])).item() == 25
    assert proto_distances(_t([[0, 0]]), _t([[3, 4]]), squared=False).item() == pytest.approx(5)
    with pytest.raises(ContractError):
        squared_euclidean(_t([[0, 0]]), _t([[0, 0, 0]]))
    rng = np.random.default_rng(1)
    q, p = rng.standard_normal((9, 6)), rng.standard_normal((4, 6))
    np.testing.assert_allclose(squared_euclidean(_t(q), _t(p)).numpy(),
                               oracles.naive_sq_distances(q.tolist(), p.tolist()), atol=1e-10, rtol=0)


# -- few-shot loss ---------------------------------------------------------------------------

def test_fs_equidistant_is_ln5():
    protos = torch.eye(5, dtype=D)
    queries = torch.zeros(3, 5, dtype=D)
    loss = few_shot_loss(queries, [0, 2, 4], protos)
    assert abs(loss.item() - math.log(5)) < 1e-9


def test_fs_two_coincident_prototypes_is_ln2():
    protos = _t([[1.0, 2.0], [1.0, 2.0]])
    assert abs(few_shot_loss(_t([[1.0, 2.0]]), [1], protos).item() - math.log(2)) < 1e-12


def test_fs_literal_prefactor_scales_by_n():
    rng = np.random.default_rng(2)
    s, sl, q, ql = _episode(rng, 5, 2, 3, 4)
    protos = compute_prototypes(_t(s), sl, 5)
    mean = few_shot_loss(_t(q), ql, protos)
    literal = few_shot_loss(_t(q), ql, protos, literal_prefactor=True)
    assert literal.item() == pytest.approx(5 * mean.item(), rel=1e-12)


@pytest.mark.parametrize("squared", [True, False])
def test_fs_matches_oracle(squared):
    rng = np.random.default_rng(3)
    for _ in range(10):
        s, sl, q, ql = _episode(rng, 5, 3, 4, 6)
        protos = compute_prototypes(_t(s), sl, 5)
        fast = few_shot_loss(_t(q), ql, protos, squared).item()
        ref = oracles.naive_fs_loss(q.tolist(), ql.tolist(), protos.tolist(), squared)
        assert abs(fast - ref) < 1e-10


def test_fs_rejects_nan():
    q = _t([[float("nan"), 0.0]])
    with pytest.raises(ContractError):
        few_shot_loss(q, [0], _t([[0.0, 0.0]]))


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(4)
    d = proto_distances(_t(rng.standard_normal((20, 8)) * 3), _t(rng.standard_normal((5, 8))))
    rows = torch.softmax(-d, dim=1).sum(dim=1)
    assert torch.all((rows - 1).abs() < 1e-9)


# -- CPL -------------------------------------------------------------------------------------

@pytest.mark.parametrize("temperature", [0.05, 0.1, 1.0, 7.5])
def test_cpl_equal_products_is_ln6(temperature):
    v = _unit(np.random.default_rng(0), (1, 4))
    protos = _t(np.repeat(v, 3, axis=0))
    queries = _t(np.repeat(v, 9, axis=0))
    labels = np.repeat(np.arange(3), 3)
    neg = draw_cpl_negatives(labels, 5, np.random.default_rng(1))
    loss = cpl_loss(protos, queries, labels, neg, temperature)
    assert abs(loss.item() - math.log(6)) < 1e-9


def test_cpl_negatives_properties():
    labels = np.repeat(np.arange(4), 3)
    neg = draw_cpl_negatives(labels, 6, np.random.default_rng(5))
    assert neg.shape == (12, 6)
    for i, row in enumerate(neg):
        assert len(set(row.tolist())) == 6
        assert np.all(labels[row] != labels[i])


def test_cpl_negatives_replayable():
    labels = np.repeat(np.arange(3), 2)
    a = draw_cpl_negatives(labels, 3, np.random.default_rng(7))
    b = draw_cpl_negatives(labels, 3, np.random.default_rng(7))
    assert np.array_equal(a, b)


def test_cpl_clamps_m(caplog):
    labels = np.repeat(np.arange(3), 2)
    with caplog.at_level(logging.WARNING):
        neg = draw_cpl_negatives(labels, 10, np.random.default_rng(0))
    assert neg.shape == (6, 4)
    assert "clamping" in caplog.text


def test_cpl_matches_oracle():
    rng = np.random.default_rng(6)
    for _ in range(10):
        protos, queries = _unit(rng, (4, 5)), _unit(rng, (12, 5))
        labels = np.repeat(np.arange(4), 3)
        neg = draw_cpl_negatives(labels, 5, rng)
        fast = cpl_loss(_t(protos), _t(queries), labels, neg, 0.2).item()
        ref = oracles.naive_cpl(protos.tolist(), queries.tolist(), labels.tolist(), neg.tolist(), 0.2)
        assert abs(fast - ref) < 1e-10


def test_cpl_config_validation():
    with pytest.raises(ContractError):
        CPLConfig(temperature=0).validate()
    with pytest.raises(ContractError):
        CPLConfig(m=0).validate()


# -- angular miner ---------------------------------------------------------------------------

def _triangle():
    x = _t([[1.0, 0.0], [-1.0, 0.0], [0.0, 10.0]])
    return x, torch.tensor([0, 0, 1]), torch.tensor([True, False, False])


def test_miner_small_angle_example():
    x, lab, is_proto = _triangle()
    angle = triplet_angles(x, torch.tensor([0]), torch.tensor([1]), torch.tensor([2])).item()
    assert angle == pytest.approx(math.degrees(math.atan(2 / 20)))
    assert angle == pytest.approx(5.71, abs=5e-3)
    assert mine_triplets(x, lab, is_proto, 30).shape == (0, 3)
    assert mine_triplets(x, lab, is_proto, 0).tolist() == [[0, 1, 2]]


def test_miner_alpha_90_is_empty():
    rng = np.random.default_rng(8)
    x = _t(rng.standard_normal((9, 3)))
    lab = torch.tensor([0, 1, 2, 0, 0, 1, 1, 2, 2])
    assert len(mine_triplets(x, lab, torch.ones(9, dtype=torch.bool), 90, "all")) == 0


def test_miner_degenerate_angle_is_90():
    x = _t([[1.0, 0.0], [-1.0, 0.0], [0.0, 0.0]])
    _, lab, is_proto = _triangle()
    assert triplet_angles(x, torch.tensor([0]), torch.tensor([1]), torch.tensor([2])).item() == 90.0
    assert mine_triplets(x, lab, is_proto, 89.9).tolist() == [[0, 1, 2]]


def test_miner_alpha_zero_keeps_all_candidates():
    rng = np.random.default_rng(9)
    x, lab, is_proto = apl_batch(_t(_unit(rng, (3, 4))), _t(_unit(rng, (6, 4))), [0, 0, 1, 1, 2, 2])
    trip = mine_triplets(x, lab, is_proto, 0.0)
    # each prototype pairs with its 2 queries and the 6 other-class rows
    assert len(trip) == 3 * 2 * 6
    assert len(mine_triplets(x, lab, is_proto, 0.0, "all")) == 9 * 2 * 6


@pytest.mark.parametrize("mode", ["prototypes", "all"])
@pytest.mark.parametrize("alpha", [0, 15, 30, 45])
def test_miner_and_apl_match_oracle(mode, alpha):
    rng = np.random.default_rng(alpha + (mode == "all"))
    for _ in range(5):
        x, lab, is_proto = apl_batch(_t(_unit(rng, (3, 4))), _t(_unit(rng, (6, 4))), [0, 0, 1, 1, 2, 2])
        trip = mine_triplets(x, lab, is_proto, alpha, mode)
        ref = oracles.naive_mine(x.tolist(), lab.tolist(), is_proto.tolist(), alpha, mode)
        assert [tuple(t) for t in trip.tolist()] == ref
        fast = apl_loss(x, trip, alpha).item()
        assert abs(fast - oracles.naive_apl(x.tolist(), ref, alpha)) < 1e-10


def test_apl_examples():
    n_neg = 4
    rows = np.zeros((2 + n_neg, 6))
    rows[0, 0] = rows[1, 1] = 1.0
    for j in range(n_neg):
        rows[2 + j, 2 + j] = 1.0
    x = _t(rows)
    lab = torch.tensor([0, 0] + [1] * n_neg)
    is_proto = torch.tensor([True] + [False] * (1 + n_neg))
    trip = mine_triplets(x, lab, is_proto, 0.0)
    assert len(trip) == n_neg
    pair_term = apl_loss(x, trip, 0.0).item() * len(lab)
    assert abs(pair_term - math.log(1 + n_neg)) < 1e-9
    assert apl_loss(x, trip[:0], 15.0).item() == 0.0


def test_apl_alpha_zero_ignores_negatives():
    rng = np.random.default_rng(10)
    x = _t(_unit(rng, (4, 3)))
    lab = torch.tensor([0, 0, 1, 1])
    is_proto = torch.tensor([True, False, False, False])
    trip = mine_triplets(x, lab, is_proto, 0.0)
    assert trip.tolist() == [[0, 1, 2], [0, 1, 3]]
    moved = x.clone()
    moved[2:] = _t(_unit(rng, (2, 3)))
    assert apl_loss(moved, trip, 0.0).item() == pytest.approx(apl_loss(x, trip, 0.0).item(), abs=1e-15)
    assert apl_loss(moved, trip, 15.0).item() != pytest.approx(apl_loss(x, trip, 15.0).item())


def test_apl_large_exponents_are_finite():
    x = _t([[50.0, 0.0], [-50.0, 0.0], [0.0, 60.0], [30.0, 30.0]])
    lab = torch.tensor([0, 0, 1, 1])
    trip = mine_triplets(x, lab, torch.ones(4, dtype=torch.bool), 0.0, "all")
    loss = apl_loss(x, trip, 45.0)
    assert torch.isfinite(loss)
    xs = x.numpy()
    pairs = {}
    for a, p, n in trip.tolist():
        f = 4 * np.dot(xs[a] + xs[p], xs[n]) - 4 * np.dot(xs[a], xs[p])
        pairs.setdefault((a, p), [0.0]).append(f)
    expect = sum(np.logaddexp.reduce(v) for v in pairs.values()) / 4
    assert loss.item() == pytest.approx(expect, rel=1e-12)


def test_apl_monotone_margin():
    xa, xp = np.array([1.0, 0.2, 0.0]), np.array([0.4, 1.0, 0.3])
    xc = (xa + xp) / 2
    u = -xc / np.linalg.norm(xc)
    for alpha in (5.0, 15.0, 30.0, 45.0):
        terms = []
        for r in np.linspace(0.5, 5.0, 10):
            x = _t(np.stack([xa, xp, xc + r * u]))
            terms.append(apl_loss(x, torch.tensor([[0, 1, 2]]), alpha, normalizer=1).item())
        assert np.all(np.diff(terms) < 0)


def test_apl_config_validation():
    for bad in (APLConfig(alpha_deg=90), APLConfig(alpha_deg=-1), APLConfig(anchor_mode="x")):
        with pytest.raises(ContractError):
            bad.validate()


# -- properties ------------------------------------------------------------------------------

def _relabel(perm, labels):
    return np.asarray(perm)[np.asarray(labels)]


def test_permutation_equivariance():
    rng = np.random.default_rng(11)
    n, k, q = 4, 2, 3
    s, sl, qx, ql = _episode(rng, n, k, q, 5)
    perm = rng.permutation(n)
    inv = np.argsort(perm)
    protos = compute_prototypes(_t(s), sl, n)
    protos_p = compute_prototypes(_t(s), _relabel(perm, sl), n)
    assert torch.allclose(protos_p, protos[inv])
    assert few_shot_loss(_t(qx), _relabel(perm, ql), protos_p).item() == \
        pytest.approx(few_shot_loss(_t(qx), ql, protos).item(), abs=1e-12)

    p_hat, q_hat = l2_normalize_rows(protos), l2_normalize_rows(_t(qx))
    neg = draw_cpl_negatives(ql, 4, rng)
    a = cpl_loss(p_hat, q_hat, ql, neg, 0.1).item()
    b = cpl_loss(p_hat[inv], q_hat, _relabel(perm, ql), neg, 0.1).item()
    assert a == pytest.approx(b, abs=1e-12)

    for mode in ("prototypes", "all"):
        x, lab, isp = apl_batch(p_hat, q_hat, ql)
        xp_, labp, ispp = apl_batch(p_hat[inv], q_hat, _relabel(perm, ql))
        la = apl_loss(x, mine_triplets(x, lab, isp, 15, mode), 15).item()
        lb = apl_loss(xp_, mine_triplets(xp_, labp, ispp, 15, mode), 15).item()
        assert la == pytest.approx(lb, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), alpha=st.sampled_from([0.0, 15.0, 30.0, 45.0]),
       mode=st.sampled_from(["prototypes", "all"]), temp=st.floats(0.05, 2.0))
def test_losses_non_negative(seed, alpha, mode, temp):
    rng = np.random.default_rng(seed)
    s, sl, qx, ql = _episode(rng, 3, 2, 2, 4)
    protos = compute_prototypes(_t(s), sl, 3)
    assert few_shot_loss(_t(qx), ql, protos).item() >= 0
    p_hat, q_hat = l2_normalize_rows(protos), l2_normalize_rows(_t(qx))
    assert cpl_loss(p_hat, q_hat, ql, draw_cpl_negatives(ql, 3, rng), temp).item() >= 0
    x, lab, isp = apl_batch(p_hat, q_hat, ql)
    assert apl_loss(x, mine_triplets(x, lab, isp, alpha, mode), alpha).item() >= 0


def test_scale_invariance_after_normalization():
    rng = np.random.default_rng(12)
    protos, queries = rng.standard_normal((3, 4)), rng.standard_normal((6, 4))
    labels = np.repeat(np.arange(3), 2)
    neg = draw_cpl_negatives(labels, 3, rng)

    def both(scale):
        p_hat = l2_normalize_rows(_t(protos * scale))
        q_hat = l2_normalize_rows(_t(queries * scale))
        x, lab, isp = apl_batch(p_hat, q_hat, labels)
        return (cpl_loss(p_hat, q_hat, labels, neg, 0.1).item(),
                apl_loss(x, mine_triplets(x, lab, isp, 15), 15).item())

    base = both(1.0)
    for scale in (1e-3, 0.5, 17.0, 1e4):
        assert both(scale) == pytest.approx(base, abs=1e-12)


# -- gradients -------------------------------------------------------------------------------

def _gradcheck(fn, x):
    t = _t(x).requires_grad_(True)
    fn(t).backward()
    numeric = oracles.finite_diff_gradient(lambda a: fn(_t(a)).item(), x, 1e-5)
    return oracles.max_relative_error(t.grad.numpy(), numeric)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(13)
    s, sl, qx, ql = _episode(rng, 3, 2, 2, 4)
    protos = compute_prototypes(_t(s), sl, 3).detach()
    assert _gradcheck(lambda q: few_shot_loss(q, ql, protos), qx) < 1e-4

    p_hat = _unit(rng, (3, 4))
    q_hat = _unit(rng, (6, 4))
    neg = draw_cpl_negatives(ql, 3, rng)
    assert _gradcheck(lambda q: cpl_loss(_t(p_hat), q, ql, neg, 0.5), q_hat) < 1e-4

    x0, lab, isp = apl_batch(_t(p_hat), _t(q_hat), ql)
    trip = mine_triplets(x0, lab, isp, 15, "all")
    assert len(trip) > 0
    assert _gradcheck(lambda x: apl_loss(x, trip, 15), x0.numpy()) < 1e-4


# -- total -----------------------------------------------------------------------------------

def test_total_loss_examples():
    assert total_loss(1.25, 7.0, 0.0).l_total == 1.25
    assert total_loss(1.0, 2.0, 0.3).l_total == pytest.approx(1.6)
    assert total_loss(0.7, 0.0, 1.0).l_total == 0.7
    rep = total_loss(torch.tensor(1.0), torch.tensor(2.0), 0.3, 5)
    assert rep.l_total.item() == pytest.approx(1.6) and rep.triplets_mined == 5
