import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from contractify.bnb import (
    FALSIFIED, UNKNOWN, VERIFIED, BoxExclusion, Budget, CertificateError, DisjunctiveSpec,
    ExprNonNeg, PgdConfig, SpecError, check_witness, contraction_spec, falsify,
    invariance_certificate, max_levelset, split, split_scores, verify, verify_contraction,
    verify_forward_invariance,
)
from contractify.bnb.engine import VerifyResult
from contractify.box import IntervalBox
from contractify.certificates import ContractionTask, LyapunovFn, constant_metric_from, g_value
from contractify.nnet.graph import GraphBuilder
from contractify.systems import make_linear, make_vdp


def identity_metric():
    return constant_metric_from(np.eye(2), 1.0)


def linear_task(a, rho_c, eps=0.1, V=None):
    return ContractionTask(make_linear(a), identity_metric(), V, rho_c=rho_c, eps=eps)


def test_trivial_spec_one_box():
    b = GraphBuilder()
    x = b.input(1)
    g = b.build(b.add(x, b.const([1.0])))
    res = verify(DisjunctiveSpec((ExprNonNeg(0),), IntervalBox([0.0], [1.0]), g))
    assert res.status == VERIFIED and res.stats["boxes"] == 1


def test_half_map_contraction_verified():
    res = verify(contraction_spec(linear_task(0.5, 0.6)))
    assert res.status == VERIFIED


def test_double_map_contraction_falsified():
    t = linear_task(2.0, 0.9)
    res = verify(contraction_spec(t))
    assert res.status == FALSIFIED
    x, d = np.array(res.witness["x"]), np.array(res.witness["delta"])
    assert np.any(d != 0)
    assert g_value(t, x, d) == pytest.approx(3.19 * (d**2).sum(), rel=1e-9)
    assert g_value(t, x, d) > 0


def test_falsify_examples():
    spec = contraction_spec(linear_task(2.0, 0.9))
    assert falsify(spec, pgd=PgdConfig(steps=50, restarts=10)) is not None
    assert falsify(contraction_spec(linear_task(0.5, 0.6))) is None
    b = GraphBuilder()
    x = b.input(1)
    g = b.build(b.sub(x, b.const([-1.0])))
    always = DisjunctiveSpec((ExprNonNeg(0),), IntervalBox([0.0], [1.0]), g)
    assert falsify(always) is None


def test_witness_violates_every_clause():
    spec = contraction_spec(linear_task(2.0, 0.9))
    w = falsify(spec)
    assert all(m < 0 for m in w["margins"])
    assert check_witness(spec, w["z"]) is not None


def test_split_prefers_widest_dimension():
    b = GraphBuilder()
    x = b.input(2)
    g = b.build(b.sum(x))
    spec = DisjunctiveSpec((ExprNonNeg(0),), IntervalBox([0.0, 0.0], [2.0, 1.0]), g)
    scores = split_scores(spec, [[0.0, 0.0]], [[2.0, 1.0]], [0])
    assert scores.argmax() == 0
    (l1, h1), (l2, h2) = split(np.array([[0.0, 0.0]]), np.array([[2.0, 1.0]]), np.array([0]))
    assert h1[0, 0] == 1.0 and l2[0, 0] == 1.0


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3),
       st.lists(st.floats(0.01, 5), min_size=3, max_size=3), st.integers(0, 2))
def test_split_partitions(lo, w, dim):
    lo = np.array([lo])
    hi = lo + np.array([w])
    (l1, h1), (l2, h2) = split(lo, hi, np.array([dim]))
    assert np.array_equal(l1, lo) and np.array_equal(h2, hi)
    assert h1[0, dim] == l2[0, dim]
    others = [i for i in range(3) if i != dim]
    assert np.array_equal(h1[0, others], hi[0, others])
    assert np.array_equal(l2[0, others], lo[0, others])


def test_budget_rejects_zero_boxes():
    with pytest.raises(ValueError):
        Budget(max_boxes=0)


def test_spec_validation():
    b = GraphBuilder()
    g = b.build(b.sum(b.input(2)))
    with pytest.raises(SpecError):
        DisjunctiveSpec((), IntervalBox([0.0, 0.0], [1.0, 1.0]), g)
    with pytest.raises(SpecError):
        DisjunctiveSpec((ExprNonNeg(3),), IntervalBox([0.0, 0.0], [1.0, 1.0]), g)


def test_box_exclusion_clause():
    b = GraphBuilder()
    x = b.input(1)
    g = b.build(b.add(x, b.const([2.0])))
    spec = DisjunctiveSpec((BoxExclusion((0,), IntervalBox([-1.0], [1.0])),),
                           IntervalBox([0.0], [1.0]), g)
    assert verify(spec).status == VERIFIED
    spec2 = DisjunctiveSpec((BoxExclusion((0,), IntervalBox([-1.0], [2.5])),),
                            IntervalBox([0.0], [1.0]), g)
    assert verify(spec2).status == FALSIFIED


def test_invariance_examples():
    V = LyapunovFn.quadratic(np.eye(2), 0.5, 0.25)
    assert verify_forward_invariance(make_linear(0.5), V).status == VERIFIED
    assert verify_forward_invariance(make_linear(2.0), V).status == FALSIFIED
    res = verify_forward_invariance(make_linear(2.0), V.with_level(0.0))
    assert res.status == VERIFIED


def test_contraction_requires_invariance_certificate():
    V = LyapunovFn.quadratic(np.eye(2), 0.5, 0.25)
    sys = make_linear(0.5)
    t = ContractionTask(sys, identity_metric(), V, rho_c=0.6, eps=0.1)
    with pytest.raises(CertificateError, match="missing"):
        verify_contraction(t, None)
    cert = invariance_certificate(sys, V, verify_forward_invariance(sys, V))
    assert verify_contraction(t, cert).status == VERIFIED
    with pytest.raises(CertificateError):
        verify_contraction(t.with_level(0.9), cert)
    other = invariance_certificate(make_linear(0.4), V,
                                   verify_forward_invariance(make_linear(0.4), V))
    with pytest.raises(CertificateError):
        verify_contraction(t, other)


def test_identity_map_falsified():
    sys = make_linear(1.0)
    V = LyapunovFn.quadratic(np.eye(2), 0.5, 0.25)
    t = ContractionTask(sys, identity_metric(), V, rho_c=0.9, eps=0.05)
    res = verify(contraction_spec(t))
    assert res.status == FALSIFIED
    assert res.witness is not None


def test_max_levelset_semantics():
    def ok(r):
        return VerifyResult(VERIFIED, None, {})

    def upto(r):
        return VerifyResult(VERIFIED if r <= 0.5 else FALSIFIED, None, {})

    assert max_levelset(ok, 0.0, 1.0, 0.01)[0] == 1.0
    rho, _, _ = max_levelset(upto, 0.0, 1.0, 0.01)
    assert 0.49 <= rho <= 0.5
    rho, _, _ = max_levelset(upto, 0.7, 1.0, 0.01)
    assert rho is None


def test_unknown_on_tiny_budget():
    sys = make_vdp()
    V = LyapunovFn.quadratic(np.eye(2), 0.5, 0.01)
    t = ContractionTask(sys, constant_metric_from(np.eye(2), 0.5), V, rho_c=0.99)
    res = verify(contraction_spec(t), Budget(max_boxes=64, batch=16))
    assert res.status in (UNKNOWN, FALSIFIED)
    if res.status == UNKNOWN:
        assert len(res.undischarged_lo) > 0
        assert res.smallest_undischarged() is not None
        assert res.to_json()["undischarged"]["count"] == len(res.undischarged_lo)


def test_determinism_single_thread():
    V = LyapunovFn.quadratic(np.eye(2), 0.3, 0.01)
    t = ContractionTask(make_vdp(), constant_metric_from(np.eye(2), 0.5), V, rho_c=0.99)
    spec = contraction_spec(t)
    a = verify(spec, Budget(max_boxes=3000, batch=64))
    b = verify(spec, Budget(max_boxes=3000, batch=64))
    assert a.status == b.status
    assert {k: v for k, v in a.stats.items() if k != "wall_time"} == \
        {k: v for k, v in b.stats.items() if k != "wall_time"}
    assert np.array_equal(a.undischarged_lo, b.undischarged_lo)


def test_threads_agree_on_status():
    for task in (linear_task(0.5, 0.6), linear_task(2.0, 0.9)):
        spec = contraction_spec(task)
        one = verify(spec, Budget(threads=1, batch=64))
        many = verify(spec, Budget(threads=3, batch=64))
        assert one.status == many.status


def test_verified_linear_survives_sampling(rng):
    t = linear_task(0.5, 0.6)
    assert verify(contraction_spec(t)).status == VERIFIED
    x = rng.uniform(-1, 1, (100_000, 2))
    d = rng.uniform(-0.1, 0.1, (100_000, 2))
    assert np.all(g_value(t, x, d) <= 0)
