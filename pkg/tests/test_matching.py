import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from warpcell.gradcheck import DiffOp, finite_diff_check
from warpcell.matching import (AttentionParams, CorrespondenceHead, attention_logits, attention_pool,
                               attention_pool_vjp, attention_weights, avg_pool_spatial, correspondence_score,
                               correspondence_score_vjp, roi_pool, roi_pool_vjp, softmax)
from warpcell.tensor import ConvParams
from warpcell.tubelets import Box


# -- average pooling ---------------------------------------------------------

def test_avg_pool():
    np.testing.assert_array_equal(avg_pool_spatial(np.full((3, 4, 2), 3.0)), [3.0, 3.0])
    assert avg_pool_spatial(np.array([[0.0, 2.0], [4.0, 6.0]])[..., None])[0] == 3.0
    with pytest.raises(ValueError):
        avg_pool_spatial(np.zeros((0, 3, 1)))


def test_avg_pool_permutation_invariant():
    rng = np.random.default_rng(0)
    m = rng.standard_normal((5, 6, 3))
    perm = rng.permutation(m.reshape(-1, 3))
    np.testing.assert_allclose(avg_pool_spatial(perm.reshape(5, 6, 3)), avg_pool_spatial(m), atol=1e-14)


# -- RoI pooling -------------------------------------------------------------

def test_roi_identity_on_full_box():
    m = np.random.default_rng(1).standard_normal((7, 9, 3))
    assert np.abs(roi_pool(m, Box(0, 0, 1, 1), (7, 9)) - m).max() <= 1e-12


def test_roi_constant_map():
    out = roi_pool(np.full((10, 10, 2), 4.0), (0.1, 0.2, 0.9, 0.7), (7, 7))
    np.testing.assert_allclose(out, 4.0, atol=1e-14)


def test_roi_quadrant_means():
    m = np.random.default_rng(2).standard_normal((4, 4, 1))
    out = roi_pool(m, (0, 0, 1, 1), (2, 2))[..., 0]
    ref = np.array([[m[:2, :2].mean(), m[:2, 2:].mean()], [m[2:, :2].mean(), m[2:, 2:].mean()]])
    np.testing.assert_allclose(out, ref, atol=1e-14)


def test_roi_degenerate_box():
    with pytest.raises(ValueError, match="degenerate"):
        roi_pool(np.zeros((5, 5, 1)), (0.2, 0.2, 0.2, 0.6))
    with pytest.raises(ValueError):
        roi_pool(np.zeros((5, 5, 1)), (0.2, 0.2, 1.2, 0.6))
    with pytest.raises(ValueError):
        roi_pool(np.zeros((5, 5, 1)), (0, 0, 1, 1), (0, 3))


@pytest.mark.parametrize("box", [(0.13, 0.21, 0.82, 0.77), (0.0, 0.0, 1.0, 1.0), (0.31, 0.05, 0.58, 0.44)])
def test_roi_gradcheck(box):
    rng = np.random.default_rng(3)
    op = DiffOp("roi", lambda m: roi_pool(m, box), lambda g, m: (roi_pool_vjp(g, m, box),))
    assert finite_diff_check(op, [rng.standard_normal((12, 12, 3))]).max_rel_error <= 1e-5


# -- attention ---------------------------------------------------------------

def _attention_oracle(fq, fp, p):
    """Hand-rolled loop version of the attention pooling."""
    ar = fp.mean(axis=(0, 1))
    logits = []
    for f in fq:
        e = np.tanh(f.mean(axis=(0, 1)) @ p.W_q + ar @ p.W_r + p.b_p)
        logits.append(float(e @ p.w) + p.b_s)
    z = np.exp(np.array(logits) - max(logits))
    a = z / z.sum()
    out = np.zeros_like(fp)
    for aj, f in zip(a, fq):
        out += aj * f
    return a, out


def test_attention_single_and_identical():
    rng = np.random.default_rng(4)
    p = AttentionParams.init(rng, 8)
    assert p.W_q.shape == (8, 2)  # default D = C / 4
    f = rng.standard_normal((7, 7, 8))
    fp = rng.standard_normal((7, 7, 8))
    np.testing.assert_array_equal(attention_weights([f], fp, p), [1.0])
    np.testing.assert_array_equal(attention_pool([f], fp, p), f)
    np.testing.assert_allclose(attention_weights([f, f.copy()], fp, p), [0.5, 0.5], atol=1e-15)


def test_attention_matches_oracle():
    rng = np.random.default_rng(5)
    p = AttentionParams(rng.standard_normal((6, 3)), rng.standard_normal((6, 3)), rng.standard_normal(3),
                        rng.standard_normal(3), 0.4)
    fq = [rng.standard_normal((7, 7, 6)) for _ in range(3)]
    fp = rng.standard_normal((7, 7, 6))
    a, out = _attention_oracle(fq, fp, p)
    np.testing.assert_allclose(attention_weights(fq, fp, p), a, atol=1e-10)
    np.testing.assert_allclose(attention_pool(fq, fp, p), out, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**31 - 1), st.floats(-50, 50))
def test_attention_weight_properties(J, seed, offset):
    rng = np.random.default_rng(seed)
    p = AttentionParams.init(rng, 4)
    fq = [rng.standard_normal((7, 7, 4)) for _ in range(J)]
    fp = rng.standard_normal((7, 7, 4))
    a = attention_weights(fq, fp, p)
    assert abs(a.sum() - 1.0) <= 1e-12
    assert np.all(a > 0) and np.all(a <= 1)
    _, s = attention_logits(fq, fp, p)
    np.testing.assert_allclose(softmax(s + offset), a, atol=1e-12)
    out = attention_pool(fq, fp, p)
    stack = np.stack(fq)
    assert np.all(out >= stack.min(0) - 1e-12) and np.all(out <= stack.max(0) + 1e-12)


def test_attention_errors():
    rng = np.random.default_rng(6)
    p = AttentionParams.init(rng, 4)
    with pytest.raises(ValueError, match="at least one"):
        attention_pool([], np.zeros((7, 7, 4)), p)
    with pytest.raises(ValueError):
        attention_pool([np.zeros((7, 7, 3))], np.zeros((7, 7, 3)), p)
    with pytest.raises(ValueError):
        AttentionParams(np.zeros((4, 2)), np.zeros((4, 3)), np.zeros(2), np.zeros(2))


def test_attention_gradcheck():
    rng = np.random.default_rng(7)
    p = AttentionParams.init(rng, 8)

    def fwd(fq, fp, Wq, Wr, w, bp):
        return attention_pool(list(fq), fp, AttentionParams(Wq, Wr, w, bp, 0.3))

    def vjp(g, fq, fp, Wq, Wr, w, bp):
        dq, dp, gp = attention_pool_vjp(g, list(fq), fp, AttentionParams(Wq, Wr, w, bp, 0.3))
        return dq, dp, gp.W_q, gp.W_r, gp.w, gp.b_p
    pt = [rng.standard_normal((3, 7, 7, 8)), rng.standard_normal((7, 7, 8)), p.W_q, p.W_r, p.w,
          rng.standard_normal(2)]
    assert finite_diff_check(DiffOp("attention", fwd, vjp), pt).max_rel_error <= 1e-5
    # b_s shifts every logit equally, so its gradient vanishes
    _, _, gp = attention_pool_vjp(rng.standard_normal((7, 7, 8)), list(pt[0]), pt[1], p)
    assert abs(gp.b_s) <= 1e-12


# -- correspondence head -----------------------------------------------------

def test_zero_head_scores_half():
    rng = np.random.default_rng(8)
    a, b = rng.standard_normal((7, 7, 4)), rng.standard_normal((7, 7, 4))
    assert correspondence_score(a, b, CorrespondenceHead.zeros(4)) == 0.5


def test_score_deterministic_and_in_range():
    rng = np.random.default_rng(9)
    h = CorrespondenceHead.init(rng, 4)
    a, b = rng.standard_normal((7, 7, 4)), rng.standard_normal((7, 7, 4))
    s1 = correspondence_score(a, b, h)
    assert s1 == correspondence_score(a.copy(), b.copy(), h)
    assert 0 < s1 < 1


def test_score_shape_errors():
    h = CorrespondenceHead.zeros(4)
    with pytest.raises(ValueError):
        correspondence_score(np.zeros((7, 7, 4)), np.zeros((7, 6, 4)), h)
    with pytest.raises(ValueError):
        correspondence_score(np.zeros((7, 7, 3)), np.zeros((7, 7, 3)), h)
    with pytest.raises(ValueError):
        CorrespondenceHead(ConvParams.zeros(3, 3, 8, 4), np.zeros(3))


def test_score_gradcheck():
    rng = np.random.default_rng(10)
    h = CorrespondenceHead.init(rng, 4)

    def head(k, b, dw, db):
        return CorrespondenceHead(ConvParams(k, b), dw, float(db))

    def fwd(p, q, *hs):
        return np.array(correspondence_score(p, q, head(*hs)))

    def vjp(g, p, q, *hs):
        dp, dq, gh = correspondence_score_vjp(float(g), p, q, head(*hs))
        return dp, dq, gh.conv.kernel, gh.conv.bias, gh.dense_w, np.array(gh.dense_b)
    pt = [rng.standard_normal((7, 7, 4)), rng.standard_normal((7, 7, 4)), h.conv.kernel,
          rng.standard_normal(8) * 0.1, h.dense_w, np.array(0.2)]
    assert finite_diff_check(DiffOp("corr", fwd, vjp), pt).max_rel_error <= 1e-5
