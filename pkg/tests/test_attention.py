import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentatt import attention as att
from latentatt import autodiff as ad
from latentatt.autodiff import Tensor
from latentatt.errors import BoundsError, ConfigError, EmptySupportError
from latentatt.gradcheck import tape_grad

HARD = att.Variant.make("hard")
SEG = att.Variant.make("segmental")


def test_variant_defaults():
    assert att.Variant.make("hard").strict
    assert att.Variant.make("segmental").strict
    assert not att.Variant.make("local").strict
    assert not att.Variant.make("global").latent
    with pytest.raises(ConfigError):
        att.Variant.make("segmental", "weak")
    with pytest.raises(ConfigError):
        att.Variant.make("hard", max_step=0)
    with pytest.raises(ConfigError):
        att.Variant.make("hard", "sometimes")


def test_latent_distribution_examples():
    d = att.latent_distribution(np.zeros(4), 2, HARD)
    np.testing.assert_allclose(d.probs, [0, 0, 0.5, 0.5])
    assert (d.lo, d.hi) == (3, 4)
    d = att.latent_distribution(np.zeros(4), 2, att.Variant.make("hard", max_step=1))
    np.testing.assert_array_equal(d.probs, [0, 0, 1, 0])
    with pytest.raises(EmptySupportError):
        att.latent_distribution(np.zeros(4), 4, HARD)


def test_first_step_support_starts_at_frame_one():
    d = att.latent_distribution(np.zeros(5), 0, att.Variant.make("hard", max_step=3))
    assert (d.lo, d.hi) == (1, 3)
    d = att.latent_distribution(np.zeros(5), 0, att.Variant.make("local"))
    assert (d.lo, d.hi) == (1, 5)


def test_weak_support_includes_previous_frame():
    d = att.latent_distribution(np.zeros(4), 4, att.Variant.make("local"))
    np.testing.assert_array_equal(d.probs, [0, 0, 0, 1])


def test_t_prev_out_of_range():
    with pytest.raises(BoundsError):
        att.latent_distribution(np.zeros(4), 5, HARD)


def test_support_respects_true_length_inside_padding():
    d = att.latent_distribution(np.zeros(6), 1, HARD, length=3)
    np.testing.assert_allclose(d.probs, [0, 0.5, 0.5, 0, 0, 0])


@settings(max_examples=200, deadline=None)
@given(
    st.integers(1, 9),
    st.data(),
    st.sampled_from(["hard", "local", "segmental"]),
    st.booleans(),
    st.one_of(st.none(), st.integers(1, 5)),
    st.floats(0.1, 4.0),
)
def test_latent_distribution_invariants(T, data, kind, weak, step, temp):
    mono = "weak" if weak and kind != "segmental" else "strict"
    v = att.Variant.make(kind, mono, step)
    t_prev = data.draw(st.integers(0, T))
    e = np.array(data.draw(st.lists(st.floats(-30, 30), min_size=T, max_size=T)))
    lo = t_prev + 1 if v.strict else max(t_prev, 1)
    hi = T if step is None else min(T, t_prev + step)
    if lo > hi:
        with pytest.raises(EmptySupportError):
            att.latent_distribution(e, t_prev, v, temp)
        return
    d = att.latent_distribution(e, t_prev, v, temp)
    assert (d.lo, d.hi) == (lo, hi)
    pos = np.arange(1, T + 1)
    off = (pos < lo) | (pos > hi)
    assert np.all(d.probs >= 0) and np.all(d.probs[off] == 0)
    assert abs(d.probs.sum() - 1) < 1e-9
    # argmax invariant to temperature (smallest index on ties)
    ref = att.latent_distribution(e, t_prev, v, 1.0).probs
    assert np.argmax(d.probs) == np.argmax(ref)


def test_context_global_examples(rng):
    h = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(att.context_global(Tensor([0.0, 1.0, 0.0]), Tensor(h)).data, h[1])
    np.testing.assert_allclose(att.context_global(Tensor([0.5, 0.5]), Tensor(h[:2])).data, (h[0] + h[1]) / 2)
    w = rng.dirichlet(np.ones(3))
    direct = sum(w[t] * h[t] for t in range(3))
    np.testing.assert_allclose(att.context_global(Tensor(w), Tensor(h)).data, direct, rtol=0, atol=1e-15)


def test_hard_context_is_exact_row(rng):
    h = rng.normal(size=(5, 3))
    for t in range(1, 6):
        c = att.context_windowed(t, HARD, np.zeros(5), Tensor(h))
        assert np.array_equal(c.data - ad.gather_row(Tensor(h), t - 1).data, np.zeros(3))


def test_local_zero_window_equals_hard(rng):
    local0 = att.Variant.make("local", "strict", window_left=0, window_right=0)
    h = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    e = Tensor(rng.normal(size=5), requires_grad=True)
    w = rng.normal(size=3)
    for t in range(1, 6):
        a = att.context_windowed(t, local0, e, h)
        b = att.context_windowed(t, HARD, e, h)
        assert np.array_equal(a.data, b.data)
        ga = tape_grad(lambda: ad.reduce_sum(att.context_windowed(t, local0, e, h) * w), [h, e])
        gb = tape_grad(lambda: ad.reduce_sum(att.context_windowed(t, HARD, e, h) * w), [h, e])
        for x, y in zip(ga, gb):
            assert np.array_equal(x, y)


def test_local_window_clipped_and_renormalised(rng):
    v = att.Variant.make("local", window_left=2, window_right=2)
    e = rng.normal(size=6)
    h = rng.normal(size=(6, 2))
    c = att.context_windowed(1, v, Tensor(e), Tensor(h)).data
    w = np.exp(e[:3] - e[:3].max())
    w /= w.sum()
    np.testing.assert_allclose(c, w @ h[:3], rtol=0, atol=1e-15)


def test_wide_local_first_step_equals_global_over_support(rng):
    T = 5
    v = att.Variant.make("local", "weak", window_left=T, window_right=T)
    e = rng.normal(size=T)
    h = rng.normal(size=(T, 3))
    alpha = att.latent_distribution(e, 0, v).probs
    g = att.context_global(Tensor(alpha), Tensor(h)).data
    for t in range(1, T + 1):
        np.testing.assert_allclose(att.context_windowed(t, v, Tensor(e), Tensor(h)).data, g, rtol=0, atol=1e-14)


def test_segmental_uniform_segment(rng):
    h = rng.normal(size=(4, 3))
    c = att.context_windowed(3, SEG, np.zeros(4), Tensor(h), t_prev=1, segment_energies=np.zeros(4))
    np.testing.assert_allclose(c.data, (h[1] + h[2]) / 2, rtol=0, atol=1e-15)
    with pytest.raises(ConfigError):
        att.context_windowed(3, SEG, np.zeros(4), Tensor(h), t_prev=1)


def test_context_position_out_of_range(rng):
    with pytest.raises(BoundsError):
        att.context_windowed(0, HARD, np.zeros(3), Tensor(rng.normal(size=(3, 2))))


def test_weight_feedback_examples():
    fb = att.update_weight_feedback(np.zeros(3), HARD, t=2)
    np.testing.assert_array_equal(fb.data, [0, 1, 0])
    g = att.Variant.make("global")
    fb = np.zeros(3)
    for _ in range(2):
        fb = att.update_weight_feedback(fb, g, weights=np.array([0.5, 0.5, 0.0]))
    np.testing.assert_array_equal(np.asarray(fb.data), [1, 1, 0])
    fb = att.update_weight_feedback(np.zeros(3), SEG, t=3, t_prev=1)
    np.testing.assert_array_equal(fb.data, [0, 0.5, 0.5])


def test_argmax_chain_is_monotone(rng):
    for kind, mono, step in [("hard", "strict", None), ("hard", "strict", 2), ("local", "weak", 3)]:
        v = att.Variant.make(kind, mono, step)
        T = 12
        t_prev = 0
        for _ in range(6):
            try:
                d = att.latent_distribution(rng.normal(size=T), t_prev, v)
            except EmptySupportError:
                break
            t = int(np.argmax(d.probs)) + 1
            assert (t > t_prev) if v.strict else (t >= t_prev)
            assert step is None or t - t_prev <= step
            t_prev = t
