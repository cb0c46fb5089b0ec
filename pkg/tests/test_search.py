import logging

import numpy as np
import pytest

from latentatt import autodiff as ad
from latentatt.autodiff import Tensor
from latentatt.errors import ConfigError, InfeasibleError
from latentatt.nnet import Model
from latentatt.scoring import sequence_scores, teacher_forced
from latentatt.search import (
    Beam,
    DecodeConfig,
    decode,
    default_max_length,
    expand_time,
    force_align_batch,
    forced_align,
    score_hypothesis,
)

from conftest import tiny_config, tiny_model
from oracles import best_alignment, best_decode, monotone_alignments, random_instance


class FixedEnergies(Model):
    """Model whose attention energies are a fixed vector for every query."""

    def __init__(self, config, energies):
        super().__init__(config)
        self.fixed = np.asarray(energies, dtype=float)

    def energies(self, enc, rows, s, feedback, prefix="att"):
        return Tensor(np.tile(self.fixed, (len(rows), 1)))


def _fixed(probs, variant="hard"):
    model = FixedEnergies(tiny_config(variant), np.log(probs))
    enc = model.encode([np.zeros((len(probs), 3))])
    return model, enc


def test_decode_config_validation():
    with pytest.raises(ConfigError):
        DecodeConfig(beam_size_y=0)
    with pytest.raises(ConfigError):
        DecodeConfig(expand=True, expand_t=0)
    with pytest.raises(ConfigError):
        DecodeConfig(p_t_exponent=0.0)
    with pytest.raises(ConfigError):
        DecodeConfig(temperature=-1.0)
    with pytest.raises(ConfigError):
        DecodeConfig(max_step="lots")
    d = DecodeConfig()
    assert (d.beam_size_y, d.beam_size_t, d.expand, d.p_t_exponent, d.temperature) == (12, 48, True, 1.0, 1.0)
    assert d.beam_size_t == d.beam_size_y * d.expand_t


def test_global_prune_keeps_overall_top_k():
    model, enc = _fixed([0.5, 0.3, 0.2])
    beam = Beam(model.initial_state(enc, [0]), np.zeros(1), [()], [()])
    tx = expand_time(model, enc, beam, DecodeConfig(expand=False), beam_size=2)
    assert sorted(tx.t.tolist()) == [1, 2]
    np.testing.assert_allclose(tx.score, np.log([0.5, 0.3]))


def test_global_and_expand_pruning_differ():
    model, enc = _fixed([0.5, 0.3, 0.2])
    beam = Beam(model.initial_state(enc, [0, 0]), np.array([0.0, -10.0]), [(0,), (1,)], [(), ()])
    g = expand_time(model, enc, beam, DecodeConfig(expand=False), beam_size=2)
    e = expand_time(model, enc, beam, DecodeConfig(), per_parent=1)
    assert g.parent.tolist() == [0, 0] and g.t.tolist() == [1, 2]
    assert e.parent.tolist() == [0, 1] and e.t.tolist() == [1, 1]
    # enumeration: global top-2 over all six (parent, t) children
    cands = sorted((-(s + np.log(p)), par, t) for par, s in enumerate([0.0, -10.0])
                   for t, p in enumerate([0.5, 0.3, 0.2], start=1))
    assert [(c[1], c[2]) for c in cands[:2]] == list(zip(g.parent.tolist(), g.t.tolist()))


def test_expand_with_one_position_is_deterministic_argmax():
    model, enc = _fixed([0.2, 0.5, 0.3])
    beam = Beam(model.initial_state(enc, [0, 0, 0]), np.array([0.0, -1.0, -2.0]), [(0,), (1,), (0, 1)],
                [(), (), ()])
    tx = expand_time(model, enc, beam, DecodeConfig(), per_parent=1)
    assert tx.parent.tolist() == [0, 1, 2] and tx.t.tolist() == [2, 2, 2]


def test_time_tie_break_prefers_smaller_frame():
    model, enc = _fixed([0.25, 0.25, 0.25, 0.25])
    beam = Beam(model.initial_state(enc, [0]), np.zeros(1), [()], [()])
    tx = expand_time(model, enc, beam, DecodeConfig(expand=False), beam_size=2)
    assert tx.t.tolist() == [1, 2]


def test_single_label_vocabulary_chooses_label_or_eos(rng):
    model = tiny_model("hard", vocab=1, seed=3)
    res = decode(model, rng.normal(size=(5, 3)), DecodeConfig(beam_size_y=50, expand_t=5))
    assert set(res.labels) <= {0}
    assert len(res.alignment) == len(res.labels) + 1


def test_uniform_label_model_orders_by_prior_and_tie_break(rng):
    model = tiny_model("global", seed=1)
    model.params["out.w"].data[...] = 0.0
    model.params["out.b"].data[...] = 0.0
    res = decode(model, rng.normal(size=(4, 3)), DecodeConfig(beam_size_y=8, nbest=3))
    # every label costs log(1/3): the shortest hypothesis wins, and among equal
    # scores the smaller label history comes first
    assert res.labels == [] and res.score == pytest.approx(np.log(1 / 3))
    assert [h.labels for h in res.nbest[1:]] == [(0, 2), (1, 2)]


def test_baseline_decode_has_no_alignment(rng):
    res = decode(tiny_model("global", seed=2), rng.normal(size=(6, 3)))
    assert res.alignment == []
    assert res.finished


@pytest.mark.parametrize("variant", ["global", "hard", "local", "segmental"])
def test_decode_score_matches_teacher_forced_rescoring(variant, rng):
    for seed in range(5):
        model = tiny_model(variant, seed=seed, scale=1.5)
        x = rng.normal(size=(int(rng.integers(3, 9)), 3))
        for cfg in (DecodeConfig(), DecodeConfig(p_t_exponent=0.6, temperature=1.7, expand=False, beam_size_t=5)):
            res = decode(model, x, cfg)
            y = res.labels + [model.eos] if res.finished else res.labels
            again = score_hypothesis(model, x, y, res.alignment or None, cfg.p_t_exponent, cfg.temperature)
            assert abs(again - res.score) < 1e-9


def test_score_hypothesis_equals_forced_align_score_with_unit_scale(rng):
    model = tiny_model("hard", seed=4, scale=1.5)
    x = rng.normal(size=(6, 3))
    y = [0, 1, model.eos]
    al, score = forced_align(model, x, y, recombine=False)
    assert abs(score_hypothesis(model, x, y, al) - score) < 1e-12


def test_decode_is_deterministic(rng):
    model = tiny_model("local", seed=6, scale=2.0)
    x = rng.normal(size=(7, 3))
    a = decode(model, x, DecodeConfig(nbest=4))
    b = decode(model, x, DecodeConfig(nbest=4))
    assert a == b


@pytest.mark.parametrize("variant", ["hard", "local", "segmental"])
def test_smaller_beams_never_beat_the_optimum(variant, rng):
    for seed in range(6):
        model = tiny_model(variant, seed=seed, scale=2.0)
        x, _ = random_instance(rng, model, 4, 2, min_frames=2)
        best = best_decode(model, x, 3)
        for cfg in (DecodeConfig(expand=False, beam_size_t=48, max_length=3),
                    DecodeConfig(expand=False, beam_size_t=12, max_length=3),
                    DecodeConfig(beam_size_y=2, expand_t=1, max_length=3)):
            res = decode(model, x, cfg)
            if res.finished:
                assert res.score <= best[0] + 1e-12


@pytest.mark.parametrize("mono", ["strict", "weak"])
def test_decoded_positions_respect_monotonicity_and_step(mono, rng):
    model = tiny_model("local", seed=2, scale=2.0, monotonicity=mono, max_step=2)
    for _ in range(10):
        res = decode(model, rng.normal(size=(int(rng.integers(1, 12)), 3)), DecodeConfig(beam_size_y=4))
        prev = 0
        for t in res.alignment:
            assert (t > prev if mono == "strict" else t >= prev) and t - prev <= 2
            prev = t


def test_decode_step_cap_override(rng):
    model = tiny_model("hard", seed=2, scale=2.0)
    x = rng.normal(size=(10, 3))
    res = decode(model, x, DecodeConfig(max_step=1))
    assert res.alignment == list(range(1, len(res.alignment) + 1))
    assert DecodeConfig(max_step="unlimited").model_for(model.with_max_step(2)).variant.max_step is None
    assert DecodeConfig().model_for(model.with_max_step(2)).variant.max_step == 2


def test_max_length_guard_for_weak_monotonicity(rng):
    model = tiny_model("local", seed=0)
    model.params["out.b"].data[model.eos] = -50.0  # EOS practically never wins
    x = rng.normal(size=(4, 3))
    assert default_max_length(model, 4) == 6
    res = decode(model, x, DecodeConfig(beam_size_y=2, expand_t=2))
    assert not res.finished and len(res.labels) == 6


def test_unfinished_strict_decode_warns(rng, caplog):
    model = tiny_model("hard", seed=0)
    model.params["out.b"].data[model.eos] = -50.0
    with caplog.at_level(logging.WARNING):
        res = decode(model, rng.normal(size=(3, 3)), DecodeConfig(beam_size_y=2))
    assert not res.finished and len(res.alignment) == len(res.labels)
    assert all(a < b for a, b in zip(res.alignment, res.alignment[1:]))
    assert "no hypothesis finished" in caplog.text


def test_recombination_in_decode_is_available(rng):
    model = tiny_model("hard", seed=5, scale=2.0)
    x = rng.normal(size=(6, 3))
    best = best_decode(model, x, 3)
    res = decode(model, x, DecodeConfig(recombine=True, max_length=3))
    assert res.finished and res.score <= best[0] + 1e-12


# -- forced alignment -----------------------------------------------------------


def test_forced_align_single_feasible_path_weak():
    model = tiny_model("local", seed=1)
    x = np.ones((1, 3))
    al, score = forced_align(model, x, [0, model.eos])
    assert al == [1, 1]
    assert score == pytest.approx(score_hypothesis(model, x, [0, model.eos], [1, 1]), abs=1e-12)


def test_forced_align_infeasible_strict():
    model = tiny_model("hard", seed=1)
    with pytest.raises(InfeasibleError):
        forced_align(model, np.ones((2, 3)), [0, 1, model.eos])


def test_forced_align_needs_latent_model():
    model = tiny_model("global")
    with pytest.raises(ConfigError):
        forced_align(model, np.ones((2, 3)), [0, model.eos])


def test_forced_align_uniform_model_returns_smallest_alignment(rng):
    # zero energies and zero readout: with the label scale at 1 and the position
    # term switched off every alignment scores the same, so the tie-break decides
    model = tiny_model("hard", seed=2)
    for name in ("att.v", "out.w", "out.b"):
        model.params[name].data[...] = 0.0
    x = rng.normal(size=(6, 3))
    y = [0, 1, model.eos]
    enc = model.encode([x])

    def label_score(t):
        return float(sequence_scores(teacher_forced(model, enc, [y], [list(t)]), [y], latent_scale=0.0)[0])

    scores = {t: label_score(t) for t in monotone_alignments(3, 6)}
    assert len({round(s, 12) for s in scores.values()}) == 1
    for recombine in (False, True):
        al, _ = forced_align(model, x, y, scale=0.0, recombine=recombine)
        assert al == [1, 2, 3]


def test_uniform_energies_do_not_give_equal_alignment_scores(rng):
    # with the position term on, renormalising over shrinking supports makes
    # p(t) depend on the path even for uniform energies
    model = tiny_model("hard", seed=2)
    for name in ("att.v", "out.w", "out.b"):
        model.params[name].data[...] = 0.0
    x = rng.normal(size=(6, 3))
    y = [0, model.eos]
    scores = {t: score_hypothesis(model, x, y, t) for t in monotone_alignments(2, 6)}
    assert len({round(s, 12) for s in scores.values()}) > 1
    al, score = forced_align(model, x, y, recombine=False)
    assert score == pytest.approx(max(scores.values()), abs=1e-12)


def test_batched_forced_alignment_matches_single(rng):
    model = tiny_model("segmental", seed=3, scale=2.0)
    xs = [rng.normal(size=(T, 3)) for T in (4, 7, 5)]
    ys = [[0, model.eos], [1, 0, 1, model.eos], [1, 1, model.eos]]
    enc = model.encode(xs)
    batch = force_align_batch(model, enc, ys, recombine=False)
    for x, y, (al, sc) in zip(xs, ys, batch):
        al1, sc1 = forced_align(model, x, y, recombine=False)
        assert al == al1 and abs(sc - sc1) < 1e-12


@pytest.mark.parametrize("variant", ["hard", "segmental"])
def test_forced_align_beam_and_recombination_bounded_by_optimum(variant, rng):
    for seed in range(8):
        model = tiny_model(variant, seed=seed, scale=2.0)
        x, y = random_instance(rng, model, 6, 4, min_frames=2)
        best, _ = best_alignment(model, x, y)
        for kw in ({"recombine": True}, {"beam_size": 2, "recombine": False}, {"beam_size": 1}):
            _, sc = forced_align(model, x, y, **kw)
            assert sc <= best + 1e-12


def test_teacher_forcing_rejects_bad_positions(rng):
    model = tiny_model("hard", seed=0)
    x = rng.normal(size=(5, 3))
    with pytest.raises(InfeasibleError):
        score_hypothesis(model, x, [0, model.eos], [3, 3])
    with pytest.raises(InfeasibleError):
        score_hypothesis(model, x, [0, model.eos], [2, 9])
    with pytest.raises(InfeasibleError):
        score_hypothesis(model, x, [0, model.eos], [2])
