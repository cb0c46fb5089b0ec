"""Brute-force reference searches used by the search and acceptance tests."""

import itertools

import numpy as np

from latentatt.search import score_hypothesis


def monotone_alignments(n, T, strict=True, max_step=None):
    """Every admissible position sequence of length ``n`` over frames 1..T, t_0 = 0."""

    def rec(prefix):
        if len(prefix) == n:
            yield tuple(prefix)
            return
        prev = prefix[-1] if prefix else 0
        lo = prev + 1 if strict else max(prev, 1)
        hi = T if max_step is None else min(T, prev + max_step)
        for t in range(lo, hi + 1):
            yield from rec(prefix + [t])

    yield from rec([])


def _key(score, t, y):
    return (-score, tuple(t), tuple(y))


def best_alignment(model, x, labels, scale=1.0, enc=None):
    """Exhaustive ``argmax_t`` of ``sum log p(y|...) + scale * log p(t|...)`` with tie-break."""
    enc = enc if enc is not None else model.encode([x])
    T = int(enc.lengths[0])
    v = model.variant
    best = None
    for t in monotone_alignments(len(labels), T, v.strict, v.max_step):
        sc = score_hypothesis(model, x, labels, t, p_t_exponent=scale, enc=enc)
        if best is None or _key(sc, t, labels) < _key(*best, labels):
            best = (sc, t)
    return best


def best_decode(model, x, max_len, alpha=1.0, temperature=1.0, enc=None):
    """Exhaustive best finished ``(score, t, y)`` with at most ``max_len`` steps incl. EOS."""
    enc = enc if enc is not None else model.encode([x])
    T = int(enc.lengths[0])
    v = model.variant
    best = None
    for L in range(1, max_len + 1):
        for body in itertools.product(range(model.eos), repeat=L - 1):
            y = list(body) + [model.eos]
            if v.latent:
                aligns = monotone_alignments(L, T, v.strict, v.max_step)
            else:
                aligns = [()]
            for t in aligns:
                sc = score_hypothesis(model, x, y, t if v.latent else None, p_t_exponent=alpha,
                                      temperature=temperature, enc=enc)
                if best is None or _key(sc, t, y) < _key(*best):
                    best = (sc, tuple(t), tuple(y))
    return best


def random_instance(rng, model, max_frames, max_labels, min_frames=1):
    """Random input with ``T' <= max_frames`` and a label sequence (with EOS) that fits it."""
    P = model.config.encoder.total_pool
    Tp = int(rng.integers(min_frames, max_frames + 1))
    T = int(rng.integers((Tp - 1) * P + 1, Tp * P + 1))
    x = rng.normal(size=(T, model.config.feature_dim))
    cap = max_labels if not model.variant.strict else min(max_labels, Tp - 1)
    n = int(rng.integers(1, cap + 1)) if cap >= 1 else 0
    y = [int(v) for v in rng.integers(0, model.eos, n)] + [model.eos]
    return x, y
