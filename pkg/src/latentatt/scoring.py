"""Teacher-forced evaluation of label and position log-probabilities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attention as att
from . import autodiff as ad
from .errors import InfeasibleError


@dataclass
class StepOutput:
    label_logp: ad.Tensor  # [B, V+1]
    latent_logp: ad.Tensor | None  # [B], at the given positions
    active: np.ndarray  # [B] bool
    weights: np.ndarray  # [B, T'] weights that formed the context
    latent_probs: np.ndarray | None  # [B, T'] p(t_i | ...)


def teacher_forced(model, enc, targets, alignments=None, temperature=1.0):
    """Run the decoder on ground-truth labels (and positions for latent models).

    ``targets[b]`` includes the final EOS; ``alignments[b]`` has one 1-based
    position per target. Returns one :class:`StepOutput` per label step.
    """
    v = model.variant
    B = len(targets)
    lens = np.array([len(y) for y in targets])
    L = int(lens.max())
    rows = np.arange(B)
    if v.latent:
        if alignments is None:
            raise InfeasibleError("latent model needs alignments for teacher forcing")
        for y, t in zip(targets, alignments):
            if len(y) != len(t):
                raise InfeasibleError("alignment length differs from label length")
    state = model.initial_state(enc, rows)
    steps = []
    Tp = enc.num_frames
    for i in range(L):
        active = i < lens
        y = np.array([tg[i] if i < len(tg) else model.eos for tg in targets])
        s, cell = model.query(state)
        e = model.energies(enc, rows, s, state.feedback)
        if v.latent:
            t_prev = np.where(active, state.t_prev, 0)
            t = np.array([al[i] if i < len(al) else 1 for al in alignments])
            mask = model.support(enc, rows, t_prev)
            if np.any(t < 1) or np.any(t > Tp) or not np.all(mask[rows, np.clip(t, 1, Tp) - 1]):
                bad = int(np.flatnonzero(~mask[rows, np.clip(t, 1, Tp) - 1] | (t < 1) | (t > Tp))[0])
                raise InfeasibleError(
                    f"position {t[bad]} at step {i + 1} violates monotonicity after {t_prev[bad]}"
                )
            logp_t = ad.masked_log_softmax(e, mask, temperature)
            latent_logp = ad.take(logp_t, (rows, t - 1))
            seg_e = model.energies(enc, rows, s, state.feedback, prefix="seg") if v.kind == att.SEGMENTAL else None
            c = model.context(enc, rows, t, t_prev, energies=e, seg_energies=seg_e)
            inc = model.feedback_increment(enc, t, t_prev, None)
            weights = _context_weights(model, enc, rows, t, t_prev, e, seg_e)
            probs = np.exp(logp_t.data)
        else:
            w = model.soft_weights(enc, rows, e)
            c = model.context(enc, rows, None, None, weights=w)
            inc = w
            t = state.t_prev
            latent_logp = None
            weights = w.data
            probs = None
        logp = ad.log_softmax(model.readout(s, c))
        steps.append(StepOutput(logp, latent_logp, active, weights, probs))
        state = model.advance(state, s, cell, c, y, t, inc)
    return steps


def _context_weights(model, enc, rows, t, t_prev, e, seg_e):
    v = model.variant
    Tp = enc.num_frames
    if v.kind == att.HARD:
        return att.window_mask(t, enc.lengths[rows], v, Tp).astype(float)
    if v.kind == att.LOCAL:
        mask = att.window_mask(t, enc.lengths[rows], v, Tp)
        return ad.masked_softmax(e.data, mask).data
    mask = att.segment_mask(t_prev, t, Tp)
    return ad.masked_softmax(seg_e.data, mask).data


def sequence_scores(steps, targets, label_scale=1.0, latent_scale=1.0):
    """Per-utterance ``sum_i log p(y_i) + latent_scale * log p(t_i)`` as floats."""
    # accumulation order matches the beam search: position term, then label term
    B = len(targets)
    total = np.zeros(B)
    for i, st in enumerate(steps):
        y = np.array([tg[i] if i < len(tg) else 0 for tg in targets])
        if st.latent_logp is not None:
            total = np.where(st.active, total + latent_scale * st.latent_logp.data, total)
        lp = st.label_logp.data[np.arange(B), y] * label_scale
        total = np.where(st.active, total + lp, total)
    return total
