"""Context-vector mechanisms and the monotone latent-position distribution.

Frame positions in this module are 1-based, with ``t_prev = 0`` standing for
the start of the sequence. Batched helpers take numpy integer arrays with one
entry per hypothesis row and return boolean masks over ``T'`` frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import BoundsError, ConfigError, EmptySupportError

GLOBAL = "global"
HARD = "hard"
LOCAL = "local"
SEGMENTAL = "segmental"
KINDS = (GLOBAL, HARD, LOCAL, SEGMENTAL)


@dataclass(frozen=True)
class Variant:
    kind: str = HARD
    strict: bool = True
    max_step: int | None = None
    window_left: int = 0
    window_right: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown attention variant {self.kind!r}")
        if self.max_step is not None and self.max_step < 1:
            raise ConfigError("max_step must be >= 1 or None")
        if self.window_left < 0 or self.window_right < 0:
            raise ConfigError("window sizes must be non-negative")
        if self.kind == SEGMENTAL and not self.strict:
            raise ConfigError("segmental attention needs strict monotonicity")

    @property
    def latent(self):
        return self.kind != GLOBAL

    @classmethod
    def make(cls, kind, monotonicity=None, max_step=None, window_left=2, window_right=2):
        """Build a variant applying the per-kind monotonicity default."""
        if monotonicity is None:
            strict = kind != LOCAL
        else:
            if monotonicity not in ("strict", "weak"):
                raise ConfigError(f"monotonicity must be 'strict' or 'weak', got {monotonicity!r}")
            strict = monotonicity == "strict"
        if kind != LOCAL:
            window_left = window_right = 0
        return cls(kind, strict, max_step, window_left, window_right)


@dataclass
class LatentDistribution:
    probs: np.ndarray
    lo: int
    hi: int


def support_bounds(t_prev, lengths, variant):
    """Inclusive admissible ``[lo, hi]`` for the next position, per row."""
    t_prev = np.asarray(t_prev, dtype=int)
    lengths = np.asarray(lengths, dtype=int)
    if variant.strict:
        lo = t_prev + 1
    else:
        lo = np.maximum(t_prev, 1)
    hi = lengths.copy() if np.ndim(lengths) else np.asarray(lengths)
    if variant.max_step is not None:
        hi = np.minimum(hi, t_prev + variant.max_step)
    return lo, hi


def support_mask(t_prev, lengths, variant, num_frames):
    lo, hi = support_bounds(t_prev, lengths, variant)
    pos = np.arange(1, num_frames + 1)
    return (pos[None, :] >= np.atleast_1d(lo)[:, None]) & (pos[None, :] <= np.atleast_1d(hi)[:, None])


def latent_distribution(energies, t_prev, variant, temperature=1.0, length=None):
    """p(t_i = t | ...) for one hypothesis as masked, renormalised attention weights.

    ``t_prev`` is the previous position or 0 at the first step. Raises
    :class:`EmptySupportError` when no admissible frame remains.
    """
    energies = ad._wrap(energies)
    T = energies.shape[-1]
    length = T if length is None else length
    if not 0 <= t_prev <= length:
        raise BoundsError(f"t_prev={t_prev} outside [0, {length}]")
    lo, hi = support_bounds(t_prev, length, variant)
    lo, hi = int(lo), int(hi)
    if lo > hi:
        raise EmptySupportError(f"no admissible position after t_prev={t_prev} (T'={length})")
    mask = support_mask([t_prev], [length], variant, T)[0]
    probs = ad.masked_softmax(energies, mask, temperature)
    return LatentDistribution(probs.data, lo, hi)


def window_mask(t, lengths, variant, num_frames):
    """Frames feeding the context for chosen position(s) ``t``.

    Hard: ``{t}``. Local: ``[t - D_l, t + D_r]`` clipped to the sequence.
    Segmental needs ``t_prev`` and is handled by :func:`segment_mask`.
    """
    t = np.atleast_1d(np.asarray(t, dtype=int))
    lengths = np.broadcast_to(np.asarray(lengths, dtype=int), t.shape)
    pos = np.arange(1, num_frames + 1)[None, :]
    lo = np.maximum(t - variant.window_left, 1)[:, None]
    hi = np.minimum(t + variant.window_right, lengths)[:, None]
    return (pos >= lo) & (pos <= hi)


def segment_mask(t_prev, t, num_frames):
    t_prev = np.atleast_1d(np.asarray(t_prev, dtype=int))
    t = np.atleast_1d(np.asarray(t, dtype=int))
    pos = np.arange(1, num_frames + 1)[None, :]
    return (pos > t_prev[:, None]) & (pos <= t[:, None])


def context_global(weights, h):
    """Convex combination of encoder rows, ``sum_t weights[t] * h[t]``."""
    return ad.weighted_sum(weights, h)


def context_windowed(t, variant, energies, h, t_prev=0, segment_energies=None):
    """Context for one hypothesis given its chosen position ``t`` (1-based).

    ``energies`` are the shared attention energies (used by Local);
    ``segment_energies`` come from the separate segment MLP (Segmental).
    """
    h = ad._wrap(h)
    T = h.shape[0]
    if not 1 <= t <= T:
        raise BoundsError(f"position {t} outside [1, {T}]")
    if variant.kind == HARD:
        return ad.gather_row(h, t - 1)
    if variant.kind == LOCAL:
        mask = window_mask([t], [T], variant, T)[0]
        return ad.weighted_sum(ad.masked_softmax(energies, mask), h)
    if variant.kind == SEGMENTAL:
        if segment_energies is None:
            raise ConfigError("segmental context needs segment energies")
        mask = segment_mask([t_prev], [t], T)[0]
        return ad.weighted_sum(ad.masked_softmax(segment_energies, mask), h)
    raise ConfigError("context_windowed does not apply to global soft attention")


def feedback_increment(variant, num_frames, weights=None, t=None, t_prev=None):
    """What a step adds to the accumulated-attention feedback, per row.

    Global soft attention adds its weights; Hard and Local add a one-hot at
    ``t``; Segmental spreads unit mass uniformly over ``[t_prev + 1, t]``.
    """
    if variant.kind == GLOBAL:
        return weights
    t = np.atleast_1d(np.asarray(t, dtype=int))
    pos = np.arange(1, num_frames + 1)[None, :]
    if variant.kind in (HARD, LOCAL):
        return (pos == t[:, None]).astype(np.float64)
    seg = segment_mask(t_prev, t, num_frames).astype(np.float64)
    return seg / seg.sum(axis=1, keepdims=True)


def update_weight_feedback(feedback, variant, weights=None, t=None, t_prev=None):
    """Return ``feedback`` plus this step's increment (see :func:`feedback_increment`)."""
    feedback = ad._wrap(feedback)
    T = feedback.shape[-1]
    inc = feedback_increment(variant, T, weights=weights, t=t, t_prev=t_prev)
    if variant.kind != GLOBAL and feedback.ndim == 1:
        inc = inc[0]
    return ad.add(feedback, inc)
