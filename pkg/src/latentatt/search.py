"""Label-synchronous beam search, with joint (t, y) expansion for latent models.

At each step every active hypothesis first proposes positions ``t_i`` (scored
by ``alpha * log p~(t_i | ...)`` at the configured softmax temperature), which
are pruned either globally to ``K_t`` or per parent to ``K'_t``; the
survivors are then expanded over all labels and pruned to ``K_y``.
Hypotheses that emit EOS retire to a finished pool and stop expanding.

Ties are broken by higher score, then the lexicographically smaller position
history, then the smaller label history.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import attention as att
from . import autodiff as ad
from .errors import ConfigError, EmptyBeamError, EmptySupportError, InfeasibleError
from .scoring import sequence_scores, teacher_forced

log = logging.getLogger(__name__)

UNLIMITED = "unlimited"


@dataclass
class DecodeConfig:
    beam_size_y: int = 12
    beam_size_t: int = 48
    expand: bool = True
    expand_t: int = 4
    max_step: int | str | None = None  # None: the model's own cap
    p_t_exponent: float = 1.0
    temperature: float = 1.0
    max_length: int | None = None
    length_normalization: bool = False
    recombine: bool = False
    nbest: int = 1

    def __post_init__(self):
        if self.beam_size_y < 1 or self.beam_size_t < 1:
            raise ConfigError("beam sizes must be >= 1")
        if self.expand and self.expand_t < 1:
            raise ConfigError("expand_t must be >= 1")
        if self.p_t_exponent <= 0 or self.temperature <= 0:
            raise ConfigError("p_t_exponent and temperature must be positive")
        if isinstance(self.max_step, str) and self.max_step not in (UNLIMITED, "inf"):
            raise ConfigError(f"max_step must be an int, 'unlimited' or null, got {self.max_step!r}")

    def model_for(self, model):
        """The model with this config's step cap applied."""
        if self.max_step is None or not model.variant.latent:
            return model
        cap = None if isinstance(self.max_step, str) or self.max_step == 0 else int(self.max_step)
        return model.with_max_step(cap)


@dataclass
class Hypothesis:
    labels: tuple
    positions: tuple
    score: float
    finished: bool

    def output_labels(self, eos):
        return list(self.labels[:-1]) if self.finished and self.labels and self.labels[-1] == eos else list(self.labels)


@dataclass
class DecodeResult:
    labels: list
    alignment: list
    score: float
    finished: bool
    nbest: list = field(default_factory=list)


@dataclass
class Beam:
    """Active hypotheses; ``state.rows`` indexes the utterance in the encoder batch."""

    state: object
    score: np.ndarray
    ys: list
    ts: list

    def __len__(self):
        return len(self.score)

    def select(self, idx):
        idx = np.asarray(idx, dtype=int)
        return Beam(self.state.select(idx), self.score[idx], [self.ys[i] for i in idx], [self.ts[i] for i in idx])


@dataclass
class TimeExpansion:
    """Children ``(parent, t)`` of a time expansion with everything label expansion needs."""

    parent: np.ndarray
    t: np.ndarray
    score: np.ndarray
    s: ad.Tensor  # per parent
    cell: ad.Tensor
    energies: ad.Tensor
    seg_energies: ad.Tensor | None
    weights: ad.Tensor | None  # global soft attention only


def _ordered(score, *tie_keys):
    """Indices sorted by descending score, then ascending ``tie_keys``; stable otherwise."""
    keys = tuple(reversed(tie_keys)) + (-score,)
    return np.lexsort(keys)


def _dense_rank(seqs):
    """Rank of each tuple in lexicographic order; equal tuples share a rank."""
    ranks = {s: r for r, s in enumerate(sorted(set(seqs)))}
    return np.array([ranks[s] for s in seqs], dtype=int)


def _group_top(order, groups, k):
    """Keep at most ``k`` entries of each group from an already ordered index list."""
    if k is None:
        return order
    kept = []
    counts = {}
    for j in order:
        g = groups[j]
        c = counts.get(g, 0)
        if c < k:
            kept.append(j)
            counts[g] = c + 1
    return np.array(kept, dtype=int)


def expand_time(model, enc, beam, config, scale=None, temperature=None, beam_size=None,
                per_parent=None, recombine_keys=None, horizon=None):
    """Hypothesise positions ``t_i`` for every active hypothesis and prune.

    Pruning is grouped by utterance (``beam.state.rows``). With ``per_parent``
    set, each parent keeps its best ``per_parent`` positions (the expand
    variant); otherwise the best ``beam_size`` children overall survive.
    ``recombine_keys`` (one hashable per parent) enables recombination: among
    children sharing key and position only the best is kept. ``horizon``
    (one int per parent) drops children beyond that frame without changing
    p(t) itself; forced alignment uses it to skip dead-end positions.
    Raises :class:`EmptyBeamError` when no hypothesis has an admissible position.
    """
    scale = config.p_t_exponent if scale is None else scale
    temperature = config.temperature if temperature is None else temperature
    state = beam.state
    rows = state.rows
    s, cell = model.query(state)
    e = model.energies(enc, rows, s, state.feedback)
    v = model.variant
    seg_e = model.energies(enc, rows, s, state.feedback, prefix="seg") if v.kind == att.SEGMENTAL else None
    if not v.latent:
        w = model.soft_weights(enc, rows, e)
        n = len(beam)
        return TimeExpansion(np.arange(n), state.t_prev.copy(), beam.score.copy(), s, cell, e, seg_e, w)

    mask = model.support(enc, rows, state.t_prev)
    alive = mask.any(axis=1)
    if not alive.any():
        raise EmptyBeamError("no hypothesis has an admissible next position")
    logp = np.full(mask.shape, -np.inf)
    logp[alive] = ad.masked_log_softmax(e.data[alive], mask[alive], temperature).data
    # scale 0 (label-only alignment) must keep -inf outside the support
    cand = beam.score[:, None] + (scale * logp if scale else np.where(np.isfinite(logp), 0.0, -np.inf))
    keep = mask & alive[:, None]
    if horizon is not None:
        keep &= np.arange(1, mask.shape[1] + 1)[None, :] <= np.asarray(horizon)[:, None]
    parent, tidx = np.nonzero(keep)
    cscore = cand[parent, tidx]
    t = tidx + 1

    t_rank = _dense_rank(beam.ts)
    y_rank = _dense_rank(beam.ys)
    tie = (t_rank[parent], t, y_rank[parent])

    if recombine_keys is not None:
        order = _ordered(cscore, *tie)
        seen = set()
        keep = []
        for j in order:
            key = (rows[parent[j]], recombine_keys[parent[j]], t[j])
            if key not in seen:
                seen.add(key)
                keep.append(j)
        keep = np.array(sorted(keep), dtype=int)
        parent, t, cscore = parent[keep], t[keep], cscore[keep]
        tie = (t_rank[parent], t, y_rank[parent])

    order = _ordered(cscore, *tie)
    if per_parent is not None:
        order = _group_top(order, parent, per_parent)
    else:
        order = _group_top(order, rows[parent], beam_size)
    return TimeExpansion(parent[order], t[order], cscore[order], s, cell, e, seg_e, None)


def _children_context(model, enc, beam, tx):
    """Contexts and label log-probs for all children of a time expansion."""
    v = model.variant
    p = tx.parent
    rows = beam.state.rows[p]
    if v.latent:
        t_prev = beam.state.t_prev[p]
        e = ad.take(tx.energies, (p,)) if v.kind == att.LOCAL else None
        seg = ad.take(tx.seg_energies, (p,)) if v.kind == att.SEGMENTAL else None
        c = model.context(enc, rows, tx.t, t_prev, energies=e, seg_energies=seg)
        inc = model.feedback_increment(enc, tx.t, t_prev, None)
    else:
        w = ad.take(tx.weights, (p,))
        c = model.context(enc, rows, None, None, weights=w)
        inc = w
    s = ad.take(tx.s, (p,))
    cell = ad.take(tx.cell, (p,))
    logp = ad.log_softmax(model.readout(s, c)).data
    return s, cell, c, inc, logp


def expand_label(model, enc, beam, tx, config, beam_size=None):
    """Expand children over all labels and keep the best ``K_y`` per utterance.

    Returns ``(new_beam, finished)``; ``finished`` lists the hypotheses that
    emitted EOS among the kept ones.
    """
    K = config.beam_size_y if beam_size is None else beam_size
    s, cell, c, inc, logp = _children_context(model, enc, beam, tx)
    C, V1 = logp.shape
    total = tx.score[:, None] + logp
    child = np.repeat(np.arange(C), V1)
    label = np.tile(np.arange(V1), C)
    flat = total.reshape(-1)
    t_rank = _dense_rank(beam.ts)[tx.parent][child]
    y_rank = _dense_rank(beam.ys)[tx.parent][child]
    order = _ordered(flat, t_rank, tx.t[child], y_rank, label)
    groups = beam.state.rows[tx.parent][child]
    order = _group_top(order, groups, K)
    finished = []
    keep_child, keep_label = [], []
    for j in order:
        ch, y = child[j], label[j]
        par = tx.parent[ch]
        ys = beam.ys[par] + (int(y),)
        ts = beam.ts[par] + ((int(tx.t[ch]),) if model.variant.latent else ())
        if y == model.eos:
            finished.append((int(beam.state.rows[par]), Hypothesis(ys, ts, float(flat[j]), True)))
        else:
            keep_child.append(ch)
            keep_label.append(y)
    return _advance(model, beam, tx, s, cell, c, inc, np.array(keep_child, dtype=int),
                    np.array(keep_label, dtype=int), total), finished


def _advance(model, beam, tx, s, cell, c, inc, ch, labels, total):
    if len(ch) == 0:
        return None
    par = tx.parent[ch]
    sub = beam.state.select(par)
    idx = (ch,)
    new_state = model.advance(
        sub, ad.take(s, idx), ad.take(cell, idx), ad.take(c, idx), labels,
        tx.t[ch] if model.variant.latent else sub.t_prev, ad.take(inc, idx),
    )
    ys = [beam.ys[p] + (int(y),) for p, y in zip(par, labels)]
    ts = [beam.ts[p] + ((int(t),) if model.variant.latent else ()) for p, t in zip(par, tx.t[ch])]
    return Beam(new_state, total[ch, labels], ys, ts)


def default_max_length(model, num_frames):
    v = model.variant
    if v.latent and v.strict:
        return int(num_frames)
    return int(np.ceil(1.5 * num_frames))


def decode(model, x, config: DecodeConfig | None = None, enc=None):
    """Best ``(labels, alignment, score)`` for one utterance.

    ``x`` is a ``[T, F]`` feature matrix (ignored when ``enc`` is given).
    The alignment includes the EOS position for latent models and is empty
    for global soft attention.
    """
    config = config or DecodeConfig()
    model = config.model_for(model)
    if enc is None:
        enc = model.encode([x])
    Tp = int(enc.lengths[0])
    max_len = config.max_length or default_max_length(model, Tp)
    beam = Beam(model.initial_state(enc, [0]), np.zeros(1), [()], [()])
    finished = []
    for _ in range(max_len):
        try:
            tx = _time_step(model, enc, beam, config)
        except EmptyBeamError:
            # positions exhausted: same outcome as hitting max_len
            if not beam.ys[0]:
                raise
            break
        beam, done = expand_label(model, enc, beam, tx, config)
        finished.extend(h for _, h in done)
        if beam is None:
            break
    pool = finished
    warn = False
    if not pool:
        warn = True
        log.warning("no hypothesis finished within %d steps; returning best unfinished", max_len)
        pool = [Hypothesis(y, t, float(sc), False) for y, t, sc in zip(beam.ys, beam.ts, beam.score)]
    ranked = _rank(pool, config)
    best = ranked[0]
    return DecodeResult(
        labels=best.output_labels(model.eos),
        alignment=list(best.positions),
        score=best.score,
        finished=not warn,
        nbest=ranked[: max(1, config.nbest)],
    )


def _time_step(model, enc, beam, config):
    if not model.variant.latent:
        return expand_time(model, enc, beam, config)
    keys = [y for y in beam.ys] if config.recombine else None
    if config.expand:
        return expand_time(model, enc, beam, config, per_parent=config.expand_t, recombine_keys=keys)
    return expand_time(model, enc, beam, config, beam_size=config.beam_size_t, recombine_keys=keys)


def _rank(pool, config):
    def key(h):
        sc = h.score / max(1, len(h.labels)) if config.length_normalization else h.score
        return (-sc, h.positions, h.labels)

    return sorted(pool, key=key)


def score_hypothesis(model, x, labels, positions=None, p_t_exponent=1.0, temperature=1.0, enc=None):
    """Teacher-forced ``sum_i log p(y_i|...) + alpha * log p~(t_i|...)``.

    ``labels`` must include EOS when scoring a finished hypothesis; raises
    :class:`InfeasibleError` for non-monotone or out-of-range positions.
    """
    if enc is None:
        enc = model.encode([x])
    labels = list(labels)
    if model.variant.latent:
        if positions is None or len(positions) != len(labels):
            raise InfeasibleError("positions must match labels one to one")
        steps = teacher_forced(model, enc, [labels], [list(positions)], temperature=temperature)
    else:
        steps = teacher_forced(model, enc, [labels])
    return float(sequence_scores(steps, [labels], latent_scale=p_t_exponent)[0])


def force_align_batch(model, enc, targets, beam_size=None, scale=1.0, recombine=True):
    """Best positions for fixed label sequences, one search per utterance in ``enc``.

    Same expansion machinery as :func:`decode` with the label choice pinned
    to the ground truth. ``beam_size=None`` keeps every child; with
    ``recombine`` children ending at the same position keep only the best
    (exact whenever the model's future does not depend on earlier positions).
    Returns a list of ``(alignment, score)``; raises :class:`InfeasibleError`
    if some utterance has no monotone alignment.
    """
    if not model.variant.latent:
        raise ConfigError("forced alignment needs a latent attention variant")
    B = len(targets)
    lens = np.array([len(y) for y in targets])
    config = DecodeConfig(expand=False)  # scale is passed to expand_time directly; 0 is allowed here
    beam = Beam(model.initial_state(enc, np.arange(B)), np.zeros(B), [()] * B, [()] * B)
    results = [None] * B
    for i in range(int(lens.max())):
        horizon = None
        if model.variant.strict:
            # strict positions: leave one frame for each label still to come
            rows = beam.state.rows
            horizon = enc.lengths[rows] - (lens[rows] - 1 - i)
        try:
            tx = expand_time(
                model, enc, beam, config, scale=scale, temperature=1.0, beam_size=beam_size,
                recombine_keys=[0] * len(beam) if recombine else None, horizon=horizon,
            )
        except EmptyBeamError:
            tx = None
        if tx is not None and len(tx.parent) == 0:
            tx = None
        utts = set(beam.state.rows.tolist())
        alive = set() if tx is None else set(beam.state.rows[tx.parent].tolist())
        for u in utts - alive:
            raise InfeasibleError(f"utterance {u}: no monotone alignment for {lens[u]} labels")
        s, cell, c, inc, logp = _children_context(model, enc, beam, tx)
        rows = beam.state.rows[tx.parent]
        y = np.array([targets[r][i] for r in rows])
        total = tx.score + logp[np.arange(len(y)), y]
        done = lens[rows] == i + 1
        for u in np.unique(rows[done]):
            idx = np.flatnonzero(done & (rows == u))
            t_rank = _dense_rank([beam.ts[p] + (int(tt),) for p, tt in zip(tx.parent[idx], tx.t[idx])])
            best = idx[_ordered(total[idx], t_rank)[0]]
            results[u] = (list(beam.ts[tx.parent[best]]) + [int(tx.t[best])], float(total[best]))
        cont = np.flatnonzero(~done)
        if len(cont) == 0:
            break
        beam = _advance(model, beam, tx, s, cell, c, inc, cont, y[cont], _label_total(total, y))
    return results


def _label_total(total, y):
    out = np.full((len(total), int(y.max()) + 1), -np.inf)
    out[np.arange(len(total)), y] = total
    return out


def forced_align(model, x, labels, beam_size=None, scale=1.0, recombine=True, enc=None):
    """Best alignment and its score for one utterance; see :func:`force_align_batch`."""
    if enc is None:
        enc = model.encode([x])
    return force_align_batch(model, enc, [list(labels)], beam_size, scale, recombine)[0]
