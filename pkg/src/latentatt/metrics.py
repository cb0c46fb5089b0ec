"""Label error rates and alignment step statistics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import InfeasibleError


def edit_distance(ref, hyp):
    """Minimal unit-cost ``(S, I, D)`` turning ``ref`` into ``hyp``.

    Among optimal alignments the one with most substitutions wins, then
    fewest insertions.
    """
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    # cost tuples compare (total, -subs, ins) so ties prefer substitutions
    INF = (n + m + 1, 0, 0)
    prev = [(j, 0, j, 0) for j in range(m + 1)]  # (total, S, I, D)
    for i in range(1, n + 1):
        cur = [(i, 0, 0, i)] + [None] * m
        for j in range(1, m + 1):
            d = prev[j]
            cands = [
                (d[0] + 1, d[1], d[2], d[3] + 1),
                (cur[j - 1][0] + 1, cur[j - 1][1], cur[j - 1][2] + 1, cur[j - 1][3]),
            ]
            s = prev[j - 1]
            same = ref[i - 1] == hyp[j - 1]
            cands.append((s[0] + (0 if same else 1), s[1] + (0 if same else 1), s[2], s[3]))
            cur[j] = min(cands, key=lambda c: (c[0], -c[1], c[2]))
        prev = cur
    _, S, I, D = prev[m]
    return S, I, D


def wer(refs, hyps):
    """Corpus-level error rate in percent plus ``(S, I, D, ref_len)``."""
    S = I = D = total = 0
    for r, h in zip(refs, hyps):
        s, i, d = edit_distance(r, h)
        S, I, D, total = S + s, I + i, D + d, total + len(r)
    rate = 100.0 * (S + I + D) / total if total else 0.0
    return rate, (S, I, D, total)


def step_stats(alignments, bins=None):
    """Mean, stddev, max and histogram of ``t_i - t_{i-1}`` with ``t_0 = 0``."""
    steps = []
    for al in alignments:
        prev = 0
        for t in al:
            steps.append(t - prev)
            prev = t
    if not steps:
        return {"mean": 0.0, "std": 0.0, "max": 0, "histogram": {}}
    arr = np.asarray(steps)
    values, counts = np.unique(arr, return_counts=True)
    return {
        "mean": float(arr.mean()),
        "std": float(arr.std()),
        "max": int(arr.max()),
        "histogram": {int(v): int(c) for v, c in zip(values, counts)},
    }


def frame_error_rate(model, records, align_beam=None, batch_size=32, recombine=True):
    """Teacher-forced label error rate in percent.

    For latent models the positions come from forced alignment under the
    current model. Returns ``(fer, skipped)`` where ``skipped`` counts
    utterances without a feasible alignment.
    """
    from .scoring import teacher_forced
    from .search import force_align_batch

    errors = total = skipped = 0
    for start in range(0, len(records), batch_size):
        batch = records[start : start + batch_size]
        targets = [list(r.labels) + [model.eos] for r in batch]
        enc = model.encode([r.features for r in batch])
        alignments = None
        if model.variant.latent:
            keep = [i for i, y in enumerate(targets) if _feasible(model, enc.lengths[i], len(y))]
            skipped += len(batch) - len(keep)
            if not keep:
                continue
            if len(keep) < len(batch):
                batch = [batch[i] for i in keep]
                targets = [targets[i] for i in keep]
                enc = model.encode([r.features for r in batch])
            try:
                res = force_align_batch(model, enc, targets, beam_size=align_beam, recombine=recombine)
            except InfeasibleError:
                skipped += len(batch)
                continue
            alignments = [a for a, _ in res]
        steps = teacher_forced(model, enc, targets, alignments)
        for i, st in enumerate(steps):
            pred = st.label_logp.data.argmax(axis=1)
            gold = np.array([y[i] if i < len(y) else -1 for y in targets])
            errors += int(np.sum((pred != gold) & st.active))
            total += int(np.sum(st.active))
    return (100.0 * errors / total if total else 0.0), skipped


def _feasible(model, num_frames, n):
    v = model.variant
    if not v.strict:
        return True
    return n <= num_frames


@dataclass
class EvalReport:
    wer: float
    substitutions: int
    insertions: int
    deletions: int
    ref_length: int
    num_utterances: int
    fer: float | None = None
    step_mean: float | None = None
    step_std: float | None = None
    step_max: int | None = None

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        d = asdict(self)
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(list(d))
        writer.writerow(["" if v is None else v for v in d.values()])
        return buf.getvalue()


def evaluate(refs, hyps, alignments=None, fer=None):
    rate, (S, I, D, total) = wer(refs, hyps)
    report = EvalReport(rate, S, I, D, total, len(refs), fer=fer)
    if alignments:
        st = step_stats(alignments)
        report.step_mean, report.step_std, report.step_max = st["mean"], st["std"], st["max"]
    return report
