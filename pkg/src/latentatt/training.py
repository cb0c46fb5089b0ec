"""Maximum-approximation training with on-the-fly forced alignment.

Training runs in three consecutive phases, measured in epochs:

1. global soft attention (latent machinery off),
2. latent model trained on frozen linear alignments,
3. latent model with realignment in every mini-batch; an utterance's cached
   alignment is replaced only when the new one scores strictly better.

The per-label loss is ``label_ce + scale * latent_nll`` with label smoothing
on the label term only.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, FormatError, InfeasibleError, NonFiniteError
from .metrics import frame_error_rate, wer
from .nnet import Model, save_checkpoint
from .scoring import sequence_scores, teacher_forced
from .search import DecodeConfig, decode, force_align_batch

log = logging.getLogger(__name__)

PHASE_GLOBAL = "global"
PHASE_LINEAR = "linear"
PHASE_REALIGN = "realign"


@dataclass
class TrainConfig:
    latent_loss_scale: float = 0.1
    label_smoothing: float = 0.1
    align_beam: int | None = None  # None: every position survives (K_t^align = T')
    align_recombine: bool = True
    cache_score: str = "joint"  # "joint" (scaled latent term included) or "label"
    global_epochs: int = 0
    linear_epochs: int = 0
    max_epochs: int = 30
    learning_rate: float = 0.002
    warmup_steps: int = 50
    decay_factor: float = 0.5
    decay_patience: int = 1
    min_learning_rate: float = 1e-5
    rms_decay: float = 0.999
    epsilon: float = 1e-8
    grad_clip: float = 5.0
    batch_size: int = 32
    seed: int = 1
    eval_beam_y: int = 4
    eval_expand_t: int = 2
    stop_dev_wer: float | None = None
    checkpoint_every: int = 1

    def __post_init__(self):
        if self.latent_loss_scale < 0:
            raise ConfigError("latent_loss_scale must be >= 0")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError("label_smoothing must be in [0, 1)")
        if self.global_epochs < 0 or self.linear_epochs < 0 or self.max_epochs < 1:
            raise ConfigError("phase lengths must be >= 0 and max_epochs >= 1")
        if self.cache_score not in ("joint", "label"):
            raise ConfigError("cache_score must be 'joint' or 'label'")

    def phase(self, epoch):
        """Phase name for 1-based ``epoch``."""
        if epoch <= self.global_epochs:
            return PHASE_GLOBAL
        if epoch <= self.global_epochs + self.linear_epochs:
            return PHASE_LINEAR
        return PHASE_REALIGN


# -- alignments ---------------------------------------------------------------


def linear_alignment(n, num_frames, strict=True):
    """``t_i = ceil(i * T' / n)`` for ``i = 1..n`` (``n`` counts EOS)."""
    if n < 1 or num_frames < 1:
        raise InfeasibleError("need at least one label and one frame")
    if strict and n > num_frames:
        raise InfeasibleError(f"{n} labels cannot be strictly aligned to {num_frames} frames")
    return [-(-i * num_frames // n) for i in range(1, n + 1)]


@dataclass
class AlignmentCacheEntry:
    id: str
    alignment: list
    score: float | None
    epoch: int


class AlignmentCache:
    """Best alignment found so far per utterance, with its joint score.

    File format: one JSON object per line with keys ``id``, ``n`` (labels
    including EOS), ``t``, ``score`` (null until first scored) and ``epoch``.
    """

    def __init__(self):
        self.entries: dict[str, AlignmentCacheEntry] = {}

    def __len__(self):
        return len(self.entries)

    def __contains__(self, key):
        return key in self.entries

    def __getitem__(self, key):
        return self.entries[key]

    def init_linear(self, rid, n, num_frames, strict=True):
        if rid not in self.entries:
            self.entries[rid] = AlignmentCacheEntry(rid, linear_alignment(n, num_frames, strict), None, 0)
        return self.entries[rid]

    def offer(self, rid, alignment, score, epoch):
        """Replace the entry if ``score`` is strictly better. Returns True on replace."""
        entry = self.entries[rid]
        if not math.isfinite(score):
            raise NonFiniteError(f"alignment score for {rid} is not finite")
        if entry.score is not None and not score > entry.score:
            return False
        assert entry.score is None or score >= entry.score
        self.entries[rid] = AlignmentCacheEntry(rid, list(alignment), float(score), epoch)
        return True

    def set_score(self, rid, score):
        entry = self.entries[rid]
        assert entry.score is None
        entry.score = float(score)

    def dumps(self):
        lines = []
        for rid in sorted(self.entries):
            e = self.entries[rid]
            rec = {"id": e.id, "n": len(e.alignment), "t": e.alignment, "score": e.score, "epoch": e.epoch}
            lines.append(json.dumps(rec, sort_keys=True))
        return "".join(line + "\n" for line in lines)

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path):
        cache = cls()
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    if rec["n"] != len(rec["t"]):
                        raise ValueError("n does not match alignment length")
                    entry = AlignmentCacheEntry(rec["id"], [int(t) for t in rec["t"]], rec["score"], int(rec["epoch"]))
                except (ValueError, KeyError, TypeError) as exc:
                    raise FormatError(f"bad alignment record: {exc}", path=str(path), line=lineno) from None
                cache.entries[entry.id] = entry
        return cache


# -- optimiser ----------------------------------------------------------------


class RMSProp:
    """Per-parameter adaptive steps with a bias-corrected second moment.

    No momentum term. Gradients are clipped by global norm before the update.
    """

    def __init__(self, params, lr, decay=0.999, eps=1e-8, clip=5.0):
        self.params = params
        self.lr = lr
        self.decay = decay
        self.eps = eps
        self.clip = clip
        self.sq = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
        if not math.isfinite(norm):
            raise NonFiniteError("gradient norm is not finite")
        scale = self.clip / norm if self.clip and norm > self.clip else 1.0
        self.t += 1
        corr = 1.0 - self.decay**self.t
        for p, g, sq in zip(self.params, grads, self.sq):
            g = g * scale
            sq *= self.decay
            sq += (1.0 - self.decay) * g * g
            p.data -= lr * g / (np.sqrt(sq / corr) + self.eps)
        return norm


# -- loss ---------------------------------------------------------------------


def joint_loss(model, enc, targets, alignments, latent_scale, label_smoothing):
    """``(loss, label_ce, latent_nll, num_labels)``; all three losses are per label.

    ``loss`` is a tape tensor when a tape is open; the other two are floats.
    """
    steps = teacher_forced(model, enc, targets, alignments if model.variant.latent else None)
    B = len(targets)
    rows = np.arange(B)
    n = sum(len(y) for y in targets)
    V1 = model.num_labels
    ce_terms = []
    lat_terms = []
    for i, st in enumerate(steps):
        y = np.array([tg[i] if i < len(tg) else 0 for tg in targets])
        w = st.active.astype(np.float64)
        gold = ad.take(st.label_logp, (rows, y))
        ce = gold * (-(1.0 - label_smoothing))
        if label_smoothing > 0:
            ce = ce - ad.reduce_sum(st.label_logp, axis=1) * (label_smoothing / V1)
        ce_terms.append(ad.reduce_sum(ce * w))
        if st.latent_logp is not None:
            lat_terms.append(ad.reduce_sum(ad.neg(st.latent_logp) * w))
    label_ce = ad.reduce_sum(ad.stack(ce_terms)) * (1.0 / n)
    if lat_terms:
        latent_nll = ad.reduce_sum(ad.stack(lat_terms)) * (1.0 / n)
        loss = label_ce + latent_nll * latent_scale if latent_scale else label_ce
    else:
        latent_nll = None
        loss = label_ce
    return loss, label_ce.item(), (latent_nll.item() if latent_nll is not None else 0.0), n


def _detached(enc):
    from .nnet import Encoded

    return Encoded(
        enc.h.detach(), enc.lengths, enc.proj.detach(),
        enc.seg_proj.detach() if enc.seg_proj is not None else None,
    )


def train_step(model, batch, cache, config: TrainConfig, optimizer, phase=PHASE_REALIGN, epoch=1,
               lr=None, rng=None):
    """One optimiser update on ``batch`` (a list of dataset records).

    Returns a dict of statistics. In the realign phase the cache is updated
    with keep-if-strictly-better semantics before the loss is formed.
    """
    active = model.with_variant("global") if phase == PHASE_GLOBAL else model
    targets = [list(r.labels) + [model.eos] for r in batch]
    stats = {"realigned": 0}
    optimizer.zero_grad()
    with ad.Tape() as tape:
        enc = active.encode([r.features for r in batch], training=True, rng=rng)
        alignments = None
        if active.variant.latent:
            strict = active.variant.strict
            for r, y, T in zip(batch, targets, enc.lengths):
                cache.init_linear(r.id, len(y), int(T), strict)
            if phase == PHASE_REALIGN:
                with ad.no_grad():
                    stats["realigned"] = _realign(active, _detached(enc), batch, targets, cache, config, epoch)
            alignments = [cache[r.id].alignment for r in batch]
        loss, label_ce, latent_nll, n = joint_loss(
            active, enc, targets, alignments, config.latent_loss_scale, config.label_smoothing
        )
        if not math.isfinite(loss.item()):
            raise NonFiniteError(f"loss became {loss.item()} (epoch {epoch})")
        tape.backward(loss)
    stats["grad_norm"] = optimizer.step(lr)
    stats.update(loss=loss.item(), label_ce=label_ce, latent_nll=latent_nll, labels=n)
    return stats


def _cache_scale(config):
    return config.latent_loss_scale if config.cache_score == "joint" else 0.0


def _realign(model, enc, batch, targets, cache, config, epoch):
    scale = _cache_scale(config)
    found = force_align_batch(model, enc, targets, beam_size=config.align_beam, scale=scale,
                              recombine=config.align_recombine)
    unscored = [i for i, r in enumerate(batch) if cache[r.id].score is None]
    if unscored:
        steps = teacher_forced(model, enc, targets, [cache[r.id].alignment for r in batch])
        scores = sequence_scores(steps, targets, latent_scale=scale)
        for i in unscored:
            cache.set_score(batch[i].id, scores[i])
    replaced = 0
    for r, (al, score) in zip(batch, found):
        replaced += cache.offer(r.id, al, score, epoch)
    return replaced


# -- full training ------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    phase: str
    loss: float
    label_ce: float
    latent_nll: float
    lr: float
    realigned: int
    dev_fer: float | None = None
    dev_wer: float | None = None


def evaluate_dev(model, records, config: TrainConfig, phase):
    active = model.with_variant("global") if phase == PHASE_GLOBAL else model
    if not records:
        return None, None
    fer, _ = frame_error_rate(active, records, align_beam=config.align_beam, recombine=config.align_recombine)
    dc = DecodeConfig(beam_size_y=config.eval_beam_y, expand=True, expand_t=config.eval_expand_t)
    hyps = [decode(active, r.features, dc).labels for r in records]
    rate, _ = wer([r.labels for r in records], hyps)
    return fer, rate


def train(model, train_set, dev_set, config: TrainConfig, out_dir=None, run_config=None, progress=None):
    """Train ``model`` in place through the staged schedule.

    Writes ``metrics.jsonl`` (first line: effective config and a timestamp),
    ``alignments.jsonl`` and checkpoints ``epoch-NNN.ckpt`` / ``model.ckpt``
    into ``out_dir`` when given. Returns ``(logs, cache)``.
    """
    records = list(train_set)
    dev = list(dev_set) if dev_set is not None else []
    opt = RMSProp(model.parameters(), config.learning_rate, config.rms_decay, config.epsilon, config.grad_clip)
    cache = AlignmentCache()
    drop_rng = np.random.default_rng([config.seed, 7])
    logs = []
    metrics_path = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.jsonl")
        header = {"started": time.strftime("%Y-%m-%dT%H:%M:%S"), "config": run_config or {"train": asdict(config)}}
        with open(metrics_path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
    lr = config.learning_rate
    best = math.inf
    bad_epochs = 0
    step = 0
    prev_phase = None
    for epoch in range(1, config.max_epochs + 1):
        phase = config.phase(epoch)
        if phase != prev_phase:
            best, bad_epochs = math.inf, 0
        prev_phase = phase
        order = np.random.default_rng([config.seed, epoch]).permutation(len(records))
        tot = {"loss": 0.0, "label_ce": 0.0, "latent_nll": 0.0, "labels": 0, "realigned": 0}
        for start in range(0, len(order), config.batch_size):
            batch = [records[i] for i in order[start : start + config.batch_size]]
            step += 1
            cur_lr = lr * min(1.0, step / config.warmup_steps) if config.warmup_steps else lr
            st = train_step(model, batch, cache, config, opt, phase, epoch, lr=cur_lr, rng=drop_rng)
            n = st["labels"]
            for k in ("loss", "label_ce", "latent_nll"):
                tot[k] += st[k] * n
            tot["labels"] += n
            tot["realigned"] += st["realigned"]
        n = max(1, tot["labels"])
        entry = EpochLog(epoch, phase, tot["loss"] / n, tot["label_ce"] / n, tot["latent_nll"] / n, lr,
                         tot["realigned"])
        entry.dev_fer, entry.dev_wer = evaluate_dev(model, dev, config, phase)
        logs.append(entry)
        if progress:
            progress(entry)
        if metrics_path:
            with open(metrics_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(asdict(entry), sort_keys=True) + "\n")
            if config.checkpoint_every and epoch % config.checkpoint_every == 0:
                save_checkpoint(os.path.join(out_dir, f"epoch-{epoch:03d}.ckpt"), model, {"epoch": epoch, "phase": phase})
            cache.save(os.path.join(out_dir, "alignments.jsonl"))
        metric = entry.dev_wer if entry.dev_wer is not None else entry.loss
        if metric < best - 1e-9:
            best, bad_epochs = metric, 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.decay_patience:
                lr = max(config.min_learning_rate, lr * config.decay_factor)
                bad_epochs = 0
        last_phase = config.phase(config.max_epochs)
        if (config.stop_dev_wer is not None and entry.dev_wer is not None and phase == last_phase
                and entry.dev_wer <= config.stop_dev_wer):
            break
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "model.ckpt"), model, {"epoch": logs[-1].epoch if logs else 0})
    return logs, cache
