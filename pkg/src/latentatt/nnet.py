"""Recurrent layers and the encoder/decoder shared by all attention variants.

The decoder follows the usual LSTM attention recipe. At label step ``i``:

* ``s_i = LSTM(s_{i-1}, [embed(y_{i-1}); c_{i-1}])`` is the attention query,
* energies ``e_{i,t} = v^T tanh(W_h h_t + W_s s_i + w_f f_t + b)`` with
  accumulated-attention feedback ``f``,
* the context ``c_i`` comes from the active variant,
* label logits ``W_o tanh(W_r [s_i; c_i] + b_r) + b_o`` over vocabulary + EOS.

So the position distribution at step ``i`` sees ``y_1^{i-1}`` and ``c_1^{i-1}``
while the label distribution additionally sees ``c_i``.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import attention as att
from . import autodiff as ad
from .autodiff import Tensor
from .errors import BoundsError, ConfigError, DimensionError, FormatError, UnsupportedVersionError

CHECKPOINT_MAGIC = b"LATATT-CKPT\n"
CHECKPOINT_VERSION = 1


@dataclass
class EncoderConfig:
    num_layers: int = 2
    hidden_per_direction: int = 64
    pool_factors: tuple = (2, 1)

    def __post_init__(self):
        self.pool_factors = tuple(int(p) for p in self.pool_factors)
        if self.num_layers < 1:
            raise ConfigError("encoder needs at least one layer")
        if len(self.pool_factors) != self.num_layers:
            raise ConfigError("pool_factors needs one entry per encoder layer")
        if any(p < 1 for p in self.pool_factors):
            raise ConfigError("pool factors must be >= 1")

    @property
    def total_pool(self):
        return int(np.prod(self.pool_factors))

    def output_length(self, T):
        for p in self.pool_factors:
            T = -(-T // p)
        return T


@dataclass
class ModelConfig:
    vocab_size: int = 10
    feature_dim: int = 8
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder_hidden: int = 128
    embedding_dim: int = 32
    attention_dim: int = 64
    readout_dim: int = 64
    variant: str = "hard"
    monotonicity: str | None = None
    max_step: int | None = None
    window_left: int = 2
    window_right: int = 2
    segment_feedback: bool = False
    dropout: float = 0.0
    init_seed: int = 0

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        self.make_variant()

    def make_variant(self, kind=None):
        return att.Variant.make(
            kind or self.variant,
            self.monotonicity,
            self.max_step,
            self.window_left,
            self.window_right,
        )

    def to_dict(self):
        d = asdict(self)
        d["encoder"]["pool_factors"] = list(self.encoder.pool_factors)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        if "encoder" in d and isinstance(d["encoder"], dict):
            enc_known = {f.name for f in fields(EncoderConfig)}
            bad = set(d["encoder"]) - enc_known
            if bad:
                raise ConfigError(f"unknown encoder config keys: {sorted(bad)}")
            d["encoder"] = EncoderConfig(**d["encoder"])
        return cls(**d)


@dataclass
class Encoded:
    """Encoder output for a batch, padded to the longest ``T'``."""

    h: Tensor
    lengths: np.ndarray
    proj: Tensor
    seg_proj: Tensor | None = None

    @property
    def num_frames(self):
        return self.h.shape[1]

    def valid_mask(self, rows):
        return np.arange(self.num_frames)[None, :] < self.lengths[rows][:, None]

    def select(self, tensor, rows):
        """``tensor[rows]`` without a copy when every row shares one utterance."""
        B = tensor.shape[0]
        if B == 1:
            return tensor
        if len(rows) == B and np.array_equal(rows, np.arange(B)):
            return tensor
        return ad.take(tensor, (np.asarray(rows),))


@dataclass
class DecoderState:
    """Batched decoder state, one row per hypothesis.

    ``t_prev`` is the previous position (0 before the first step); for the
    global soft variant it stays 0.
    """

    rows: np.ndarray
    s: Tensor
    cell: Tensor
    feedback: Tensor
    context: Tensor
    y_prev: np.ndarray
    t_prev: np.ndarray

    def __len__(self):
        return len(self.rows)

    def select(self, idx):
        idx = np.asarray(idx, dtype=int)
        return DecoderState(
            rows=self.rows[idx],
            s=ad.take(self.s, (idx,)),
            cell=ad.take(self.cell, (idx,)),
            feedback=ad.take(self.feedback, (idx,)),
            context=ad.take(self.context, (idx,)),
            y_prev=self.y_prev[idx],
            t_prev=self.t_prev[idx],
        )


def lstm_step(w_in, w_rec, bias, x, state):
    """One LSTM step on a batch ``x[K, D]`` with ``state = (h, c)``.

    Gate order (input, forget, cell, output), matching :func:`autodiff.lstm_layer`.
    """
    h, c = state
    H = ad._wrap(w_rec).shape[1]
    x = ad._wrap(x)
    squeeze = x.ndim == 1
    if squeeze:
        x, h, c = (ad.reshape(ad._wrap(v), (1, -1)) for v in (x, h, c))
    if x.shape[1] != ad._wrap(w_in).shape[1]:
        raise DimensionError(f"lstm input size {x.shape[1]} != {ad._wrap(w_in).shape[1]}")
    z = ad.matmul(x, ad.transpose(w_in)) + ad.matmul(h, ad.transpose(w_rec)) + bias
    i = ad.sigmoid(z[:, :H])
    f = ad.sigmoid(z[:, H : 2 * H])
    g = ad.tanh(z[:, 2 * H : 3 * H])
    o = ad.sigmoid(z[:, 3 * H :])
    c_new = f * c + i * g
    h_new = o * ad.tanh(c_new)
    if squeeze:
        return ad.reshape(h_new, (H,)), ad.reshape(c_new, (H,))
    return h_new, c_new


def attention_energies(w_enc, w_query, w_fb, bias, v, h, s, feedback):
    """MLP attention energies ``v^T tanh(W_h h_t + W_s s + w_f f_t + b)``.

    Unbatched form: ``h[T', E]``, ``s[H]``, ``feedback[T']`` -> ``[T']``.
    ``w_fb`` may be None to disable weight feedback.
    """
    h = ad._wrap(h)
    if h.ndim != 2:
        raise DimensionError("attention_energies expects h of shape [T', E]")
    proj = ad.matmul(h, w_enc)
    pre = proj + ad.reshape(ad.matmul(ad.reshape(ad._wrap(s), (1, -1)), w_query), (-1,))
    if w_fb is not None:
        pre = pre + ad.reshape(ad._wrap(feedback), (-1, 1)) * w_fb
    pre = ad.tanh(pre + bias)
    return ad.reshape(ad.matmul(pre, ad.reshape(v, (-1, 1))), (-1,))


class Model:
    """Parameters plus the encoder/decoder computations for one attention variant."""

    def __init__(self, config: ModelConfig, params=None, variant=None):
        self.config = config
        self.variant = variant or config.make_variant()
        self.params = params if params is not None else init_params(config)
        self.eos = config.vocab_size
        self.bos = config.vocab_size
        self.num_labels = config.vocab_size + 1

    def with_variant(self, kind):
        """A view sharing parameters but running a different context mechanism."""
        return Model(self.config, self.params, self.config.make_variant(kind))

    def with_max_step(self, max_step):
        return Model(self.config, self.params, replace(self.variant, max_step=max_step))

    def p(self, name):
        return self.params[name]

    def parameters(self):
        return list(self.params.values())

    # -- encoder ------------------------------------------------------------

    def encode(self, xs, training=False, rng=None):
        """Encode a list of ``[T, F]`` feature matrices into a padded batch."""
        cfg = self.config
        if not len(xs):
            raise DimensionError("empty batch")
        lengths = np.array([len(x) for x in xs], dtype=int)
        if np.any(lengths < 1):
            raise DimensionError("cannot encode an empty input sequence")
        for x in xs:
            if np.ndim(x) != 2 or np.shape(x)[1] != cfg.feature_dim:
                raise DimensionError(f"expected features of width {cfg.feature_dim}")
        B, T = len(xs), int(lengths.max())
        data = np.zeros((B, T, cfg.feature_dim))
        for b, x in enumerate(xs):
            data[b, : len(x)] = x
        out = Tensor(data)
        for layer, factor in enumerate(cfg.encoder.pool_factors):
            out = self._bilstm(out, lengths, layer)
            if factor > 1:
                out = ad.masked_max_pool(out, lengths, factor)
                lengths = -(-lengths // factor)
            if training and cfg.dropout > 0:
                out = ad.dropout(out, cfg.dropout, rng)
        return self._encoded(out, lengths)

    def _encoded(self, h, lengths):
        B, Tp, E = h.shape
        flat = ad.reshape(h, (B * Tp, E))
        proj = ad.reshape(ad.matmul(flat, self.p("att.w_enc")), (B, Tp, -1))
        seg_proj = None
        if "seg.w_enc" in self.params:
            seg_proj = ad.reshape(ad.matmul(flat, self.p("seg.w_enc")), (B, Tp, -1))
        return Encoded(h, lengths, proj, seg_proj)

    def _bilstm(self, x, lengths, layer):
        B, T, _ = x.shape
        pre = f"enc.{layer}"
        fw = ad.lstm_layer(x, self.p(f"{pre}.fw.w_in"), self.p(f"{pre}.fw.w_rec"), self.p(f"{pre}.fw.bias"))
        idx = _reverse_index(lengths, T)
        xr = ad.take(x, idx)
        bw = ad.lstm_layer(xr, self.p(f"{pre}.bw.w_in"), self.p(f"{pre}.bw.w_rec"), self.p(f"{pre}.bw.bias"))
        bw = ad.take(bw, idx)
        return ad.concat([fw, bw], axis=2)

    # -- decoder ------------------------------------------------------------

    def initial_state(self, enc, rows):
        rows = np.asarray(rows, dtype=int)
        K = len(rows)
        cfg = self.config
        E = enc.h.shape[2]
        zeros = lambda *s: Tensor(np.zeros(s))
        return DecoderState(
            rows=rows,
            s=zeros(K, cfg.decoder_hidden),
            cell=zeros(K, cfg.decoder_hidden),
            feedback=zeros(K, enc.num_frames),
            context=zeros(K, E),
            y_prev=np.full(K, self.bos, dtype=int),
            t_prev=np.zeros(K, dtype=int),
        )

    def embed(self, labels):
        labels = np.asarray(labels, dtype=int)
        if np.any(labels < 0) or np.any(labels >= self.num_labels):
            raise BoundsError(f"label id out of range [0, {self.num_labels})")
        return ad.take(self.p("dec.embed"), (labels,))

    def query(self, state):
        """Advance the decoder LSTM over ``[embed(y_{i-1}); c_{i-1}]``."""
        x = ad.concat([self.embed(state.y_prev), state.context], axis=1)
        return lstm_step(
            self.p("dec.lstm.w_in"), self.p("dec.lstm.w_rec"), self.p("dec.lstm.bias"), x,
            (state.s, state.cell),
        )

    def energies(self, enc, rows, s, feedback, prefix="att"):
        """Attention energies ``[K, T']`` for query rows ``s``."""
        proj = enc.proj if prefix == "att" else enc.seg_proj
        proj = enc.select(proj, rows)
        K = s.shape[0]
        q = ad.reshape(ad.matmul(s, self.p(f"{prefix}.w_query")), (K, 1, -1))
        pre = proj + q
        if f"{prefix}.w_fb" in self.params:
            pre = pre + ad.reshape(feedback, (K, -1, 1)) * self.p(f"{prefix}.w_fb")
        pre = ad.tanh(pre + self.p(f"{prefix}.bias"))
        Tp, A = pre.shape[1], pre.shape[2]
        e = ad.matmul(ad.reshape(pre, (K * Tp, A)), ad.reshape(self.p(f"{prefix}.v"), (A, 1)))
        return ad.reshape(e, (K, Tp))

    def soft_weights(self, enc, rows, energies):
        return ad.masked_softmax(energies, enc.valid_mask(rows))

    def context(self, enc, rows, t, t_prev, energies=None, seg_energies=None, weights=None):
        """Context vectors ``[K, E]`` for rows with chosen positions ``t``.

        ``energies``/``seg_energies`` must already be aligned with ``rows``.
        For the global variant pass the soft ``weights`` instead.
        """
        v = self.variant
        rows = np.asarray(rows, dtype=int)
        if v.kind == att.GLOBAL:
            return ad.weighted_sum(weights, enc.select(enc.h, rows) if enc.h.shape[0] > 1 else enc.h)
        t = np.asarray(t, dtype=int)
        if v.kind == att.HARD:
            return ad.take(enc.h, (rows, t - 1))
        Tp = enc.num_frames
        if v.kind == att.LOCAL:
            mask = att.window_mask(t, enc.lengths[rows], v, Tp)
            w = ad.masked_softmax(energies, mask)
        else:
            mask = att.segment_mask(t_prev, t, Tp)
            w = ad.masked_softmax(seg_energies, mask)
        h = enc.h if enc.h.shape[0] == 1 else enc.select(enc.h, rows)
        return ad.weighted_sum(w, h)

    def readout(self, s, c):
        hidden = ad.tanh(
            ad.matmul(ad.concat([s, c], axis=1), self.p("out.w_hidden")) + self.p("out.b_hidden")
        )
        return ad.matmul(hidden, self.p("out.w")) + self.p("out.b")

    def advance(self, state, s, cell, c, y, t, increment):
        """New state after emitting labels ``y`` at positions ``t``."""
        return DecoderState(
            rows=state.rows,
            s=s,
            cell=cell,
            feedback=state.feedback + increment,
            context=c,
            y_prev=np.asarray(y, dtype=int),
            t_prev=np.asarray(t, dtype=int) if self.variant.latent else state.t_prev,
        )

    def feedback_increment(self, enc, t, t_prev, weights):
        v = self.variant
        if v.kind == att.GLOBAL:
            return weights
        return Tensor(att.feedback_increment(v, enc.num_frames, t=t, t_prev=t_prev))

    def support(self, enc, rows, t_prev):
        return att.support_mask(t_prev, enc.lengths[rows], self.variant, enc.num_frames)


def _reverse_index(lengths, T):
    B = len(lengths)
    t = np.arange(T)[None, :]
    rev = np.where(t < lengths[:, None], lengths[:, None] - 1 - t, t)
    return (np.repeat(np.arange(B)[:, None], T, axis=1), rev)


# -- parameters ---------------------------------------------------------------


def param_shapes(config: ModelConfig):
    """Ordered ``name -> shape`` map of every parameter of ``config``."""
    shapes = {}
    H = config.encoder.hidden_per_direction
    D = config.feature_dim
    for layer in range(config.encoder.num_layers):
        for d in ("fw", "bw"):
            pre = f"enc.{layer}.{d}"
            shapes[f"{pre}.w_in"] = (4 * H, D)
            shapes[f"{pre}.w_rec"] = (4 * H, H)
            shapes[f"{pre}.bias"] = (4 * H,)
        D = 2 * H
    E = 2 * H
    Hd, A, V1 = config.decoder_hidden, config.attention_dim, config.vocab_size + 1
    shapes["dec.embed"] = (V1, config.embedding_dim)
    shapes["dec.lstm.w_in"] = (4 * Hd, config.embedding_dim + E)
    shapes["dec.lstm.w_rec"] = (4 * Hd, Hd)
    shapes["dec.lstm.bias"] = (4 * Hd,)
    shapes["att.w_enc"] = (E, A)
    shapes["att.w_query"] = (Hd, A)
    shapes["att.w_fb"] = (A,)
    shapes["att.bias"] = (A,)
    shapes["att.v"] = (A,)
    if config.variant == att.SEGMENTAL:
        shapes["seg.w_enc"] = (E, A)
        shapes["seg.w_query"] = (Hd, A)
        if config.segment_feedback:
            shapes["seg.w_fb"] = (A,)
        shapes["seg.bias"] = (A,)
        shapes["seg.v"] = (A,)
    shapes["out.w_hidden"] = (Hd + E, config.readout_dim)
    shapes["out.b_hidden"] = (config.readout_dim,)
    shapes["out.w"] = (config.readout_dim, V1)
    shapes["out.b"] = (V1,)
    return shapes


def init_params(config: ModelConfig, seed=None):
    """Glorot-uniform matrices, zero biases except LSTM forget gates at 1."""
    rng = np.random.default_rng(config.init_seed if seed is None else seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("bias") and name.startswith(("enc.", "dec.lstm")):
            H = shape[0] // 4
            value = np.zeros(shape)
            value[H : 2 * H] = 1.0
        elif len(shape) == 1:
            limit = np.sqrt(3.0 / shape[0]) if name.endswith((".v", "w_fb")) else 0.0
            value = rng.uniform(-limit, limit, shape) if limit else np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-limit, limit, shape)
        params[name] = Tensor(value, requires_grad=True)
    return params


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(path_or_file, model: Model, meta=None):
    """Write a self-describing checkpoint.

    Layout: the magic line ``LATATT-CKPT``, one line of JSON (format version,
    model config, optional ``meta``, and ``[name, shape, offset]`` per array),
    then every array as little-endian float64, in header order.
    """
    arrays = []
    offset = 0
    blobs = []
    for name, t in model.params.items():
        data = np.ascontiguousarray(t.data, dtype="<f8")
        arrays.append([name, list(data.shape), offset])
        blobs.append(data.tobytes())
        offset += data.nbytes
    header = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "meta": meta or {},
        "arrays": arrays,
    }
    payload = CHECKPOINT_MAGIC + json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n"
    payload += b"".join(blobs)
    if hasattr(path_or_file, "write"):
        path_or_file.write(payload)
    else:
        with open(path_or_file, "wb") as fh:
            fh.write(payload)
    return payload


def load_checkpoint(path_or_file):
    """Read a checkpoint; returns ``(model, meta)``."""
    if hasattr(path_or_file, "read"):
        raw = path_or_file.read()
        path = None
    else:
        path = str(path_or_file)
        with open(path_or_file, "rb") as fh:
            raw = fh.read()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise FormatError("not a checkpoint file (bad magic)", path=path, line=1)
    stream = io.BytesIO(raw[len(CHECKPOINT_MAGIC):])
    try:
        header = json.loads(stream.readline())
    except ValueError as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}", path=path, line=2) from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {header.get('version')!r}", path=path)
    config = ModelConfig.from_dict(header["config"])
    blob = stream.read()
    params = {}
    for name, shape, offset in header["arrays"]:
        n = int(np.prod(shape)) * 8
        if offset + n > len(blob):
            raise FormatError(f"truncated checkpoint while reading {name}", path=path)
        data = np.frombuffer(blob, dtype="<f8", count=n // 8, offset=offset).astype(np.float64)
        params[name] = Tensor(data.reshape(shape), requires_grad=True)
    expected = param_shapes(config)
    if list(expected) != list(params) or any(tuple(params[k].shape) != tuple(v) for k, v in expected.items()):
        raise FormatError("checkpoint arrays do not match its config", path=path)
    return Model(config, params), header.get("meta", {})
