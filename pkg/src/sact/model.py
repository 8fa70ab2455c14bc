"""Encoder-decoder translation model with temperature-controlled attention.

Architecture: embeddings -> bidirectional LSTM encoder (forward/backward
outputs concatenated per position) -> unidirectional LSTM decoder whose
attention softmax is scaled by the learned per-step temperature -> tanh
readout over [context; state] -> vocabulary projection.

Shapes follow two conventions: parameters are row-major ``(out, in)``
matrices applied with :func:`sact.tensor.linear`; activations carry the
batch on the leading axis. Padding never leaks: masked encoder steps carry
the previous state through unchanged, and masked source positions are
excluded from attention, so a padded batch row computes bit-identical
states to the same sentence run alone.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .attention import (AttentionParams, AttentionStep, TemperatureController,
                        attend)
from .data import BOS_ID, EOS_ID
from .errors import ConfigError, ShapeError
from .tensor import Tensor

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    src_vocab_size: int
    tgt_vocab_size: int
    embed_dim: int = 512
    hidden_dim: int = 512
    temp_bound: float = 4.0          # temperature confined to (1/bound, bound)
    dropout_rate: float = 0.3
    decode_len_mul: int = 2          # decode cap = mul * src_len + add
    decode_len_add: int = 10
    score_kind: str = "bilinear"
    fixed_temperature: float | None = None  # ablation: bypass the controller

    def __post_init__(self):
        if min(self.src_vocab_size, self.tgt_vocab_size,
               self.embed_dim, self.hidden_dim) < 1:
            raise ConfigError("model dimensions must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.temp_bound <= 1.0:
            raise ConfigError(f"temp_bound must exceed 1, got {self.temp_bound}")
        if self.score_kind != "bilinear":
            raise ConfigError(f"unsupported score kind {self.score_kind!r}")

    def decode_cap(self, src_len: int) -> int:
        return self.decode_len_mul * src_len + self.decode_len_add


@dataclass
class LstmParams:
    w_in: Tensor   # (4H, in_dim), gate chunks ordered [input|forget|output|candidate]
    w_rec: Tensor  # (4H, H)
    bias: Tensor   # (4H,)


class DecoderState(NamedTuple):
    h: Tensor
    c: Tensor


@dataclass
class ModelParams:
    """All learnable tensors; field order fixes the checkpoint manifest order."""

    src_embed: Tensor
    tgt_embed: Tensor
    enc_fwd: LstmParams
    enc_bwd: LstmParams
    dec: LstmParams
    attention: AttentionParams
    controller: TemperatureController
    bridge: Tensor        # (H, 2H): encoder endpoints -> initial decoder state
    init_context: Tensor  # (2H, H): initial decoder state -> initial context
    readout: Tensor       # (H, 3H): [context; state] -> pre-vocab features
    vocab_out: Tensor     # (V_tgt, H)

    def named(self) -> list[tuple[str, Tensor]]:
        pairs: list[tuple[str, Tensor]] = [
            ("src_embed", self.src_embed), ("tgt_embed", self.tgt_embed)]
        for tag, lstm in (("enc_fwd", self.enc_fwd), ("enc_bwd", self.enc_bwd),
                          ("dec", self.dec)):
            pairs += [(f"{tag}.w_in", lstm.w_in), (f"{tag}.w_rec", lstm.w_rec),
                      (f"{tag}.bias", lstm.bias)]
        pairs += [("attention.score_weight", self.attention.score_weight),
                  ("controller.ctx_weight", self.controller.ctx_weight),
                  ("controller.state_weight", self.controller.state_weight),
                  ("bridge", self.bridge), ("init_context", self.init_context),
                  ("readout", self.readout), ("vocab_out", self.vocab_out)]
        return pairs

    def zero_grads(self) -> None:
        for _, t in self.named():
            t.zero_grad()


def init_params(config: ModelConfig, rng: np.random.Generator,
                init_scale: float = 0.08) -> ModelParams:
    """Fresh parameters: uniform(-scale, scale) weights, zero biases,
    forget-gate bias +1."""
    h, e = config.hidden_dim, config.embed_dim

    def w(*shape):
        return Tensor(rng.uniform(-init_scale, init_scale, shape), requires_grad=True)

    def lstm(in_dim):
        bias = np.zeros(4 * h)
        bias[h:2 * h] = 1.0  # forget gate open at the start
        return LstmParams(w_in=w(4 * h, in_dim), w_rec=w(4 * h, h),
                          bias=Tensor(bias, requires_grad=True))

    return ModelParams(
        src_embed=w(config.src_vocab_size, e),
        tgt_embed=w(config.tgt_vocab_size, e),
        enc_fwd=lstm(e), enc_bwd=lstm(e), dec=lstm(e),
        attention=AttentionParams(score_weight=w(h, 2 * h)),
        controller=TemperatureController(ctx_weight=w(1, 2 * h),
                                         state_weight=w(1, h),
                                         bound=config.temp_bound),
        bridge=w(h, 2 * h), init_context=w(2 * h, h),
        readout=w(h, 3 * h), vocab_out=w(config.tgt_vocab_size, h))


def lstm_cell(x, h_prev, c_prev, gates: LstmParams) -> tuple[Tensor, Tensor]:
    """One LSTM step. Gate chunks: input, forget, output, candidate."""
    hidden = gates.w_rec.shape[1]
    pre = T.add(T.add(T.linear(x, gates.w_in), T.linear(h_prev, gates.w_rec)),
                gates.bias)
    gate_in = T.sigmoid(T.slice_cols(pre, 0, hidden))
    gate_forget = T.sigmoid(T.slice_cols(pre, hidden, 2 * hidden))
    gate_out = T.sigmoid(T.slice_cols(pre, 2 * hidden, 3 * hidden))
    candidate = T.tanh(T.slice_cols(pre, 3 * hidden, 4 * hidden))
    c = T.add(T.mul(gate_forget, c_prev), T.mul(gate_in, candidate))
    h = T.mul(gate_out, T.tanh(c))
    return h, c


def _masked_lstm_pass(ids: np.ndarray, mask: np.ndarray, table: Tensor,
                      gates: LstmParams, config: ModelConfig, training: bool,
                      rng, reverse: bool) -> list[Tensor]:
    """Run an LSTM over one direction; masked steps keep the previous state."""
    batch, n = ids.shape
    h = Tensor(np.zeros((batch, config.hidden_dim)))
    c = Tensor(np.zeros((batch, config.hidden_dim)))
    order = range(n - 1, -1, -1) if reverse else range(n)
    outputs: list[Tensor | None] = [None] * n
    for t in order:
        x = T.dropout(T.embed(table, ids[:, t]), config.dropout_rate, training, rng)
        h_new, c_new = lstm_cell(x, h, c, gates)
        keep = mask[:, t:t + 1]
        h = T.add(T.mul(h_new, keep), T.mul(h, 1.0 - keep))
        c = T.add(T.mul(c_new, keep), T.mul(c, 1.0 - keep))
        outputs[t] = h
    return outputs  # type: ignore[return-value]


def encode_batch(src_ids: np.ndarray, src_mask: np.ndarray, params: ModelParams,
                 config: ModelConfig, training: bool = False, rng=None) -> Tensor:
    """Bidirectional encoding of a padded id matrix -> (batch, n, 2*hidden)."""
    src_ids = np.asarray(src_ids)
    if src_ids.ndim != 2 or src_ids.shape[1] < 1:
        raise ValueError(f"encode needs a non-empty (batch, n) id matrix, "
                         f"got shape {src_ids.shape}")
    src_mask = np.asarray(src_mask, dtype=T.default_dtype())
    fwd = _masked_lstm_pass(src_ids, src_mask, params.src_embed, params.enc_fwd,
                            config, training, rng, reverse=False)
    bwd = _masked_lstm_pass(src_ids, src_mask, params.src_embed, params.enc_bwd,
                            config, training, rng, reverse=True)
    steps = [T.concat([f, b], axis=1) for f, b in zip(fwd, bwd)]
    return T.stack(steps, axis=1)


def encode(src_ids, params: ModelParams, config: ModelConfig,
           training: bool = False, rng=None) -> Tensor:
    """Single-sentence encoding -> (n, 2*hidden)."""
    ids = np.asarray(src_ids).reshape(1, -1)
    states = encode_batch(ids, np.ones_like(ids, dtype=float), params, config,
                          training, rng)
    return T.reshape(states, (ids.shape[1], 2 * config.hidden_dim))


def init_decoder(encoder_states: Tensor,
                 params: ModelParams) -> tuple[DecoderState, Tensor]:
    """Initial decoder state and initial context vector.

    The state is a tanh projection of [final forward state; first backward
    state]; the initial context is a learned projection of that state up to
    context size (context and state have different widths).
    """
    n = encoder_states.shape[1]
    hidden = params.bridge.shape[0]
    fwd_last = T.slice_cols(T.select_step(encoder_states, n - 1), 0, hidden)
    bwd_first = T.slice_cols(T.select_step(encoder_states, 0), hidden, 2 * hidden)
    s0 = T.tanh(T.linear(T.concat([fwd_last, bwd_first], axis=1), params.bridge))
    c0 = Tensor(np.zeros((encoder_states.shape[0], hidden)))
    ctx0 = T.linear(s0, params.init_context)
    return DecoderState(h=s0, c=c0), ctx0


@dataclass
class DecoderStepOutput:
    logits: Tensor            # (batch, tgt_vocab)
    state: DecoderState
    attention: AttentionStep


def decode_step(prev_ids, state: DecoderState, prev_context, encoder_states,
                src_mask, params: ModelParams, config: ModelConfig,
                training: bool = False, rng=None) -> DecoderStepOutput:
    """Advance the decoder one step from the previous target token."""
    x = T.dropout(T.embed(params.tgt_embed, np.asarray(prev_ids)),
                  config.dropout_rate, training, rng)
    h, c = lstm_cell(x, state.h, state.c, params.dec)
    att = attend(h, encoder_states, prev_context, src_mask,
                 params.controller, params.attention,
                 fixed_temperature=config.fixed_temperature)
    features = T.tanh(T.linear(T.concat([att.context, h], axis=1), params.readout))
    features = T.dropout(features, config.dropout_rate, training, rng)
    logits = T.linear(features, params.vocab_out)
    return DecoderStepOutput(logits=logits, state=DecoderState(h, c), attention=att)


def forward_loss(batch, params: ModelParams, config: ModelConfig,
                 training: bool = False, rng=None) -> tuple[Tensor, np.ndarray]:
    """Teacher-forced mean cross-entropy over unmasked target positions.

    Also returns the temperatures observed at those positions (flat array),
    for logging and range checks.
    """
    enc = encode_batch(batch.src, batch.src_mask, params, config, training, rng)
    state, ctx = init_decoder(enc, params)
    n_steps = batch.tgt.shape[1] - 1
    if n_steps < 1:
        raise ValueError("target matrix must hold BOS plus at least one token")
    step_logits = []
    temps = []
    for t in range(n_steps):
        out = decode_step(batch.tgt[:, t], state, ctx, enc, batch.src_mask,
                          params, config, training, rng)
        state, ctx = out.state, out.attention.context
        step_logits.append(out.logits)
        live = batch.tgt_mask[:, t + 1] > 0
        temps.append(out.attention.temperature.data[live, 0])
    rows = batch.tgt.shape[0] * n_steps
    flat = T.reshape(T.stack(step_logits, axis=1), (rows, config.tgt_vocab_size))
    loss = T.cross_entropy(flat, batch.tgt[:, 1:].reshape(-1),
                           batch.tgt_mask[:, 1:].reshape(-1))
    return loss, (np.concatenate(temps) if temps else np.zeros(0))


@dataclass
class AttentionTrace:
    """Per-step attention weights and temperatures for one decoded sentence."""

    weights: np.ndarray       # (steps, src_len), each row sums to 1
    temperatures: np.ndarray  # (steps,)
    exponents: np.ndarray     # (steps,)
    bound: float
    src_tokens: list[str] | None = None
    tgt_tokens: list[str] | None = None

    def with_tokens(self, src_tokens: list[str],
                    tgt_tokens: list[str]) -> "AttentionTrace":
        if len(src_tokens) != self.weights.shape[1]:
            raise ShapeError(f"{len(src_tokens)} source tokens vs "
                             f"{self.weights.shape[1]} attention columns")
        if len(tgt_tokens) != self.weights.shape[0]:
            raise ShapeError(f"{len(tgt_tokens)} target tokens vs "
                             f"{self.weights.shape[0]} attention rows")
        return AttentionTrace(self.weights, self.temperatures, self.exponents,
                              self.bound, list(src_tokens), list(tgt_tokens))


def greedy_decode(src_ids, params: ModelParams,
                  config: ModelConfig) -> tuple[list[int], AttentionTrace]:
    """Argmax decoding from BOS until EOS or the length cap.

    The returned ids exclude BOS/EOS; the trace has one row per step taken,
    including the step that emitted EOS.
    """
    src_ids = np.asarray(src_ids, dtype=np.int64).reshape(-1)
    with T.no_grad():
        enc = encode_batch(src_ids.reshape(1, -1),
                           np.ones((1, len(src_ids))), params, config)
        state, ctx = init_decoder(enc, params)
        src_mask = np.ones((1, len(src_ids)))
        ids: list[int] = []
        rows, temps, exps = [], [], []
        prev = BOS_ID
        for _ in range(config.decode_cap(len(src_ids))):
            out = decode_step(np.array([prev]), state, ctx, enc, src_mask,
                              params, config)
            state, ctx = out.state, out.attention.context
            rows.append(out.attention.weights.data[0].copy())
            temps.append(out.attention.temperature.data[0, 0])
            exps.append(out.attention.exponent.data[0, 0])
            prev = int(np.argmax(out.logits.data[0]))
            if prev == EOS_ID:
                break
            ids.append(prev)
    trace = AttentionTrace(weights=np.array(rows),
                           temperatures=np.array(temps),
                           exponents=np.array(exps),
                           bound=params.controller.bound)
    return ids, trace


def _log_softmax(row: np.ndarray) -> np.ndarray:
    m = row.max()
    return row - m - np.log(np.exp(row - m).sum())


class _Hyp(NamedTuple):
    ids: tuple[int, ...]
    logprob: float
    steps: int          # tokens emitted, EOS included
    state: DecoderState | None
    ctx: Tensor | None


def beam_decode(src_ids, params: ModelParams, config: ModelConfig,
                beam_size: int) -> list[int]:
    """Length-normalized beam search; beam_size=1 reproduces greedy_decode."""
    if beam_size < 1:
        raise ConfigError(f"beam_size must be >= 1, got {beam_size}")
    src_ids = np.asarray(src_ids, dtype=np.int64).reshape(-1)
    with T.no_grad():
        enc = encode_batch(src_ids.reshape(1, -1),
                           np.ones((1, len(src_ids))), params, config)
        state0, ctx0 = init_decoder(enc, params)
        src_mask = np.ones((1, len(src_ids)))
        live = [_Hyp(ids=(), logprob=0.0, steps=0, state=state0, ctx=ctx0)]
        finished: list[_Hyp] = []
        for _ in range(config.decode_cap(len(src_ids))):
            candidates: list[tuple[float, int, _Hyp, int, DecoderState, Tensor]] = []
            for k, hyp in enumerate(live):
                prev = hyp.ids[-1] if hyp.ids else BOS_ID
                out = decode_step(np.array([prev]), hyp.state, hyp.ctx, enc,
                                  src_mask, params, config)
                logp = _log_softmax(out.logits.data[0])
                top = np.argsort(-logp, kind="stable")[:beam_size]
                for tok in top:
                    candidates.append((hyp.logprob + logp[tok], k, hyp, int(tok),
                                       out.state, out.attention.context))
            # Highest score first; ties resolved by hypothesis then token order.
            candidates.sort(key=lambda c: (-c[0], c[1], c[3]))
            live = []
            for score, _, hyp, tok, state, ctx in candidates[:beam_size]:
                if tok == EOS_ID:
                    finished.append(_Hyp(hyp.ids, score, hyp.steps + 1,
                                         None, None))
                else:
                    live.append(_Hyp(hyp.ids + (tok,), score, hyp.steps + 1,
                                     state, ctx))
            if not live or len(finished) >= beam_size:
                break
    pool = finished if finished else live
    best = max(pool, key=lambda h: (h.logprob / max(1, h.steps),))
    return list(best.ids)


def score_sequence(src_ids, tgt_ids, params: ModelParams,
                   config: ModelConfig) -> tuple[float, float]:
    """Teacher-forced log-probability of a candidate translation.

    Returns (total, mean) over the emitted tokens including the closing EOS,
    matching the quantity beam search optimizes.
    """
    src_ids = np.asarray(src_ids, dtype=np.int64).reshape(-1)
    steps = list(tgt_ids) + [EOS_ID]
    with T.no_grad():
        enc = encode_batch(src_ids.reshape(1, -1),
                           np.ones((1, len(src_ids))), params, config)
        state, ctx = init_decoder(enc, params)
        src_mask = np.ones((1, len(src_ids)))
        total = 0.0
        prev = BOS_ID
        for tok in steps:
            out = decode_step(np.array([prev]), state, ctx, enc, src_mask,
                              params, config)
            state, ctx = out.state, out.attention.context
            total += float(_log_softmax(out.logits.data[0])[tok])
            prev = tok
    return total, total / len(steps)


# ---------------------------------------------------------------------------
# Checkpoint container: one JSON header line, then raw little-endian buffers
# in manifest order.
# ---------------------------------------------------------------------------

def _manifest(params: ModelParams) -> list[dict]:
    return [{"name": name, "shape": list(t.shape),
             "dtype": str(t.data.dtype)} for name, t in params.named()]


def save_checkpoint(path, params: ModelParams, config: ModelConfig,
                    extra: dict | None = None,
                    extra_arrays: dict[str, np.ndarray] | None = None) -> None:
    """Write a versioned checkpoint.

    ``extra`` lands in the JSON header (must be JSON-serializable);
    ``extra_arrays`` are appended to the manifest and buffers (used for
    optimizer moments when a training run wants to be resumable).
    """
    manifest = _manifest(params)
    buffers = [t.data for _, t in params.named()]
    for name, arr in (extra_arrays or {}).items():
        manifest.append({"name": name, "shape": list(arr.shape),
                         "dtype": str(arr.dtype)})
        buffers.append(arr)
    header = {"format_version": CHECKPOINT_VERSION,
              "config": asdict(config),
              "params": manifest,
              "extra": extra or {}}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for arr in buffers:
            fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"),
                                                      copy=False).tobytes())


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig, dict,
                                   dict[str, np.ndarray]]:
    """Read a checkpoint; returns (params, config, extra, extra_arrays)."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        header = json.loads(header_line.decode("utf-8"))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version "
                              f"{header.get('format_version')}")
        config = ModelConfig(**header["config"])
        arrays: dict[str, np.ndarray] = {}
        for entry in header["params"]:
            dtype = np.dtype(entry["dtype"]).newbyteorder("<")
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            raw = fh.read(count * dtype.itemsize)
            if len(raw) != count * dtype.itemsize:
                raise ConfigError(f"checkpoint truncated at {entry['name']}")
            arrays[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(
                entry["shape"]).astype(dtype.newbyteorder("="), copy=True)

    def take(name):
        arr = arrays.pop(name)
        return Tensor(arr, requires_grad=True, dtype=arr.dtype)

    def lstm(tag):
        return LstmParams(w_in=take(f"{tag}.w_in"), w_rec=take(f"{tag}.w_rec"),
                          bias=take(f"{tag}.bias"))

    params = ModelParams(
        src_embed=take("src_embed"), tgt_embed=take("tgt_embed"),
        enc_fwd=lstm("enc_fwd"), enc_bwd=lstm("enc_bwd"), dec=lstm("dec"),
        attention=AttentionParams(score_weight=take("attention.score_weight")),
        controller=TemperatureController(
            ctx_weight=take("controller.ctx_weight"),
            state_weight=take("controller.state_weight"),
            bound=config.temp_bound),
        bridge=take("bridge"), init_context=take("init_context"),
        readout=take("readout"), vocab_out=take("vocab_out"))
    return params, config, header.get("extra", {}), arrays
