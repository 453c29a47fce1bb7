"""Staged attention decoder with pointer copying and coverage.

One decoding step attends over the master encoder states (optionally
biased by the coverage vector), advances the decoder GRU (fusing in a
fresh slave-encoder state every K steps), produces the fixed-vocabulary
distribution, and mixes it with the attention distribution through the
generation probability to score the extended vocabulary.

States are immutable: ``advance`` returns a new :class:`DecoderState`, so
greedy decoding, beam search and teacher forcing share one step function.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .config import TrainConfig
from .corpus import EncodedExample, START_ID, STOP_ID, UNK_ID
from .encoders import (
    GruCellParams,
    SlaveGateParams,
    content_vector,
    encode_master,
    gru_step,
    slave_encode,
)



# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


@dataclass
class AttentionParams:
    v_a: Tensor               # (1, attn)
    W_a: Tensor               # (attn, decoder_hidden)
    U_a: Tensor               # (attn, 2*master_hidden)
    W_c: Tensor               # (attn, 1): per-position coverage scalar -> attn column


@dataclass
class PointerParams:
    w_c: Tensor               # (2*master_hidden, 1)
    w_h: Tensor               # (decoder_hidden, 1)
    w_y: Tensor               # (embedding, 1)
    w_d: Tensor               # (d_c, 1)
    b_g: Tensor               # (1, 1)


@dataclass
class ModelParams:
    """Every learned tensor of the model, grouped by subsystem."""

    embedding: Tensor         # (V, e), shared by both encoders and the decoder
    master_fwd: GruCellParams
    master_bwd: GruCellParams
    W_p: Tensor
    b_p: Tensor
    claims_fwd: GruCellParams
    claims_bwd: GruCellParams
    W_q: Tensor
    b_q: Tensor
    gate: SlaveGateParams
    slave_gru: GruCellParams
    dec_gru: GruCellParams
    P_f: Tensor               # (decoder_hidden, decoder_hidden + slave_hidden)
    P_0: Tensor               # (decoder_hidden, 2*master_hidden)
    attn: AttentionParams
    W_v: Tensor
    b_v: Tensor
    pointer: PointerParams
    W_d: Tensor
    b_d: Tensor

    def as_dict(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {"embedding": self.embedding}
        for name in ("master_fwd", "master_bwd", "claims_fwd", "claims_bwd",
                     "slave_gru", "dec_gru"):
            cell: GruCellParams = getattr(self, name)
            out[f"{name}.W_u"] = cell.W_u
            out[f"{name}.W_r"] = cell.W_r
            out[f"{name}.W_h"] = cell.W_h
        for name in ("W_p", "b_p", "W_q", "b_q", "P_f", "P_0", "W_v", "b_v", "W_d", "b_d"):
            out[name] = getattr(self, name)
        g = self.gate
        out.update({"gate.W_1": g.W_1, "gate.b_1": g.b_1, "gate.W_2": g.W_2,
                    "gate.b_2": g.b_2, "gate.W_s": g.W_s, "gate.W_r": g.W_r,
                    "gate.W_k": g.W_k})
        if g.W_s_untied is not None:
            out["gate.W_s_untied"] = g.W_s_untied
        a = self.attn
        out.update({"attn.v_a": a.v_a, "attn.W_a": a.W_a, "attn.U_a": a.U_a,
                    "attn.W_c": a.W_c})
        p = self.pointer
        out.update({"pointer.w_c": p.w_c, "pointer.w_h": p.w_h, "pointer.w_y": p.w_y,
                    "pointer.w_d": p.w_d, "pointer.b_g": p.b_g})
        return out

    def vocab_size(self) -> int:
        return self.embedding.shape[0]


PARAM_GROUPS = {
    "pointer": ("pointer.",),
    "coverage": ("attn.W_c",),
    "slave": ("gate.", "slave_gru.", "P_f", "W_d", "b_d"),
    "claims": ("claims_fwd.", "claims_bwd.", "W_q", "b_q", "gate.W_k"),
}


# ---------------------------------------------------------------------------
# Step primitives
# ---------------------------------------------------------------------------


def attention_scores(
    h_prev_d: Tensor,
    master_states: Tensor,
    coverage: Tensor,
    params: AttentionParams,
    use_coverage: bool = True,
    ua_states: Tensor | None = None,
) -> Tensor:
    """Pre-softmax match scores, one per source position.

    With coverage disabled (or a zero coverage vector) this is plain
    additive attention; ``ua_states`` may carry the precomputed
    ``U_a @ master_states`` since it is step-independent.
    """
    T = master_states.shape[1]
    if coverage.shape != (1, T):
        raise ShapeError(f"coverage {coverage.shape} vs {T} source positions")
    if ua_states is None:
        ua_states = ad.matmul(params.U_a, master_states)
    inner = ad.add(ua_states, ad.matmul(params.W_a, h_prev_d))
    if use_coverage:
        inner = ad.add(inner, ad.matmul(params.W_c, coverage))
    return ad.matmul(params.v_a, ad.tanh(inner))


def context_vector(a_i: Tensor, master_states: Tensor) -> Tensor:
    """Attention-weighted sum of master states."""
    if abs(a_i.data.sum() - 1.0) > 1e-6:
        raise ShapeError(f"attention weights sum to {a_i.data.sum()!r}, not 1")
    return ad.matmul(master_states, ad.transpose(a_i))


def partial_content(decoder_states: Sequence[Tensor], W_d: Tensor, b_d: Tensor) -> Tensor:
    """tanh-squashed mean of the decoded prefix; empty prefix gives tanh(b_d)."""
    if not decoder_states:
        return ad.tanh(b_d)
    return content_vector(ad.hstack_cols(list(decoder_states)), W_d, b_d)


def is_fusion_step(step: int, K: int) -> bool:
    """Steps are 1-based; the fused set is {K, 2K, ...}."""
    return step >= 1 and K >= 1 and step % K == 0


def decoder_step(
    y_emb: Tensor,
    h_prev: Tensor,
    h_m_s: Tensor | None,
    gru_d: GruCellParams,
    fusion_proj: Tensor,
    step: int | None = None,
    K: int | None = None,
) -> Tensor:
    """Advance the decoder GRU, fusing the slave state on boundary steps.

    The fused branch projects [h_prev ; slave state] back to decoder width
    before the cell. Passing ``step`` and ``K`` turns on schedule checking.
    """
    if step is not None and K is not None:
        if (h_m_s is not None) != is_fusion_step(step, K):
            raise ShapeError(
                f"slave state {'supplied' if h_m_s is not None else 'missing'} "
                f"at step {step} with K={K}"
            )
    if h_m_s is not None:
        h_prev = ad.matmul(fusion_proj, ad.concat_rows([h_prev, h_m_s]))
    return gru_step(gru_d, y_emb, h_prev)


def vocab_distribution(h_i: Tensor, c_i: Tensor, W_v: Tensor, b_v: Tensor) -> Tensor:
    return ad.softmax(ad.add(ad.matmul(W_v, ad.concat_rows([h_i, c_i])), b_v))


def generation_probability(
    c_i: Tensor, h_i: Tensor, y_emb: Tensor, C_d: Tensor, params: PointerParams
) -> Tensor:
    z = ad.matmul(ad.transpose(params.w_c), c_i)
    z = ad.add(z, ad.matmul(ad.transpose(params.w_h), h_i))
    z = ad.add(z, ad.matmul(ad.transpose(params.w_y), y_emb))
    z = ad.add(z, ad.matmul(ad.transpose(params.w_d), C_d))
    return ad.sigmoid(ad.add(z, params.b_g))


def extended_distribution(
    P_v: Tensor,
    P_p: Tensor,
    a_i: Tensor,
    spec_extended_ids: Sequence[int],
    extended_size: int,
) -> Tensor:
    """Mix generation and copying over the extended vocabulary.

    P_w(w) = P_p * P_v(w) + (1 - P_p) * sum of attention on source
    positions holding w; per-example OOV ids get zero generation mass.
    """
    if abs(a_i.data.sum() - 1.0) > 1e-6:
        raise ShapeError(f"attention weights sum to {a_i.data.sum()!r}, not 1")
    if extended_size < P_v.shape[0]:
        raise ShapeError(f"extended size {extended_size} below vocabulary {P_v.shape[0]}")
    one = ad.tensor(np.ones((1, 1), dtype=P_p.data.dtype))
    gen = ad.mul(P_p, ad.pad_rows(P_v, extended_size))
    copy = ad.mul(ad.sub(one, P_p), ad.copy_distribution(a_i, spec_extended_ids, extended_size))
    return ad.add(gen, copy)


def coverage_update(coverage: Tensor, a_i: Tensor) -> Tensor:
    if coverage.shape != a_i.shape:
        raise ShapeError(f"coverage {coverage.shape} vs attention {a_i.shape}")
    return ad.add(coverage, a_i)


# ---------------------------------------------------------------------------
# Per-example source encoding
# ---------------------------------------------------------------------------


@dataclass
class EncodedSources:
    """Everything decoding needs about one example's sources."""

    xs_master: list[Tensor]
    xs_slave: list[Tensor] | None
    states: Tensor            # (2*master_hidden, T)
    ua_states: Tensor         # (attn, T) cache of U_a @ states
    final_state: Tensor
    C_p: Tensor
    C_q: Tensor
    src_extended_ids: list[int]
    extended_size: int

    @property
    def length(self) -> int:
        return self.states.shape[1]


def _dropout(xs: list[Tensor], p: float, rng: np.random.Generator | None) -> list[Tensor]:
    if rng is None or p <= 0.0:
        return xs
    keep = 1.0 - p
    out = []
    for x in xs:
        mask = (rng.random(x.shape) < keep).astype(x.data.dtype) / keep
        out.append(ad.mul(x, ad.tensor(mask)))
    return out


def _embed(params: ModelParams, ids: Sequence[int]) -> list[Tensor]:
    return [ad.embed_row(params.embedding, i) for i in ids]


def encode_sources(
    params: ModelParams,
    cfg: TrainConfig,
    example: EncodedExample,
    rng: np.random.Generator | None = None,
) -> EncodedSources:
    """Run both encoders over one example.

    ``rng`` enables embedding dropout (training mode); each encoder draws
    its own masks. The claims content vector is a fixed zero when the
    claims pathway is disabled or this example is single-source.
    """
    if not example.spec_ids:
        raise ShapeError(f"{example.publication_number}: empty source sequence")
    xs = _embed(params, example.spec_ids)
    xs_master = _dropout(xs, cfg.dropout, rng)
    master = encode_master(params.master_fwd, params.master_bwd, xs_master,
                           params.W_p, params.b_p)

    if cfg.use_claims and cfg.use_spec and example.claims_ids:
        claims_xs = _dropout(_embed(params, example.claims_ids), cfg.dropout, rng)
        claims = encode_master(params.claims_fwd, params.claims_bwd, claims_xs,
                               params.W_q, params.b_q)
        C_q = claims.content
    else:
        C_q = ad.zeros(cfg.d_c, dtype=params.embedding.data.dtype)

    xs_slave = _dropout(xs, cfg.dropout, rng) if cfg.slave else None
    ua_states = ad.matmul(params.attn.U_a, master.stacked)
    return EncodedSources(
        xs_master=xs_master,
        xs_slave=xs_slave,
        states=master.stacked,
        ua_states=ua_states,
        final_state=master.final_state,
        C_p=master.content,
        C_q=C_q,
        src_extended_ids=list(example.spec_extended_ids),
        extended_size=params.vocab_size() + len(example.oov_words),
    )


# ---------------------------------------------------------------------------
# Decode state machine
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DecoderState:
    """Immutable snapshot between steps; ``step`` is the next 1-based step."""

    h_d: Tensor
    step: int
    coverage: Tensor
    dec_states: tuple[Tensor, ...]
    C_d: Tensor

    @property
    def emitted(self) -> int:
        return self.step - 1


@dataclass
class StepOutput:
    dist: Tensor              # extended distribution, or P_v when pointer is off
    attention: Tensor         # (1, T)
    p_gen: Tensor | None
    coverage_before: Tensor
    fused: bool
    state: DecoderState


def initial_state(params: ModelParams, cfg: TrainConfig, src: EncodedSources) -> DecoderState:
    h0 = ad.matmul(params.P_0, src.final_state)
    dtype = params.embedding.data.dtype
    coverage = ad.tensor(np.zeros((1, src.length), dtype=dtype))
    C_d = ad.tanh(params.b_d) if cfg.slave else ad.zeros(cfg.d_c, dtype=dtype)
    return DecoderState(h_d=h0, step=1, coverage=coverage, dec_states=(), C_d=C_d)


def _current_content(
    params: ModelParams, cfg: TrainConfig, src: EncodedSources, state: DecoderState
) -> Tensor:
    if not cfg.cd_from_source:
        return partial_content(state.dec_states, params.W_d, params.b_d)
    L = min(len(state.dec_states), src.length)
    if L == 0:
        return ad.tanh(params.b_d)
    return content_vector(ad.slice_cols(src.states, 0, L), params.W_d, params.b_d)


def advance(
    params: ModelParams,
    cfg: TrainConfig,
    src: EncodedSources,
    state: DecoderState,
    y_emb: Tensor,
) -> StepOutput:
    """Run one decoder step from ``state`` on input embedding ``y_emb``."""
    fused = cfg.slave and is_fusion_step(state.step, cfg.K)
    C_d = state.C_d
    h_m_s = None
    if fused:
        C_d = _current_content(params, cfg, src, state)
        slave = slave_encode(src.xs_slave, src.states, src.C_p, src.C_q, C_d,
                             params.gate, params.slave_gru)
        h_m_s = slave.final_state

    scores = attention_scores(state.h_d, src.states, state.coverage, params.attn,
                              use_coverage=cfg.coverage, ua_states=src.ua_states)
    a_i = ad.softmax(scores)
    h_i = decoder_step(y_emb, state.h_d, h_m_s, params.dec_gru, params.P_f,
                       step=state.step, K=cfg.K if cfg.slave else None)
    c_i = context_vector(a_i, src.states)
    P_v = vocab_distribution(h_i, c_i, params.W_v, params.b_v)
    if cfg.pointer:
        p_gen = generation_probability(c_i, h_i, y_emb, C_d, params.pointer)
        dist = extended_distribution(P_v, p_gen, a_i, src.src_extended_ids,
                                     src.extended_size)
    else:
        p_gen = None
        dist = P_v
    new_state = DecoderState(
        h_d=h_i,
        step=state.step + 1,
        coverage=coverage_update(state.coverage, a_i),
        dec_states=state.dec_states + (h_i,),
        C_d=C_d,
    )
    return StepOutput(dist=dist, attention=a_i, p_gen=p_gen,
                      coverage_before=state.coverage, fused=fused, state=new_state)


# ---------------------------------------------------------------------------
# Decode trace
# ---------------------------------------------------------------------------


@dataclass
class TraceStep:
    step: int
    emitted_id: int
    fused: bool
    p_gen: float | None
    checksum: float
    attention: list[float]
    coverage: list[float]     # after this step's update

    def to_json(self) -> str:
        return json.dumps(self.__dict__)


@dataclass
class DecodeTrace:
    steps: list[TraceStep] = field(default_factory=list)

    def fused_steps(self) -> list[int]:
        return [s.step for s in self.steps if s.fused]

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for s in self.steps:
                fh.write(s.to_json())
                fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "DecodeTrace":
        steps = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    steps.append(TraceStep(**json.loads(line)))
        return cls(steps)


@dataclass
class DecodeResult:
    ids: list[int]            # extended-vocabulary ids, STOP excluded
    trace: DecodeTrace
    log_prob: float


def _record(out: StepOutput, step: int, emitted: int) -> TraceStep:
    return TraceStep(
        step=step,
        emitted_id=emitted,
        fused=out.fused,
        p_gen=None if out.p_gen is None else out.p_gen.item(),
        checksum=float(out.dist.data.sum()),
        attention=[float(v) for v in out.attention.data[0]],
        coverage=[float(v) for v in out.state.coverage.data[0]],
    )


def _input_embedding(params: ModelParams, token_id: int) -> Tensor:
    if token_id >= params.vocab_size():
        token_id = UNK_ID
    return ad.embed_row(params.embedding, token_id)


def _greedy(params: ModelParams, cfg: TrainConfig, src: EncodedSources) -> DecodeResult:
    state = initial_state(params, cfg, src)
    prev = START_ID
    ids: list[int] = []
    trace = DecodeTrace()
    log_prob = 0.0
    for step in range(1, cfg.max_out + 1):
        out = advance(params, cfg, src, state, _input_embedding(params, prev))
        emitted = int(np.argmax(out.dist.data[:, 0]))
        log_prob += float(np.log(max(out.dist.data[emitted, 0], 1e-300)))
        trace.steps.append(_record(out, step, emitted))
        state = out.state
        if emitted == STOP_ID:
            break
        ids.append(emitted)
        prev = emitted
    return DecodeResult(ids=ids, trace=trace, log_prob=log_prob)


@dataclass
class _Hypothesis:
    state: DecoderState
    prev: int
    ids: tuple[int, ...]
    log_prob: float
    steps: tuple[TraceStep, ...]
    finished: bool = False


def _beam(params: ModelParams, cfg: TrainConfig, src: EncodedSources, width: int) -> DecodeResult:
    if width < 1:
        raise ValueError(f"beam width must be >= 1, got {width}")
    live = [_Hypothesis(initial_state(params, cfg, src), START_ID, (), 0.0, ())]
    finished: list[_Hypothesis] = []
    for step in range(1, cfg.max_out + 1):
        candidates: list[_Hypothesis] = []
        for hyp in live:
            out = advance(params, cfg, src, hyp.state, _input_embedding(params, hyp.prev))
            probs = out.dist.data[:, 0]
            top = np.argsort(probs)[::-1][:width]
            for tok in top:
                tok = int(tok)
                with np.errstate(divide="ignore"):
                    lp = hyp.log_prob + float(np.log(probs[tok]))
                cand = _Hypothesis(
                    state=out.state,
                    prev=tok,
                    ids=hyp.ids if tok == STOP_ID else hyp.ids + (tok,),
                    log_prob=lp,
                    steps=hyp.steps + (_record(out, step, tok),),
                    finished=tok == STOP_ID,
                )
                candidates.append(cand)
        candidates.sort(key=lambda h: h.log_prob, reverse=True)
        live = []
        for cand in candidates:
            if cand.finished:
                finished.append(cand)
            elif len(live) < width:
                live.append(cand)
        if not live or len(finished) >= width:
            break
    pool = finished or live
    best = max(pool, key=lambda h: h.log_prob)
    return DecodeResult(ids=list(best.ids), trace=DecodeTrace(list(best.steps)),
                        log_prob=best.log_prob)


def decode_sequence(
    example: EncodedExample,
    params: ModelParams,
    cfg: TrainConfig,
    mode: str = "greedy",
    beam_width: int = 4,
) -> DecodeResult:
    """Decode one example to extended-vocabulary ids plus a full audit trace.

    Emission stops at STOP or after ``cfg.max_out`` tokens. The staging
    period, pointer/coverage/slave switches and all widths come from
    ``cfg``; decoding never applies dropout.
    """
    src = encode_sources(params, cfg, example, rng=None)
    if mode == "greedy":
        return _greedy(params, cfg, src)
    if mode == "beam":
        return _beam(params, cfg, src, beam_width)
    raise ValueError(f"unknown decode mode {mode!r}")
