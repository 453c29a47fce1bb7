"""Encoder stack: GRU cell, bidirectional master encoder, gated slave encoder.

The master encoder reads the specification token embeddings in both
directions and summarizes them into per-position states plus a content
vector. The slave encoder re-reads the same embeddings through a
unidirectional GRU whose per-position update is gated by an importance
weight computed from the master state, the two source content vectors and
the decoder's running content vector.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass
class GruCellParams:
    """Update/reset/candidate maps, each (hidden, input_dim + hidden)."""

    W_u: Tensor
    W_r: Tensor
    W_h: Tensor

    @property
    def hidden(self) -> int:
        return self.W_u.shape[0]


def _one(like: Tensor) -> Tensor:
    return ad.tensor(np.ones((1, 1), dtype=like.data.dtype))


def gru_step(params: GruCellParams, x_t: Tensor, h_prev: Tensor) -> Tensor:
    """One GRU update.

    u = sigmoid(W_u [x, h]), r = sigmoid(W_r [x, h]),
    h' = tanh(W_h [x, r*h]), h_new = (1 - u) * h + u * h'.
    The previous state is carried by (1 - u): u -> 0 keeps the old state.
    """
    if x_t.shape[1] != 1 or h_prev.shape[1] != 1:
        raise ShapeError(f"gru_step expects column vectors, got {x_t.shape}, {h_prev.shape}")
    xh = ad.concat_rows([x_t, h_prev])
    u = ad.sigmoid(ad.matmul(params.W_u, xh))
    r = ad.sigmoid(ad.matmul(params.W_r, xh))
    cand = ad.tanh(ad.matmul(params.W_h, ad.concat_rows([x_t, ad.mul(r, h_prev)])))
    return ad.add(ad.mul(ad.sub(_one(u), u), h_prev), ad.mul(u, cand))


def content_vector(states: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """tanh(W . mean_t(states) + b) for states stacked column-wise (d, T)."""
    T = states.shape[1]
    if T == 0:
        raise ShapeError("content_vector needs at least one state")
    mean = ad.matmul(states, ad.tensor(np.full((T, 1), 1.0 / T, dtype=states.data.dtype)))
    return ad.tanh(ad.add(ad.matmul(W, mean), b))


@dataclass
class MasterEncoderOutput:
    states: list[Tensor]      # h_t = [forward ; backward], each (2*hidden, 1)
    stacked: Tensor           # the same states as one (2*hidden, T) matrix
    content: Tensor           # (d_c, 1)
    final_state: Tensor       # states[-1]


def encode_unidirectional(params: GruCellParams, xs: Sequence[Tensor], h0: Tensor) -> list[Tensor]:
    states = []
    h = h0
    for x in xs:
        h = gru_step(params, x, h)
        states.append(h)
    return states


def encode_master(
    fwd: GruCellParams,
    bwd: GruCellParams,
    xs: Sequence[Tensor],
    W_content: Tensor,
    b_content: Tensor,
) -> MasterEncoderOutput:
    """Bi-GRU pass over embedded tokens; initial states are zero vectors."""
    if not xs:
        raise ShapeError("encode_master needs a non-empty sequence")
    dtype = xs[0].data.dtype
    zero_f = ad.zeros(fwd.hidden, dtype=dtype)
    zero_b = ad.zeros(bwd.hidden, dtype=dtype)
    forward = encode_unidirectional(fwd, xs, zero_f)
    backward_rev = encode_unidirectional(bwd, list(reversed(xs)), zero_b)
    backward = list(reversed(backward_rev))
    states = [ad.concat_rows([f, b]) for f, b in zip(forward, backward)]
    stacked = ad.hstack_cols(states)
    content = content_vector(stacked, W_content, b_content)
    return MasterEncoderOutput(states, stacked, content, states[-1])


@dataclass
class SlaveGateParams:
    """Importance-gate parameters.

    ``W_s`` is shared between its two bilinear appearances (against the
    specification content and against the decoder content); pass
    ``W_s_untied`` to break the tie for comparison runs.
    """

    W_1: Tensor               # (gate_hidden, 2*master_hidden + 3*d_c)
    b_1: Tensor               # (gate_hidden, 1)
    W_2: Tensor               # (1, gate_hidden)
    b_2: Tensor               # (1, 1)
    W_s: Tensor               # (2*master_hidden, d_c)
    W_r: Tensor               # (d_c, d_c)
    W_k: Tensor               # (d_c, 1)
    W_s_untied: Tensor | None = None

    def second_bilinear(self) -> Tensor:
        return self.W_s_untied if self.W_s_untied is not None else self.W_s


def _gate_terms(
    H: Tensor, C_p: Tensor, C_q: Tensor, C_d: Tensor, gp: SlaveGateParams
) -> Tensor:
    """Pre-sigmoid gate logits for every column of H at once, shape (1, T)."""
    T = H.shape[1]
    ones_row = ad.tensor(np.ones((1, T), dtype=H.data.dtype))
    z = ad.concat_rows(
        [
            H,
            ad.matmul(C_p, ones_row),
            ad.matmul(C_q, ones_row),
            ad.matmul(C_d, ones_row),
        ]
    )
    mlp = ad.matmul(gp.W_2, ad.tanh(ad.add(ad.matmul(gp.W_1, z), gp.b_1)))
    spec_bilinear = ad.matmul(ad.transpose(ad.matmul(gp.W_s, C_p)), H)
    dec_bilinear = ad.matmul(ad.transpose(ad.matmul(gp.second_bilinear(), C_d)), H)
    cross = ad.neg(ad.matmul(ad.transpose(C_p), ad.matmul(gp.W_r, C_d)))
    claims_term = ad.matmul(ad.transpose(gp.W_k), C_q)
    logits = ad.add(mlp, ad.add(spec_bilinear, dec_bilinear))
    logits = ad.add(logits, ad.add(cross, ad.add(claims_term, gp.b_2)))
    return logits


def slave_gate_alpha(
    h_t_p: Tensor, C_p: Tensor, C_q: Tensor, C_d: Tensor, gp: SlaveGateParams
) -> Tensor:
    """Importance weight for one source position, a (1, 1) value in (0, 1)."""
    return ad.sigmoid(_gate_terms(h_t_p, C_p, C_q, C_d, gp))


def slave_gate_alphas(
    master_states: Tensor, C_p: Tensor, C_q: Tensor, C_d: Tensor, gp: SlaveGateParams
) -> Tensor:
    """All position gates in one pass over the stacked (2*hidden, T) states."""
    return ad.sigmoid(_gate_terms(master_states, C_p, C_q, C_d, gp))


@dataclass
class SlaveEncoderOutput:
    final_state: Tensor       # (slave_hidden, 1)
    alphas: Tensor            # (1, T)


def slave_encode(
    xs: Sequence[Tensor],
    master_states: Tensor,
    C_p: Tensor,
    C_q: Tensor,
    C_d: Tensor,
    gate_params: SlaveGateParams,
    gru_params: GruCellParams,
) -> SlaveEncoderOutput:
    """Gated re-encoding pass over the specification embeddings.

    h_t = (1 - alpha_t) * h_{t-1} + alpha_t * GRU(x_t, h_{t-1}), starting
    from a fresh zero state on every pass.
    """
    T = master_states.shape[1]
    if len(xs) != T:
        raise ShapeError(f"{len(xs)} embeddings vs {T} master states")
    alphas = slave_gate_alphas(master_states, C_p, C_q, C_d, gate_params)
    h = ad.zeros(gru_params.hidden, dtype=master_states.data.dtype)
    for t, x in enumerate(xs):
        a = ad.slice_cols(alphas, t, t + 1)
        g = gru_step(gru_params, x, h)
        h = ad.add(ad.mul(ad.sub(_one(a), a), h), ad.mul(a, g))
    return SlaveEncoderOutput(h, alphas)
