"""LSTM (no peepholes) and guided LSTM cells with backpropagation through time.

One step of the guided cell, for guidance vector ``g`` held fixed over the
whole sequence::

    i = sigmoid(W_ix x + W_im m_prev + W_iq g + b_i)
    f = sigmoid(W_fx x + W_fm m_prev + W_fq g + b_f)
    o = sigmoid(W_ox x + W_om m_prev + W_oq g + b_o)
    c = f * c_prev + i * tanh(W_cx x + W_cm m_prev + W_cq g + b_c)
    m = o * c

The plain LSTM drops the ``W_.q g`` terms. Biases are optional; with
``biases=False`` the step is exactly the bias-free recurrence above.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from glstm.errors import ShapeError
from glstm.numkit import sigmoid

GATES = ("i", "f", "o", "c")


@dataclass(kw_only=True)
class LstmParams:
    W_ix: np.ndarray
    W_im: np.ndarray
    W_fx: np.ndarray
    W_fm: np.ndarray
    W_ox: np.ndarray
    W_om: np.ndarray
    W_cx: np.ndarray
    W_cm: np.ndarray
    b_i: np.ndarray | None = None
    b_f: np.ndarray | None = None
    b_o: np.ndarray | None = None
    b_c: np.ndarray | None = None

    def __post_init__(self):
        hidden, inp = self.W_ix.shape
        for gate in GATES:
            wx, wm = getattr(self, f"W_{gate}x"), getattr(self, f"W_{gate}m")
            if wx.shape != (hidden, inp):
                raise ShapeError(f"W_{gate}x has shape {wx.shape}, expected {(hidden, inp)}")
            if wm.shape != (hidden, hidden):
                raise ShapeError(f"W_{gate}m has shape {wm.shape}, expected {(hidden, hidden)}")
        present = [getattr(self, f"b_{g}") is not None for g in GATES]
        if any(present) and not all(present):
            raise ShapeError("either all four gate biases or none must be given")
        for gate in GATES:
            b = getattr(self, f"b_{gate}")
            if b is not None and b.shape != (hidden,):
                raise ShapeError(f"b_{gate} has shape {b.shape}, expected {(hidden,)}")

    @property
    def hidden_dim(self) -> int:
        return self.W_ix.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_ix.shape[1]

    @property
    def has_biases(self) -> bool:
        return self.b_i is not None

    @property
    def guidance_dim(self) -> int | None:
        return None

    def named(self) -> dict[str, np.ndarray]:
        """Parameter arrays by field name, in declaration order (views, not copies)."""
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}

    def zeros_like(self):
        return type(self)(**{k: np.zeros_like(v) for k, v in self.named().items()})

    def copy(self):
        return type(self)(**{k: v.copy() for k, v in self.named().items()})

    def lstm_part(self) -> "LstmParams":
        return LstmParams(**{k: v for k, v in self.named().items() if not k.endswith("q")})


@dataclass(kw_only=True)
class GlstmParams(LstmParams):
    W_iq: np.ndarray
    W_fq: np.ndarray
    W_oq: np.ndarray
    W_cq: np.ndarray

    def __post_init__(self):
        super().__post_init__()
        gdim = self.W_iq.shape[1]
        for gate in GATES:
            wq = getattr(self, f"W_{gate}q")
            if wq.shape != (self.hidden_dim, gdim):
                raise ShapeError(f"W_{gate}q has shape {wq.shape}, expected {(self.hidden_dim, gdim)}")

    @property
    def guidance_dim(self) -> int:
        return self.W_iq.shape[1]


@dataclass
class CellState:
    c: np.ndarray
    m: np.ndarray

    @classmethod
    def zeros(cls, hidden: int) -> "CellState":
        return cls(np.zeros(hidden), np.zeros(hidden))


@dataclass
class StepCache:
    x: np.ndarray
    g: np.ndarray | None
    c_prev: np.ndarray
    m_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    o: np.ndarray
    cand: np.ndarray
    c: np.ndarray
    m: np.ndarray


@dataclass
class SequenceGrads:
    params: LstmParams
    inputs: list[np.ndarray]
    guidance: np.ndarray | None
    init: CellState


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    s = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-s, s, size=shape)


def init_lstm(input_dim: int, hidden: int, rng: np.random.Generator, biases: bool = True) -> LstmParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights; forget bias starts at 1."""
    kw = {}
    for gate in GATES:
        kw[f"W_{gate}x"] = _uniform(rng, (hidden, input_dim), input_dim)
        kw[f"W_{gate}m"] = _uniform(rng, (hidden, hidden), hidden)
    if biases:
        for gate in GATES:
            kw[f"b_{gate}"] = np.full(hidden, 1.0 if gate == "f" else 0.0)
    return LstmParams(**kw)


def init_glstm(
    input_dim: int,
    hidden: int,
    guidance_dim: int,
    rng: np.random.Generator,
    biases: bool = True,
    zero_guidance: bool = False,
) -> GlstmParams:
    # LSTM weights are drawn first so that equal seeds give equal shared weights.
    base = init_lstm(input_dim, hidden, rng, biases).named()
    for gate in GATES:
        if zero_guidance:
            base[f"W_{gate}q"] = np.zeros((hidden, guidance_dim))
        else:
            base[f"W_{gate}q"] = _uniform(rng, (hidden, guidance_dim), guidance_dim)
    return GlstmParams(**base)


def _check_step(p: LstmParams, x: np.ndarray, prev: CellState) -> None:
    if x.shape != (p.input_dim,):
        raise ShapeError(f"input has shape {x.shape}, cell expects {(p.input_dim,)}")
    if prev.c.shape != (p.hidden_dim,) or prev.m.shape != (p.hidden_dim,):
        raise ShapeError(f"state shapes {prev.c.shape}/{prev.m.shape}, cell expects {(p.hidden_dim,)}")


def _step(p: LstmParams, x, g, prev: CellState) -> tuple[CellState, StepCache]:
    x = np.asarray(x, dtype=np.float64)
    _check_step(p, x, prev)
    pre = {}
    for gate in GATES:
        a = getattr(p, f"W_{gate}x") @ x + getattr(p, f"W_{gate}m") @ prev.m
        if g is not None:
            a = a + getattr(p, f"W_{gate}q") @ g
        b = getattr(p, f"b_{gate}")
        if b is not None:
            a = a + b
        pre[gate] = a
    i, f, o = sigmoid(pre["i"]), sigmoid(pre["f"]), sigmoid(pre["o"])
    cand = np.tanh(pre["c"])
    c = f * prev.c + i * cand
    m = o * c
    return CellState(c, m), StepCache(x, g, prev.c, prev.m, i, f, o, cand, c, m)


def lstm_step(p: LstmParams, x, prev: CellState) -> tuple[CellState, StepCache]:
    return _step(p, x, None, prev)


def glstm_step(p: GlstmParams, x, g, prev: CellState) -> tuple[CellState, StepCache]:
    g = np.asarray(g, dtype=np.float64)
    if not isinstance(p, GlstmParams):
        raise ShapeError("glstm_step needs GlstmParams")
    if g.shape != (p.guidance_dim,):
        raise ShapeError(f"guidance has shape {g.shape}, cell expects {(p.guidance_dim,)}")
    return _step(p, x, g, prev)


def step(p: LstmParams, x, g, prev: CellState) -> tuple[CellState, StepCache]:
    """Dispatch to :func:`glstm_step` or :func:`lstm_step` by parameter type."""
    if isinstance(p, GlstmParams):
        if g is None:
            raise ShapeError("guided cell needs a guidance vector")
        return glstm_step(p, x, g, prev)
    if g is not None:
        raise ShapeError("plain LSTM cell does not take guidance")
    return lstm_step(p, x, prev)


def sequence_forward(
    p: LstmParams,
    inputs: Sequence[np.ndarray],
    g: np.ndarray | None = None,
    init: CellState | None = None,
) -> tuple[list[np.ndarray], list[StepCache]]:
    if len(inputs) == 0:
        raise ShapeError("sequence_forward needs at least one input")
    state = init if init is not None else CellState.zeros(p.hidden_dim)
    if g is not None:
        g = np.asarray(g, dtype=np.float64)
    outputs, cache = [], []
    for x in inputs:
        state, entry = step(p, x, g, state)
        outputs.append(state.m)
        cache.append(entry)
    return outputs, cache


def sequence_backward(
    p: LstmParams,
    cache: Sequence[StepCache],
    grad_outputs: Sequence[np.ndarray],
    grad_final: CellState | None = None,
) -> SequenceGrads:
    """Exact gradients of ``sum_l <grad_outputs[l], m_l>`` (plus the final-state term).

    ``grad_final`` is the upstream gradient on the last (c, m); it lets a long
    sequence be differentiated in pieces.
    """
    if len(cache) != len(grad_outputs):
        raise ShapeError(f"{len(cache)} cached steps but {len(grad_outputs)} output gradients")
    grads = p.zeros_like()
    guided = isinstance(p, GlstmParams)
    hidden = p.hidden_dim
    dc_next = np.zeros(hidden) if grad_final is None else grad_final.c.copy()
    dm_next = np.zeros(hidden) if grad_final is None else grad_final.m.copy()
    dg = np.zeros(p.guidance_dim) if guided else None
    dinputs: list[np.ndarray] = [None] * len(cache)  # type: ignore[list-item]

    for t in range(len(cache) - 1, -1, -1):
        s = cache[t]
        dm = grad_outputs[t] + dm_next
        do = dm * s.c
        dc = dm * s.o + dc_next
        da = {
            "i": dc * s.cand * s.i * (1.0 - s.i),
            "f": dc * s.c_prev * s.f * (1.0 - s.f),
            "o": do * s.o * (1.0 - s.o),
            "c": dc * s.i * (1.0 - s.cand * s.cand),
        }
        dx = np.zeros(p.input_dim)
        dm_prev = np.zeros(hidden)
        for gate in GATES:
            a = da[gate]
            getattr(grads, f"W_{gate}x")[...] += np.outer(a, s.x)
            getattr(grads, f"W_{gate}m")[...] += np.outer(a, s.m_prev)
            if p.has_biases:
                getattr(grads, f"b_{gate}")[...] += a
            dx += getattr(p, f"W_{gate}x").T @ a
            dm_prev += getattr(p, f"W_{gate}m").T @ a
            if guided:
                getattr(grads, f"W_{gate}q")[...] += np.outer(a, s.g)
                dg += getattr(p, f"W_{gate}q").T @ a
        dinputs[t] = dx
        dc_next = dc * s.f
        dm_next = dm_prev

    return SequenceGrads(grads, dinputs, dg, CellState(dc_next, dm_next))
