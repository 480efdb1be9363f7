"""LSTM cell, multi-layer stacking, and directional sequence execution.

The cell computes, for input x_t and previous state (h_{t-1}, c_{t-1}):

    i = sigmoid(W_xi x + W_hi h + b_i)        input gate
    f = sigmoid(W_xf x + W_hf h + b_f)        forget gate
    o = sigmoid(W_xo x + W_ho h + b_o)        output gate
    g = tanh   (W_xc x + W_hc h + b_c)        input modulation
    c_t = f * c_{t-1} + i * g
    h_t = o * tanh(c_t)

cell_step is one fused tape op with a hand-derived backward; it accepts a
single vector x [d] or a batch of rows x [B, d]. Correctness is pinned by
the scalar-loop oracle and finite-difference tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Parameter, Tensor, affine, record_op, stable_sigmoid, _ensure_finite
from .errors import ContractError, DimensionError

GATES = ("i", "f", "o", "c")


@dataclass
class LSTMCellParams:
    """The eight weight matrices and four biases of one LSTM layer."""

    w_xi: Parameter
    w_hi: Parameter
    b_i: Parameter
    w_xf: Parameter
    w_hf: Parameter
    b_f: Parameter
    w_xo: Parameter
    w_ho: Parameter
    b_o: Parameter
    w_xc: Parameter
    w_hc: Parameter
    b_c: Parameter

    def __post_init__(self):
        p, d = self.w_xi.shape
        for gate in GATES:
            wx = getattr(self, f"w_x{gate}")
            wh = getattr(self, f"w_h{gate}")
            b = getattr(self, f"b_{gate}")
            if wx.shape != (p, d) or wh.shape != (p, p) or b.shape != (p,):
                raise ContractError(
                    f"inconsistent cell parameter shapes for gate {gate}: "
                    f"{wx.shape}, {wh.shape}, {b.shape}")

    @property
    def input_size(self) -> int:
        return self.w_xi.shape[1]

    @property
    def hidden_size(self) -> int:
        return self.w_xi.shape[0]

    def parameters(self) -> list[Parameter]:
        out = []
        for gate in GATES:
            out += [getattr(self, f"w_x{gate}"), getattr(self, f"w_h{gate}"), getattr(self, f"b_{gate}")]
        return out


def glorot(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    fan_out, fan_in = shape[0], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_cell_params(prefix: str, input_size: int, hidden_size: int,
                     rng: np.random.Generator, dtype, forget_bias: float = 1.0) -> LSTMCellParams:
    """Glorot-uniform weights; zero biases except the forget gate."""
    kw = {}
    for gate in GATES:
        kw[f"w_x{gate}"] = Parameter(f"{prefix}/w_x{gate}", glorot(rng, (hidden_size, input_size), dtype))
        kw[f"w_h{gate}"] = Parameter(f"{prefix}/w_h{gate}", glorot(rng, (hidden_size, hidden_size), dtype))
        bias = np.full(hidden_size, forget_bias if gate == "f" else 0.0, dtype=dtype)
        kw[f"b_{gate}"] = Parameter(f"{prefix}/b_{gate}", bias)
    return LSTMCellParams(**kw)


@dataclass
class LSTMState:
    """Per-layer hidden and cell vectors (batched rows when training)."""

    h: list[Tensor]
    c: list[Tensor]

    def __post_init__(self):
        if len(self.h) != len(self.c):
            raise ContractError(f"state has {len(self.h)} hidden but {len(self.c)} cell tensors")

    @property
    def depth(self) -> int:
        return len(self.h)


def cell_step(params: LSTMCellParams, x: Tensor, h_prev: Tensor, c_prev: Tensor):
    """One LSTM step; returns (h_t, c_t). Fused forward/backward tape op."""
    d, p = params.input_size, params.hidden_size
    xd, hd, cd = x.data, h_prev.data, c_prev.data
    batched = xd.ndim == 2
    if xd.shape[-1] != d or hd.shape[-1] != p or cd.shape[-1] != p or hd.shape != cd.shape \
            or xd.ndim not in (1, 2) or hd.ndim != xd.ndim \
            or (batched and xd.shape[0] != hd.shape[0]):
        raise DimensionError(
            f"cell_step: x {xd.shape}, h {hd.shape}, c {cd.shape} do not fit "
            f"input_size {d}, hidden_size {p}")

    x2 = xd if batched else xd[None, :]
    h2 = hd if batched else hd[None, :]
    c2 = cd if batched else cd[None, :]
    wxi, whi = params.w_xi.value.data, params.w_hi.value.data
    wxf, whf = params.w_xf.value.data, params.w_hf.value.data
    wxo, who = params.w_xo.value.data, params.w_ho.value.data
    wxc, whc = params.w_xc.value.data, params.w_hc.value.data

    i = stable_sigmoid(x2 @ wxi.T + h2 @ whi.T + params.b_i.value.data)
    f = stable_sigmoid(x2 @ wxf.T + h2 @ whf.T + params.b_f.value.data)
    o = stable_sigmoid(x2 @ wxo.T + h2 @ who.T + params.b_o.value.data)
    g = np.tanh(x2 @ wxc.T + h2 @ whc.T + params.b_c.value.data)
    c = f * c2 + i * g
    tc = np.tanh(c)
    h = o * tc
    _ensure_finite("cell_step", c)
    _ensure_finite("cell_step", h)
    h_t = Tensor(h if batched else h[0])
    c_t = Tensor(c if batched else c[0])

    def back(gh, gc):
        gh2 = np.zeros_like(h) if gh is None else (gh if batched else gh[None, :])
        dc = gh2 * o * (1.0 - tc * tc)
        if gc is not None:
            dc = dc + (gc if batched else gc[None, :])
        d_ai = (dc * g) * i * (1.0 - i)
        d_af = (dc * c2) * f * (1.0 - f)
        d_ao = (gh2 * tc) * o * (1.0 - o)
        d_ag = (dc * i) * (1.0 - g * g)
        dx = d_ai @ wxi + d_af @ wxf + d_ao @ wxo + d_ag @ wxc
        dh = d_ai @ whi + d_af @ whf + d_ao @ who + d_ag @ whc
        dcp = dc * f
        pairs = [
            (params.w_xi.value, d_ai.T @ x2), (params.w_hi.value, d_ai.T @ h2), (params.b_i.value, d_ai.sum(0)),
            (params.w_xf.value, d_af.T @ x2), (params.w_hf.value, d_af.T @ h2), (params.b_f.value, d_af.sum(0)),
            (params.w_xo.value, d_ao.T @ x2), (params.w_ho.value, d_ao.T @ h2), (params.b_o.value, d_ao.sum(0)),
            (params.w_xc.value, d_ag.T @ x2), (params.w_hc.value, d_ag.T @ h2), (params.b_c.value, d_ag.sum(0)),
            (x, dx if batched else dx[0]),
            (h_prev, dh if batched else dh[0]),
            (c_prev, dcp if batched else dcp[0]),
        ]
        return pairs

    record_op((h_t, c_t), back)
    return h_t, c_t


@dataclass
class StackedLSTM:
    """Layered cells; layer l > 0 consumes the hidden state of layer l-1."""

    layers: list[LSTMCellParams] = field(default_factory=list)

    def __post_init__(self):
        for lower, upper in zip(self.layers, self.layers[1:]):
            if upper.input_size != lower.hidden_size:
                raise ContractError(
                    f"layer chaining broken: input {upper.input_size} after hidden {lower.hidden_size}")

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def hidden_size(self) -> int:
        return self.layers[-1].hidden_size

    @property
    def input_size(self) -> int:
        return self.layers[0].input_size

    def step(self, x: Tensor, state: LSTMState):
        return stacked_step(self, x, state)

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]


def make_stack(prefix: str, input_size: int, hidden_size: int, depth: int,
               rng: np.random.Generator, dtype, forget_bias: float = 1.0) -> StackedLSTM:
    layers = []
    for l in range(depth):
        d_in = input_size if l == 0 else hidden_size
        layers.append(init_cell_params(f"{prefix}/l{l}", d_in, hidden_size, rng, dtype, forget_bias))
    return StackedLSTM(layers)


def zero_state(stack: StackedLSTM, dtype, batch: int | None = None) -> LSTMState:
    shape = (stack.hidden_size,) if batch is None else (batch, stack.hidden_size)
    zeros = lambda: Tensor(np.zeros(shape, dtype=dtype))
    return LSTMState([zeros() for _ in range(stack.depth)], [zeros() for _ in range(stack.depth)])


def stacked_step(stack: StackedLSTM, x: Tensor, prev: LSTMState):
    """One step through all layers; returns (top-layer h_t, next state)."""
    if prev.depth != stack.depth:
        raise ContractError(f"state depth {prev.depth} does not match stack depth {stack.depth}")
    new_h, new_c = [], []
    inp = x
    for layer, h, c in zip(stack.layers, prev.h, prev.c):
        h_t, c_t = cell_step(layer, inp, h, c)
        new_h.append(h_t)
        new_c.append(c_t)
        inp = h_t
    return inp, LSTMState(new_h, new_c)


def run_sequence(stack, inputs: list[Tensor], init: LSTMState, order: str = "forward"):
    """Run the stack over the inputs in the given direction.

    order="reversed" consumes inputs[N-1], ..., inputs[0]; outputs[k] always
    corresponds to the k-th consumed input. Returns (outputs, final state).
    `stack` only needs a .step(x, state) method, so tests can instrument it.
    """
    if not inputs:
        raise ContractError("run_sequence: empty input sequence")
    if order not in ("forward", "reversed"):
        raise ContractError(f"run_sequence: unknown order {order!r}")
    seq = inputs if order == "forward" else list(reversed(inputs))
    outputs = []
    state = init
    for x in seq:
        top, state = stack.step(x, state)
        outputs.append(top)
    return outputs, state


def make_projections(prefix: str, src_size: int, dst_size: int, depth: int,
                     rng: np.random.Generator, dtype):
    """Per-layer (P_h, P_c) pairs mapping a state of size src to size dst.

    Returns None when the sizes already match: the handoff is then the
    identity and adds no parameters.
    """
    if src_size == dst_size:
        return None
    pairs = []
    for l in range(depth):
        ph = Parameter(f"{prefix}/l{l}/h", glorot(rng, (dst_size, src_size), dtype))
        pc = Parameter(f"{prefix}/l{l}/c", glorot(rng, (dst_size, src_size), dtype))
        pairs.append((ph, pc))
    return pairs


def project_state(src: LSTMState, projections) -> LSTMState:
    """Apply h' = P_h h, c' = P_c c per layer; identity when projections is None."""
    if projections is None:
        return src
    if len(projections) != src.depth:
        raise ContractError(f"{len(projections)} projection pairs for state depth {src.depth}")
    h = [affine(hl, ph) for hl, (ph, _) in zip(src.h, projections)]
    c = [affine(cl, pc) for cl, (_, pc) in zip(src.c, projections)]
    return LSTMState(h, c)
