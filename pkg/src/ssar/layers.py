"""Network building blocks: instance norm, sequence pooling, LSTM, residual blocks."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .autodiff import (
    Tensor,
    add,
    bias_add,
    concat,
    conv2d,
    conv3d,
    default_dtype,
    getitem,
    matmul,
    mul,
    reduce,
    relu,
    reshape,
    sigmoid,
    stack,
    tanh,
)

IN_EPS = 1e-5


def uniform_init(rng: np.random.Generator, shape, fan_in: int, name: str | None = None) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=default_dtype(), name=name)


def zeros_param(shape, name: str | None = None, fill: float = 0.0) -> Tensor:
    return Tensor(np.full(shape, fill), requires_grad=True, dtype=default_dtype(), name=name)


# instance normalization -----------------------------------------------------------


def instance_norm(x: Tensor, eps: float = IN_EPS, channel_axis: int = 0) -> Tensor:
    """Normalize each channel of each instance over its spatial extent.

    All axes after ``channel_axis`` are treated as spatial, so ``[C,H,W]``
    uses the default and a batched ``[N,C,H,W]`` passes ``channel_axis=1``.
    Population variance; no affine parameters.
    """
    if eps <= 0:
        raise ValueError(f"instance_norm: eps must be positive, got {eps}")
    axes = tuple(range(channel_axis + 1, x.ndim))
    if not axes:
        raise ValueError(f"instance_norm: no spatial axes after channel axis {channel_axis} in shape {x.shape}")
    xd = x.data
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    y = xc * inv_std

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gy = (g * y).mean(axis=axes, keepdims=True)
        return (inv_std * (g - gm - y * gy),)

    return Tensor._from_op(y, (x,), backward, "instance_norm")


# sequence pooling -----------------------------------------------------------------


def seq_avg_pool(features: Tensor, k: int) -> Tensor:
    """Average non-overlapping runs of ``k`` consecutive feature vectors.

    ``features`` is ``[n, d]``; the result is ``[n // k, d]``.  The trailing
    ``n % k`` vectors are dropped.
    """
    if isinstance(features, (list, tuple)):
        features = stack(features, axis=0)
    if k < 1:
        raise ValueError(f"pooling kernel must be positive, got {k}")
    n, d = features.shape
    if n < k:
        raise ValueError(f"sequence shorter than pooling kernel (n={n}, k={k})")
    m = n // k
    head = features if m * k == n else getitem(features, slice(0, m * k))
    return reduce("mean", reshape(head, (m, k, d)), axes=1)


# LSTM -------------------------------------------------------------------------------


@dataclass
class LstmParams:
    W_ix: Tensor
    W_fx: Tensor
    W_ox: Tensor
    W_gx: Tensor
    W_ih: Tensor
    W_fh: Tensor
    W_oh: Tensor
    W_gh: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor
    b_g: Tensor

    def __post_init__(self):
        hidden, inp = self.W_ix.shape
        for f in fields(self):
            t = getattr(self, f.name)
            want = {"x": (hidden, inp), "h": (hidden, hidden)}.get(f.name[-1], (hidden,))
            if t.shape != want:
                raise ValueError(f"LstmParams.{f.name}: expected shape {want}, got {t.shape}")

    @property
    def hidden(self) -> int:
        return self.W_ix.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_ix.shape[1]

    @classmethod
    def init(cls, input_size: int, hidden: int, rng: np.random.Generator, forget_bias: float = 1.0) -> "LstmParams":
        """Uniform(+-1/sqrt(hidden)) weights, zero biases except ``b_f``."""
        kw = {}
        for f in fields(cls):
            if f.name.startswith("W"):
                cols = input_size if f.name.endswith("x") else hidden
                kw[f.name] = uniform_init(rng, (hidden, cols), hidden, name=f.name)
            else:
                kw[f.name] = zeros_param((hidden,), name=f.name, fill=forget_bias if f.name == "b_f" else 0.0)
        return cls(**kw)

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return [(prefix + f.name, getattr(self, f.name)) for f in fields(self)]


@dataclass
class LstmState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, hidden: int) -> "LstmState":
        return cls(Tensor(np.zeros(hidden)), Tensor(np.zeros(hidden)))


def lstm_step(p_t: Tensor, state: LstmState, params: LstmParams) -> LstmState:
    """One LSTM cell update with input, forget, output gates and tanh candidate."""
    if p_t.shape != (params.input_size,):
        raise ValueError(f"lstm_step: input shape {p_t.shape} does not match ({params.input_size},)")
    if state.h.shape != (params.hidden,) or state.c.shape != (params.hidden,):
        raise ValueError(f"lstm_step: state shapes {state.h.shape}/{state.c.shape} do not match hidden={params.hidden}")
    h = state.h

    def pre(Wx, Wh, b):
        return bias_add(add(matmul(Wx, p_t), matmul(Wh, h)), b)

    i = sigmoid(pre(params.W_ix, params.W_ih, params.b_i))
    f = sigmoid(pre(params.W_fx, params.W_fh, params.b_f))
    o = sigmoid(pre(params.W_ox, params.W_oh, params.b_o))
    g = tanh(pre(params.W_gx, params.W_gh, params.b_g))
    c = add(mul(f, state.c), mul(i, g))
    return LstmState(h=mul(o, tanh(c)), c=c)


def lstm_sequence(seq: Tensor, params: LstmParams, reverse: bool = False) -> list[Tensor]:
    """Hidden states for every step of ``seq`` ([m, d]); aligned to input order."""
    m = seq.shape[0]
    state = LstmState.zeros(params.hidden)
    hs: list[Tensor] = [None] * m  # type: ignore[list-item]
    order = range(m - 1, -1, -1) if reverse else range(m)
    for t in order:
        state = lstm_step(getitem(seq, t), state, params)
        hs[t] = state.h
    return hs


def bilstm(seq: Tensor, params_fwd: LstmParams, params_bwd: LstmParams) -> Tensor:
    """Bidirectional LSTM over ``[m, d]``; returns ``[m, 2*hidden]``.

    Row ``t`` is ``concat(h_fwd[t], h_bwd[t])`` where the backward direction
    reads the sequence from the end and its outputs are realigned.
    """
    if seq.ndim != 2 or seq.shape[0] == 0:
        raise ValueError(f"bilstm: expected a non-empty [m, d] sequence, got {seq.shape}")
    fwd = lstm_sequence(seq, params_fwd)
    bwd = lstm_sequence(seq, params_bwd, reverse=True)
    return stack([concat([hf, hb]) for hf, hb in zip(fwd, bwd)], axis=0)


# dense ------------------------------------------------------------------------------


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``W @ x + b`` for a vector ``x``."""
    if W.ndim != 2 or x.shape != (W.shape[1],) or b.shape != (W.shape[0],):
        raise ValueError(f"linear: incompatible shapes x={x.shape}, W={W.shape}, b={b.shape}")
    return bias_add(matmul(W, x), b)


# residual blocks ------------------------------------------------------------------


class BasicBlock:
    """Two 3x3 (or 3x3x3) convolutions with instance norm, ReLU and a skip path.

    Operates on batched ``[N, C, *spatial]`` tensors.  When the stride or the
    channel count changes, the skip path is a strided 1x1 convolution followed
    by instance norm.
    """

    def __init__(self, c_in: int, c_out: int, stride: int, rng: np.random.Generator, nd: int = 2):
        self.c_in, self.c_out, self.stride, self.nd = c_in, c_out, stride, nd
        k3 = (3,) * nd
        self.conv1 = uniform_init(rng, (c_out, c_in) + k3, c_in * 3**nd)
        self.conv2 = uniform_init(rng, (c_out, c_out) + k3, c_out * 3**nd)
        self.proj = None
        if stride != 1 or c_in != c_out:
            self.proj = uniform_init(rng, (c_out, c_in) + (1,) * nd, c_in)

    def _conv(self, x, w, stride, pad):
        return (conv2d if self.nd == 2 else conv3d)(x, w, stride, pad)

    def skip(self, x: Tensor) -> Tensor:
        if self.proj is None:
            return x
        return instance_norm(self._conv(x, self.proj, self.stride, 0), channel_axis=1)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != self.nd + 2 or x.shape[1] != self.c_in:
            raise ValueError(f"BasicBlock expects [N, {self.c_in}, ...] input, got {x.shape}")
        y = relu(instance_norm(self._conv(x, self.conv1, self.stride, 1), channel_axis=1))
        y = instance_norm(self._conv(y, self.conv2, 1, 1), channel_axis=1)
        s = self.skip(x)
        if y.shape != s.shape:
            raise ValueError(f"residual shape mismatch: branch {y.shape} vs skip {s.shape}")
        return relu(add(y, s))

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = [(prefix + "conv1", self.conv1), (prefix + "conv2", self.conv2)]
        if self.proj is not None:
            out.append((prefix + "proj", self.proj))
        return out


def basic_block_forward(x: Tensor, block: BasicBlock) -> Tensor:
    return block(x)
