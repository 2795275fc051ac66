"""Neural-network layers on the autodiff engine, plus Adam and grad checking.

Convolutions follow the cross-correlation convention used by deep-learning
frameworks (no kernel flip), unlike the true convolutions in :mod:`dsp`.
All layers operate on single examples: conv inputs are [T, F, C], recurrent
inputs are [T, D].
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import (
    Tensor,
    accumulate,
    as_tensor,
    backward,
    concat,
    no_grad,
    row,
    sigmoid,
    stack_rows,
    tanh,
    _node,
)
from .errors import ShapeMismatch


def _same_padding(size, k, s):
    out = -(-size // s)  # ceil
    return max((out - 1) * s + k - size, 0)


def conv2d(x, kernel, bias=None, stride=(1, 1), padding="valid") -> Tensor:
    """2-D convolution: [T,F,Cin] with kernel [kT,kF,Cin,Cout] -> [T',F',Cout].

    "valid" gives T' = (T-kT)/sT + 1; "same" gives T' = ceil(T/sT) via
    symmetric zero padding. Bias, when given, is one value per output channel.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeMismatch(f"conv2d on {x.data.shape} with {kernel.data.shape}")
    k_t, k_f, c_in, c_out = kernel.data.shape
    if x.data.shape[2] != c_in:
        raise ShapeMismatch(f"input has {x.data.shape[2]} channels, kernel wants {c_in}")
    s_t, s_f = stride

    if padding == "same":
        pad_t = _same_padding(x.data.shape[0], k_t, s_t)
        pad_f = _same_padding(x.data.shape[1], k_f, s_f)
        pads = ((pad_t // 2, pad_t - pad_t // 2), (pad_f // 2, pad_f - pad_f // 2), (0, 0))
    elif padding == "valid":
        pads = ((0, 0), (0, 0), (0, 0))
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xd = np.pad(x.data, pads) if padding == "same" else x.data

    t_in, f_in = xd.shape[:2]
    if k_t > t_in or k_f > f_in:
        raise ShapeMismatch(f"kernel {k_t}x{k_f} larger than padded input {t_in}x{f_in}")
    t_out = (t_in - k_t) // s_t + 1
    f_out = (f_in - k_f) // s_f + 1

    # per-frequency stride-1 stacks: rows (t+i)*F+f form contiguous blocks of
    # the flattened input, so each tap is a single copy-free GEMM
    fast = k_f == 1 and s_t == 1 and s_f == 1 and padding == "valid"
    if fast:
        x2 = xd.reshape(-1, c_in)
        rows = t_out * f_in
        out2 = np.zeros((rows, c_out))
        for i in range(k_t):
            out2 += x2[i * f_in:i * f_in + rows] @ kernel.data[i, 0]
        out = out2.reshape(t_out, f_out, c_out)
    else:
        out = np.zeros((t_out, f_out, c_out))
        for i in range(k_t):
            for j in range(k_f):
                piece = xd[i:i + s_t * (t_out - 1) + 1:s_t,
                           j:j + s_f * (f_out - 1) + 1:s_f]
                out += (piece.reshape(-1, c_in) @ kernel.data[i, j]) \
                    .reshape(t_out, f_out, c_out)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data

    def bwd(g):
        g2 = np.ascontiguousarray(g.reshape(-1, c_out))
        gk = np.zeros_like(kernel.data)
        if fast:
            x2 = xd.reshape(-1, c_in)
            rows = t_out * f_in
            gx2 = np.zeros_like(x2)
            for i in range(k_t):
                gk[i, 0] = x2[i * f_in:i * f_in + rows].T @ g2
                gx2[i * f_in:i * f_in + rows] += g2 @ kernel.data[i, 0].T
            gx = gx2.reshape(xd.shape)
        else:
            gx = np.zeros_like(xd)
            for i in range(k_t):
                for j in range(k_f):
                    piece = xd[i:i + s_t * (t_out - 1) + 1:s_t,
                               j:j + s_f * (f_out - 1) + 1:s_f]
                    gk[i, j] = piece.reshape(-1, c_in).T @ g2
                    gx[i:i + s_t * (t_out - 1) + 1:s_t,
                       j:j + s_f * (f_out - 1) + 1:s_f] += \
                        (g2 @ kernel.data[i, j].T).reshape(t_out, f_out, c_in)
        accumulate(kernel, gk)
        if padding == "same":
            (p0, _), (q0, _), _ = pads
            gx = gx[p0:p0 + x.data.shape[0], q0:q0 + x.data.shape[1]]
        accumulate(x, gx)
        if bias is not None:
            accumulate(bias, g.sum(axis=(0, 1)))

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _node(out, parents, bwd)


def conv2d_transposed(x, kernel, bias=None, stride=(1, 1)) -> Tensor:
    """Adjoint of a valid strided conv2d, used by decoder layers.

    Kernel is [kT,kF,Cin,Cout] as in conv2d; here the input carries Cout
    channels and the result carries Cin, with T' = (T-1)*sT + kT, so that
    <conv2d(a,k), b> == <a, conv2d_transposed(b,k)>.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeMismatch(f"conv2d_transposed on {x.data.shape} with {kernel.data.shape}")
    k_t, k_f, c_in, c_out = kernel.data.shape
    if x.data.shape[2] != c_out:
        raise ShapeMismatch(f"input has {x.data.shape[2]} channels, kernel wants {c_out}")
    s_t, s_f = stride
    t_in, f_in = x.data.shape[:2]
    t_out = (t_in - 1) * s_t + k_t
    f_out = (f_in - 1) * s_f + k_f

    x2 = x.data.reshape(-1, c_out)
    out = np.zeros((t_out, f_out, c_in))
    for i in range(k_t):
        for j in range(k_f):
            out[i:i + s_t * (t_in - 1) + 1:s_t, j:j + s_f * (f_in - 1) + 1:s_f] += \
                (x2 @ kernel.data[i, j].T).reshape(t_in, f_in, c_in)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data

    def bwd(g):
        gx = np.zeros_like(x.data)
        gk = np.zeros_like(kernel.data)
        for i in range(k_t):
            for j in range(k_f):
                gslice = g[i:i + s_t * (t_in - 1) + 1:s_t, j:j + s_f * (f_in - 1) + 1:s_f]
                g2 = gslice.reshape(-1, c_in)
                gx += (g2 @ kernel.data[i, j]).reshape(x.data.shape)
                gk[i, j] = g2.T @ x2
        accumulate(x, gx)
        accumulate(kernel, gk)
        if bias is not None:
            accumulate(bias, g.sum(axis=(0, 1)))

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _node(out, parents, bwd)


def linear(x, weight, bias=None) -> Tensor:
    """x @ W (+ b) for x of shape [D] or [T, D]."""
    out = x @ weight if isinstance(x, Tensor) else as_tensor(x) @ as_tensor(weight)
    if bias is not None:
        out = out + bias
    return out


class GruParams:
    """Weights for one GRU direction.

    Gate order: update (z), reset (r), candidate (h). Input weights `w*` are
    [Din, Dh], recurrent weights `u*` are [Dh, Dh], biases are [Dh].
    """

    FIELDS = ("wz", "uz", "bz", "wr", "ur", "br", "wh", "uh", "bh")

    def __init__(self, d_in, d_hidden, rng=None):
        self.d_in = d_in
        self.d_hidden = d_hidden
        if rng is None:
            weights = {f: np.zeros(self._shape(f)) for f in self.FIELDS}
        else:
            weights = {}
            for f in self.FIELDS:
                if f.startswith("w"):
                    weights[f] = glorot_uniform(rng, (d_in, d_hidden))
                elif f.startswith("u"):
                    weights[f] = orthogonal(rng, d_hidden)
                else:
                    weights[f] = np.zeros(d_hidden)
        for f in self.FIELDS:
            setattr(self, f, Tensor(weights[f]))

    def _shape(self, f):
        if f.startswith("w"):
            return (self.d_in, self.d_hidden)
        if f.startswith("u"):
            return (self.d_hidden, self.d_hidden)
        return (self.d_hidden,)

    def tensors(self):
        return [getattr(self, f) for f in self.FIELDS]


def gru_cell(x_t, h_prev, params: GruParams) -> Tensor:
    """One GRU step with a fused hand-written backward rule.

        z = sigmoid(x Wz + h Uz + bz)
        r = sigmoid(x Wr + h Ur + br)
        c = tanh(x Wh + (r*h) Uh + bh)
        h' = (1 - z) * h + z * c
    """
    x_t, h_prev = as_tensor(x_t), as_tensor(h_prev)
    p = params
    if x_t.data.shape != (p.d_in,) or h_prev.data.shape != (p.d_hidden,):
        raise ShapeMismatch(
            f"gru_cell got x {x_t.data.shape}, h {h_prev.data.shape}, "
            f"wants ({p.d_in},), ({p.d_hidden},)")
    x, h = x_t.data, h_prev.data
    z = _sigmoid(x @ p.wz.data + h @ p.uz.data + p.bz.data)
    r = _sigmoid(x @ p.wr.data + h @ p.ur.data + p.br.data)
    rh = r * h
    c = np.tanh(x @ p.wh.data + rh @ p.uh.data + p.bh.data)
    out = (1.0 - z) * h + z * c

    def bwd(g):
        gz = g * (c - h)
        gc = g * z
        gh = g * (1.0 - z)
        gac = gc * (1.0 - c * c)
        grh = gac @ p.uh.data.T
        gr = grh * h
        gh = gh + grh * r
        gar = gr * r * (1.0 - r)
        gaz = gz * z * (1.0 - z)
        accumulate(p.bz, gaz)
        accumulate(p.br, gar)
        accumulate(p.bh, gac)
        accumulate(p.wz, np.outer(x, gaz))
        accumulate(p.wr, np.outer(x, gar))
        accumulate(p.wh, np.outer(x, gac))
        accumulate(p.uz, np.outer(h, gaz))
        accumulate(p.ur, np.outer(h, gar))
        accumulate(p.uh, np.outer(rh, gac))
        accumulate(x_t, gaz @ p.wz.data.T + gar @ p.wr.data.T + gac @ p.wh.data.T)
        accumulate(h_prev, gh + gaz @ p.uz.data.T + gar @ p.ur.data.T)

    return _node(out, (x_t, h_prev, *p.tensors()), bwd)


def _sigmoid(a):
    return 1.0 / (1.0 + np.exp(-a))


def bigru_layer(seq, fwd_params: GruParams, bwd_params: GruParams) -> Tensor:
    """Bidirectional GRU over [T, Din] -> [T, 2*Dh].

    The forward pass runs left to right, the backward pass right to left;
    their hidden states are concatenated per step.
    """
    seq = as_tensor(seq)
    steps = seq.data.shape[0]
    xs = [row(seq, t) for t in range(steps)]

    h = Tensor(np.zeros(fwd_params.d_hidden))
    forward_states = []
    for t in range(steps):
        h = gru_cell(xs[t], h, fwd_params)
        forward_states.append(h)

    h = Tensor(np.zeros(bwd_params.d_hidden))
    backward_states = [None] * steps
    for t in reversed(range(steps)):
        h = gru_cell(xs[t], h, bwd_params)
        backward_states[t] = h

    return stack_rows([concat([forward_states[t], backward_states[t]])
                       for t in range(steps)])


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def glorot_uniform(rng, shape, fan_in=None, fan_out=None) -> np.ndarray:
    if fan_in is None:
        fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[:-1]))
    if fan_out is None:
        fan_out = shape[-1]
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape)


def orthogonal(rng, n) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

class Adam:
    """Adam with bias correction; moments live alongside each parameter."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ShapeMismatch(f"gradient {g.shape} vs parameter {p.data.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------

def grad_check(loss_fn, params, eps=1e-5, max_entries=20000, rng=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    `loss_fn` rebuilds the scalar loss from the live parameter tensors. When
    the parameters hold more than `max_entries` scalars a seeded random
    subset is probed instead. The error denominator is
    max(|analytic|, |numeric|, 1e-8).
    """
    for p in params:
        p.grad = None
    backward(loss_fn())
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]

    entries = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    if len(entries) > max_entries:
        rng = rng or np.random.default_rng(0)
        picks = rng.choice(len(entries), size=max_entries, replace=False)
        entries = [entries[k] for k in sorted(picks)]

    worst = 0.0
    with no_grad():
        for i, j in entries:
            p = params[i]
            orig = p.data.flat[j]
            p.data.flat[j] = orig + eps
            f_plus = float(loss_fn().data)
            p.data.flat[j] = orig - eps
            f_minus = float(loss_fn().data)
            p.data.flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = analytic[i].flat[j]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
