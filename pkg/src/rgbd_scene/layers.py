"""Spatial pyramid pooling and the gate-product LSTM cell.

The LSTM follows the recurrence

    i = sigmoid(W_ix x + W_im m)
    f = sigmoid(W_fx x + W_fm m)
    o = sigmoid(W_ox x + W_om m)
    c' = f * c + i * tanh(W_cx x + W_cm m)
    m' = o * c'

with no bias terms and no squashing of the cell before the output gate.
"""

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, _as_batch, sigmoid


@dataclass(frozen=True)
class SppSpec:
    levels: tuple = ((1, 1), (2, 2), (3, 3))

    def __post_init__(self):
        levels = tuple((int(bh), int(bw)) for bh, bw in self.levels)
        if not levels or any(bh < 1 or bw < 1 for bh, bw in levels):
            raise ValueError(f"SPP levels must be non-empty with bins >= 1, got {self.levels}")
        object.__setattr__(self, "levels", levels)

    @property
    def bins(self):
        return sum(bh * bw for bh, bw in self.levels)

    def output_width(self, channels):
        return channels * self.bins


def _bin_edges(size, nbins):
    return [(i * size) // nbins for i in range(nbins + 1)]


def spp_forward(x, spec=SppSpec(), return_argmax=False):
    """Multi-level max pooling to a fixed-length vector.

    Input ``C x H x W`` gives a flat vector; ``N x C x H x W`` gives ``N x D``.
    Within a level the output is ordered channel-major then bin row-major.
    """
    xb, single = _as_batch(x, 4)
    n, c, h, w = xb.shape
    maxbh = max(bh for bh, _ in spec.levels)
    maxbw = max(bw for _, bw in spec.levels)
    if h < maxbh or w < maxbw:
        raise ShapeError(f"SPP needs at least {maxbh}x{maxbw} pixels, got {h}x{w}")
    if not return_argmax:
        outs = []
        for bh, bw in spec.levels:
            ys, xs = _bin_edges(h, bh), _bin_edges(w, bw)
            lvl = np.empty((n, c, bh * bw), dtype=xb.dtype)
            for i in range(bh):
                for j in range(bw):
                    lvl[:, :, i * bw + j] = xb[:, :, ys[i]:ys[i + 1], xs[j]:xs[j + 1]].max(axis=(2, 3))
            outs.append(lvl.reshape(n, -1))
        out = np.concatenate(outs, axis=1)
        return out[0] if single else out
    outs, args = [], []
    for bh, bw in spec.levels:
        ys, xs = _bin_edges(h, bh), _bin_edges(w, bw)
        lvl = np.empty((n, c, bh * bw), dtype=xb.dtype)
        lvl_arg = np.empty((n, c, bh * bw), dtype=np.int64)
        for i in range(bh):
            for j in range(bw):
                region = xb[:, :, ys[i]:ys[i + 1], xs[j]:xs[j + 1]].reshape(n, c, -1)
                a = region.argmax(axis=-1)
                lvl[:, :, i * bw + j] = np.take_along_axis(region, a[..., None], -1)[..., 0]
                rw = xs[j + 1] - xs[j]
                lvl_arg[:, :, i * bw + j] = (ys[i] + a // rw) * w + xs[j] + a % rw
        outs.append(lvl.reshape(n, -1))
        args.append(lvl_arg.reshape(n, -1))
    out = np.concatenate(outs, axis=1)
    arg = np.concatenate(args, axis=1)
    return (out[0], arg[0]) if single else (out, arg)


def spp_backward(dout, x, spec=SppSpec()):
    xb, single = _as_batch(x, 4)
    n, c, h, w = xb.shape
    dob = dout[None] if single else dout
    _, arg = spp_forward(xb, spec, return_argmax=True)
    # flat output index -> channel
    chan = np.concatenate([np.repeat(np.arange(c), bh * bw) for bh, bw in spec.levels])
    flat_idx = chan[None, :] * (h * w) + arg
    flat_idx = flat_idx + (np.arange(n) * (c * h * w))[:, None]
    dx = np.bincount(flat_idx.ravel(), weights=dob.ravel(), minlength=n * c * h * w)
    dx = dx.astype(dob.dtype).reshape(n, c, h, w)
    return dx[0] if single else dx


GATE_NAMES = ("W_ix", "W_im", "W_fx", "W_fm", "W_ox", "W_om", "W_cx", "W_cm")


@dataclass
class LstmWeights:
    W_ix: np.ndarray
    W_im: np.ndarray
    W_fx: np.ndarray
    W_fm: np.ndarray
    W_ox: np.ndarray
    W_om: np.ndarray
    W_cx: np.ndarray
    W_cm: np.ndarray

    def __post_init__(self):
        hidden, width = self.W_ix.shape
        for name in GATE_NAMES:
            m = getattr(self, name)
            want = (hidden, width) if name.endswith("x") else (hidden, hidden)
            if m.shape != want:
                raise ShapeError(f"{name} has shape {m.shape}, expected {want}")

    @property
    def hidden(self):
        return self.W_ix.shape[0]

    @property
    def input_width(self):
        return self.W_ix.shape[1]

    @classmethod
    def zeros(cls, input_width, hidden, dtype=np.float32):
        return cls(**{
            n: np.zeros((hidden, input_width if n.endswith("x") else hidden), dtype=dtype)
            for n in GATE_NAMES
        })

    @classmethod
    def init(cls, input_width, hidden, rng, dtype=np.float32):
        mats = {}
        for n in GATE_NAMES:
            fan_in = input_width if n.endswith("x") else hidden
            lim = np.sqrt(6.0 / (fan_in + hidden))
            mats[n] = rng.uniform(-lim, lim, size=(hidden, fan_in)).astype(dtype)
        return cls(**mats)

    def as_dict(self):
        return {n: getattr(self, n) for n in GATE_NAMES}


@dataclass
class LstmState:
    c: np.ndarray
    m: np.ndarray
    cache: dict = field(default=None, repr=False, compare=False)

    @classmethod
    def zeros(cls, hidden, batch=None, dtype=np.float32):
        shape = (hidden,) if batch is None else (batch, hidden)
        return cls(np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype))


def lstm_step(x_t, prev, w):
    """One recurrence step; ``x_t`` is ``D`` or ``N x D``."""
    x_t = np.asarray(x_t)
    if x_t.shape[-1] != w.input_width:
        raise ShapeError(f"input width {x_t.shape[-1]} does not match LSTM input width {w.input_width}")
    if prev.m.shape[-1] != w.hidden or prev.c.shape != prev.m.shape:
        raise ShapeError(f"state shapes c={prev.c.shape} m={prev.m.shape} do not match hidden {w.hidden}")
    if x_t.shape[:-1] != prev.m.shape[:-1]:
        raise ShapeError(f"batch mismatch between input {x_t.shape} and state {prev.m.shape}")
    m = prev.m
    i = sigmoid(x_t @ w.W_ix.T + m @ w.W_im.T)
    f = sigmoid(x_t @ w.W_fx.T + m @ w.W_fm.T)
    o = sigmoid(x_t @ w.W_ox.T + m @ w.W_om.T)
    g = np.tanh(x_t @ w.W_cx.T + m @ w.W_cm.T)
    c = f * prev.c + i * g
    m_new = o * c
    cache = dict(x=x_t, m_prev=m, c_prev=prev.c, i=i, f=f, o=o, g=g)
    return LstmState(c, m_new, cache)


def lstm_unroll(xs, w, initial=None):
    """Run the cell over a sequence from the zero state.

    ``xs`` is a list (or array) of per-step inputs, each ``D`` or ``N x D``.
    Returns ``(final_state, states)`` with one state per step.
    """
    if len(xs) == 0:
        raise ValueError("cannot unroll an LSTM over an empty sequence")
    x0 = np.asarray(xs[0])
    if initial is None:
        batch = None if x0.ndim == 1 else x0.shape[0]
        initial = LstmState.zeros(w.hidden, batch, dtype=np.result_type(x0.dtype, w.W_ix.dtype))
    state = initial
    states = []
    for x_t in xs:
        state = lstm_step(x_t, state, w)
        states.append(state)
    return state, states


def lstm_backward(states, w, dm=None, dm_final=None):
    """Backpropagation through time.

    ``dm`` optionally holds one upstream gradient per step on ``m_t``;
    ``dm_final`` is added to the last step.  Returns ``(grads, dxs)`` where
    ``grads`` maps gate-matrix names to gradients and ``dxs`` lists the
    gradient for each step input.
    """
    T = len(states)
    grads = {n: np.zeros_like(getattr(w, n)) for n in GATE_NAMES}
    dxs = [None] * T
    last = states[-1]
    dm_next = np.zeros_like(last.m) if dm_final is None else np.array(dm_final, dtype=last.m.dtype)
    dc_next = np.zeros_like(last.c)
    for t in range(T - 1, -1, -1):
        st = states[t]
        ca = st.cache
        dmt = dm_next + (dm[t] if dm is not None and dm[t] is not None else 0)
        do = dmt * st.c
        dc = dmt * ca["o"] + dc_next
        df = dc * ca["c_prev"]
        di = dc * ca["g"]
        dg = dc * ca["i"]
        dc_next = dc * ca["f"]
        # pre-activation gradients
        ai = di * ca["i"] * (1 - ca["i"])
        af = df * ca["f"] * (1 - ca["f"])
        ao = do * ca["o"] * (1 - ca["o"])
        ag = dg * (1 - ca["g"] ** 2)
        x, mp = ca["x"], ca["m_prev"]
        dx = 0
        dm_prev = 0
        for a, wx, wm in ((ai, "W_ix", "W_im"), (af, "W_fx", "W_fm"), (ao, "W_ox", "W_om"), (ag, "W_cx", "W_cm")):
            if a.ndim == 1:
                grads[wx] += np.outer(a, x)
                grads[wm] += np.outer(a, mp)
            else:
                grads[wx] += a.T @ x
                grads[wm] += a.T @ mp
            dx = dx + a @ getattr(w, wx)
            dm_prev = dm_prev + a @ getattr(w, wm)
        dxs[t] = dx
        dm_next = dm_prev
    return grads, dxs


def lstm_weights_from(params, prefix):
    return LstmWeights(**{n: params[f"{prefix}.{n}"] for n in GATE_NAMES})


__all__ = [
    "SppSpec", "spp_forward", "spp_backward", "LstmWeights", "LstmState",
    "lstm_step", "lstm_unroll", "lstm_backward", "GATE_NAMES",
]

