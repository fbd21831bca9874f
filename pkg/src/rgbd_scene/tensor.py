"""Dense layer primitives with explicit forward and backward passes.

Tensors are plain :class:`numpy.ndarray` objects.  Image-like operations take
either a single sample ``C x H x W`` or a batch ``N x C x H x W``; the batch
axis is the only extra axis ever accepted, nothing is broadcast implicitly.
All operations preserve the floating dtype of their inputs so that gradient
checks can run in float64 while training runs in float32.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes do not compose."""


def _as_batch(x, ndim):
    x = np.asarray(x)
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ShapeError(f"expected a {ndim - 1}-d sample or {ndim}-d batch, got shape {x.shape}")
    return x, False


def conv_output_size(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


def _im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    # rows ordered (n, y, x); columns ordered (c, ky, kx) to match weight layout
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def conv2d_forward(x, weights, bias, stride=1, pad=0, return_cols=False):
    """Cross-correlate ``x`` with ``weights`` and add ``bias``.

    Parameters
    ----------
    x : ndarray, shape (C, H, W) or (N, C, H, W)
    weights : ndarray, shape (K, C, kh, kw)
    bias : ndarray, shape (K,)
    stride, pad : int
        Zero padding is applied symmetrically.
    return_cols : bool
        Also return the unfolded input, which :func:`conv2d_backward` can reuse.

    Returns
    -------
    ndarray, shape (K, H', W') or (N, K, H', W')
    """
    xb, single = _as_batch(x, 4)
    weights = np.asarray(weights)
    bias = np.asarray(bias)
    if weights.ndim != 4:
        raise ShapeError(f"conv weights must be K x C x kh x kw, got {weights.shape}")
    k, c, kh, kw = weights.shape
    if xb.shape[1] != c:
        raise ShapeError(
            f"input has {xb.shape[1]} channels but weights expect {c} (weights {weights.shape}, input {np.shape(x)})"
        )
    if bias.shape != (k,):
        raise ShapeError(f"bias shape {bias.shape} does not match {k} kernels")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be >= 1 and pad >= 0")
    h, w = xb.shape[2:]
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    cols, ho, wo = _im2col(xb, kh, kw, stride, pad)
    out = cols @ weights.reshape(k, -1).T + bias
    out = out.reshape(xb.shape[0], ho, wo, k).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    out = out[0] if single else out
    return (out, cols) if return_cols else out


def conv2d_backward(dout, x, weights, stride=1, pad=0, cols=None, need_dx=True):
    """Gradients of :func:`conv2d_forward` given the upstream gradient.

    Returns ``(dx, dweights, dbias)``; ``dx`` is None when ``need_dx`` is false.
    """
    xb, single = _as_batch(x, 4)
    db_, _ = _as_batch(dout, 4)
    k, c, kh, kw = weights.shape
    n, _, h, w = xb.shape
    ho, wo = db_.shape[2:]
    if cols is None:
        cols, _, _ = _im2col(xb, kh, kw, stride, pad)
    dmat = db_.transpose(0, 2, 3, 1).reshape(-1, k)
    dweights = (dmat.T @ cols).reshape(weights.shape)
    dbias = dmat.sum(axis=0)
    if not need_dx:
        return None, dweights, dbias
    dcols = (dmat @ weights.reshape(k, -1)).reshape(n, ho, wo, c, kh, kw)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
    dx = np.ascontiguousarray(dx)
    return (dx[0] if single else dx), dweights, dbias


def _pool_windows(xb, window, stride):
    n, c, h, w = xb.shape
    if window > h or window > w:
        raise ShapeError(f"pooling window {window} larger than spatial extent {h}x{w}")
    win = sliding_window_view(xb, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.reshape(*win.shape[:4], window * window)


def maxpool_forward(x, window, stride):
    """Max pooling over square windows (no padding, partial windows dropped)."""
    xb, single = _as_batch(x, 4)
    if stride < 1:
        raise ValueError("stride must be >= 1")
    out = _pool_windows(xb, window, stride).max(axis=-1)
    return out[0] if single else out


def maxpool_backward(dout, x, window, stride):
    """Route ``dout`` to the first arg-max of every window."""
    xb, single = _as_batch(x, 4)
    db_, _ = _as_batch(dout, 4)
    win = _pool_windows(xb, window, stride)
    arg = win.argmax(axis=-1)
    ho, wo = arg.shape[2:]
    dx = np.zeros_like(xb, dtype=db_.dtype)
    for idx in range(window * window):
        i, j = divmod(idx, window)
        dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.where(arg == idx, db_, 0)
    return dx[0] if single else dx


def relu(x):
    return np.maximum(x, 0)


def relu_backward(dout, x):
    return np.where(x > 0, dout, 0).astype(dout.dtype, copy=False)


def fc_forward(x, weights, bias):
    """Affine map ``weights @ x + bias`` for a vector ``n`` or batch ``N x n``."""
    x = np.asarray(x)
    weights = np.asarray(weights)
    if weights.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != weights.shape[1]:
        raise ShapeError(f"fc input {x.shape} does not match weights {weights.shape}")
    if np.shape(bias) != (weights.shape[0],):
        raise ShapeError(f"fc bias {np.shape(bias)} does not match weights {weights.shape}")
    return x @ weights.T + bias


def fc_backward(dout, x, weights):
    """Returns ``(dx, dweights, dbias)``."""
    dx = dout @ weights
    if dout.ndim == 1:
        return dx, np.outer(dout, x), dout.copy()
    return dx, dout.T @ x, dout.sum(axis=0)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, label, sample_weight=None):
    """Softmax probabilities and cross-entropy loss.

    ``logits`` is ``K`` with an integer ``label`` or ``N x K`` with an array of
    labels; the batch loss is the mean over samples (weighted by
    ``sample_weight`` when given, still divided by N).

    Returns ``(loss, probs, dlogits)``.
    """
    logits = np.asarray(logits)
    single = logits.ndim == 1
    lb = logits[None] if single else logits
    labels = np.atleast_1d(np.asarray(label))
    k = lb.shape[1]
    if labels.shape != (lb.shape[0],):
        raise ShapeError(f"{labels.shape[0]} labels for {lb.shape[0]} logit rows")
    if labels.dtype.kind not in "iu" or labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must be integers in [0, {k}), got {labels}")
    z = lb - lb.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(lb.shape[0])
    nll = logsum - z[rows, labels]
    probs = np.exp(z - logsum[:, None])
    grad = probs.copy()
    grad[rows, labels] -= 1
    if sample_weight is not None:
        sw = np.asarray(sample_weight, dtype=lb.dtype)
        nll = nll * sw
        grad *= sw[:, None]
    n = lb.shape[0]
    loss = float(nll.sum() / n)
    grad /= n
    if single:
        return loss, probs[0], grad[0]
    return loss, probs, grad


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def finite_diff_grad(f, x, eps=1e-3):
    """Central-difference gradient of a scalar function at ``x``.

    ``x`` is evaluated in float64; ``f`` must not keep references to it.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value while perturbing coordinate {i}")
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(a, b, floor=1e-8):
    """Max elementwise ``|a-b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def tensor_to_bytes(t):
    """Row-major little-endian float32 payload."""
    return np.ascontiguousarray(t, dtype="<f4").tobytes()


def tensor_from_bytes(buf, shape):
    n = int(np.prod(shape)) if len(shape) else 1
    if len(buf) != 4 * n:
        raise ValueError(f"payload of {len(buf)} bytes cannot hold shape {tuple(shape)}")
    return np.frombuffer(buf, dtype="<f4").astype(np.float32).reshape(shape)
