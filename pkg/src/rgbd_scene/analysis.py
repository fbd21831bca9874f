"""Evaluation metrics and network diagnostics."""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import save_image
from .tensor import relu


@dataclass
class EvalReport:
    per_class_accuracy: np.ndarray  # nan for classes without samples
    mean_class_accuracy: float
    confusion: np.ndarray
    sample_count: int

    def lines(self, classes=None, prefix="eval"):
        names = classes or [str(i) for i in range(len(self.per_class_accuracy))]
        out = [metric_line(f"{prefix}.mean_class_accuracy", self.mean_class_accuracy),
               metric_line(f"{prefix}.samples", self.sample_count)]
        for n, a in zip(names, self.per_class_accuracy):
            if not np.isnan(a):
                out.append(metric_line(f"{prefix}.class_accuracy.{n}", a))
        return out

    def table(self, classes=None):
        names = classes or [str(i) for i in range(len(self.per_class_accuracy))]
        width = max(len(n) for n in names)
        rows = [f"{'class':<{width}}  samples  accuracy"]
        for n, a, c in zip(names, self.per_class_accuracy, self.confusion.sum(axis=1)):
            acc = "-" if np.isnan(a) else f"{a:.4f}"
            rows.append(f"{n:<{width}}  {c:7d}  {acc:>8}")
        rows.append(f"mean class accuracy: {self.mean_class_accuracy:.4f} over {self.sample_count} samples")
        return "\n".join(rows)


def metric_line(name, value):
    if isinstance(value, float):
        value = f"{value:.6f}"
    return f"metric\t{name}\t{value}"


def mean_class_accuracy(predictions, labels, num_classes=None):
    """Mean over represented classes of per-class recall."""
    p = np.asarray(predictions, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if p.shape != y.shape:
        raise ValueError(f"{len(p)} predictions for {len(y)} labels")
    if y.size == 0:
        raise ValueError("cannot evaluate an empty prediction set")
    k = int(num_classes if num_classes is not None else max(p.max(), y.max()) + 1)
    if y.min() < 0 or y.max() >= k:
        raise ValueError(f"labels outside taxonomy of {k} classes")
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (y, np.clip(p, 0, k - 1)), 1)
    rows = conf.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per = np.where(rows > 0, np.diag(conf) / np.maximum(rows, 1), np.nan)
    return EvalReport(per, float(np.nanmean(per)), conf, int(y.size))


def average_predictions(per_frame_probs):
    """Mean of per-frame class probabilities (the non-learned temporal baseline)."""
    probs = [np.asarray(p, dtype=np.float64) for p in per_frame_probs]
    if not probs:
        raise ValueError("no frame predictions to average")
    widths = {p.shape for p in probs}
    if len(widths) != 1:
        raise ValueError(f"frame predictions have different widths: {sorted(widths)}")
    sums = np.array([p.sum(axis=-1) for p in probs])
    if np.any(np.abs(sums - 1) > 1e-6):
        raise ValueError("frame predictions must be probability vectors summing to 1")
    return np.mean(probs, axis=0)


@dataclass
class ActivationProfile:
    layer: str
    rates: np.ndarray
    dataset: str
    sample_count: int

    def sorted(self):
        order = np.argsort(-self.rates, kind="stable")
        return order, self.rates[order]

    def table(self):
        order, rates = self.sorted()
        lines = ["rank\tfilter\trate"]
        lines += [f"{r}\t{f}\t{v:.6f}" for r, (f, v) in enumerate(zip(order, rates))]
        return "\n".join(lines) + "\n"


def activation_rate(model, layer_name, images, dataset="", batch_size=128):
    """Fraction of (image, site) pairs with strictly positive post-relu response, per filter."""
    names = [l.name for l in model.spec.layers]
    if layer_name not in names:
        raise KeyError(f"unknown layer {layer_name!r}; layers are {names}")
    layer = model.spec.layer(layer_name)
    if layer.kind != "conv":
        raise ValueError(f"{layer_name} is a {layer.kind} layer, not conv")
    x = np.asarray(images)
    counts = np.zeros(layer.channels, dtype=np.int64)
    sites = 0
    for i in range(0, len(x), batch_size):
        act = relu(model.forward(x[i:i + batch_size], stop=layer_name))
        counts += (act > 0).sum(axis=(0, 2, 3))
        sites += act.shape[0] * act.shape[2] * act.shape[3]
    return ActivationProfile(layer_name, counts / max(sites, 1), dataset, len(x))


def gini(values):
    """Gini coefficient of non-negative values (0 = perfectly even)."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    n = v.size
    if n == 0 or v.sum() == 0:
        return 0.0
    idx = np.arange(1, n + 1)
    return float((2 * idx - n - 1) @ v / (n * v.sum()))


def filter_grid(weights, columns=None):
    """Tile conv kernels into one image with 1-pixel separators.

    Each kernel is min-max normalized on its own (constant kernels map to 0.5).
    Kernels with three input channels render in color; otherwise each input
    channel becomes its own grayscale tile.
    """
    w = np.asarray(weights, dtype=np.float64)
    k, c, kh, kw = w.shape
    if c == 3:
        tiles = list(w)
    else:
        tiles = [w[i, j][None] for i in range(k) for j in range(c)]
    n = len(tiles)
    cols = columns or int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    ch = tiles[0].shape[0]
    out = np.ones((ch, rows * (kh + 1) + 1, cols * (kw + 1) + 1))
    for i, t in enumerate(tiles):
        lo, hi = t.min(), t.max()
        norm = np.full_like(t, 0.5) if hi == lo else (t - lo) / (hi - lo)
        r, cc = divmod(i, cols)
        out[:, 1 + r * (kh + 1):1 + r * (kh + 1) + kh, 1 + cc * (kw + 1):1 + cc * (kw + 1) + kw] = norm
    return out


def export_filter_grid(model, layer_name, path):
    layer = model.spec.layer(layer_name)
    if layer.kind != "conv":
        raise ValueError(f"{layer_name} is not a conv layer")
    grid = filter_grid(model.params[f"{layer_name}.weight"])
    save_image(Path(path), grid)
    return grid
