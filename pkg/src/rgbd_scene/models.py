"""Declarative network specs and the instantiated models built from them.

Every model exposes the same small training surface:

* ``params``: flat ``name -> ndarray`` mapping (arrays are updated in place),
* ``trainable_names()``: names that receive gradients,
* ``forward_train(x) -> (logits, cache)`` and ``backward(dlogits, cache) -> grads``.
"""

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .layers import (
    GATE_NAMES,
    LstmWeights,
    SppSpec,
    lstm_backward,
    lstm_unroll,
    spp_backward,
    spp_forward,
)

LAYER_KINDS = ("conv", "maxpool", "relu", "spp", "fc", "softmax")
BASE_WIDTHS = (96, 256, 384, 512)
BASE_HIDDEN = 1024


@dataclass
class LayerSpec:
    name: str
    kind: str
    channels: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    bins: tuple = ()
    trainable: bool = True

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        self.bins = tuple(tuple(b) for b in self.bins)

    @property
    def has_params(self):
        return self.kind in ("conv", "fc")


@dataclass
class ModelSpec:
    layers: list
    input_shape: tuple
    num_classes: int
    name: str = "cnn"

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names in {names}")
        widths = [l.channels for l in self.layers if l.kind == "fc"]
        if not widths or widths[-1] != self.num_classes:
            raise ValueError(f"final fc width {widths[-1] if widths else None} != num_classes {self.num_classes}")
        self.shapes()

    def layer(self, name):
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(f"no layer {name!r}; layers are {[l.name for l in self.layers]}")

    def shapes(self):
        """Output shape of every layer, raising ``ShapeError`` if the chain breaks."""
        shape = self.input_shape
        out = {}
        for l in self.layers:
            if l.kind == "conv":
                if len(shape) != 3:
                    raise T.ShapeError(f"{l.name}: conv needs a C x H x W input, got {shape}")
                c, h, w = shape
                if l.kernel > h + 2 * l.pad or l.kernel > w + 2 * l.pad:
                    raise T.ShapeError(f"{l.name}: kernel {l.kernel} does not fit input {h}x{w}")
                shape = (l.channels, T.conv_output_size(h, l.kernel, l.stride, l.pad),
                         T.conv_output_size(w, l.kernel, l.stride, l.pad))
            elif l.kind == "maxpool":
                c, h, w = shape
                if l.kernel > h or l.kernel > w:
                    raise T.ShapeError(f"{l.name}: pool window {l.kernel} larger than {h}x{w}")
                shape = (c, (h - l.kernel) // l.stride + 1, (w - l.kernel) // l.stride + 1)
            elif l.kind == "spp":
                c, h, w = shape
                spec = SppSpec(l.bins)
                if h < max(b[0] for b in spec.levels) or w < max(b[1] for b in spec.levels):
                    raise T.ShapeError(f"{l.name}: {h}x{w} map has fewer pixels than SPP bins {spec.levels}")
                shape = (spec.output_width(c),)
            elif l.kind == "fc":
                if len(shape) != 1:
                    raise T.ShapeError(f"{l.name}: fc needs a flat input, got {shape}")
                shape = (l.channels,)
            out[l.name] = shape
        return out

    def param_shapes(self):
        shapes = {}
        prev = self.input_shape
        outs = self.shapes()
        for l in self.layers:
            if l.kind == "conv":
                shapes[f"{l.name}.weight"] = (l.channels, prev[0], l.kernel, l.kernel)
                shapes[f"{l.name}.bias"] = (l.channels,)
            elif l.kind == "fc":
                shapes[f"{l.name}.weight"] = (l.channels, prev[0])
                shapes[f"{l.name}.bias"] = (l.channels,)
            prev = outs[l.name]
        return shapes

    def to_dict(self):
        d = asdict(self)
        d["layers"] = [asdict(l) for l in self.layers]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["layers"] = [LayerSpec(**l) for l in d["layers"]]
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def stem_widths(scale):
    if not 0 < scale <= 1:
        raise ValueError(f"scale must be in (0, 1], got {scale}")
    return tuple(max(1, int(round(scale * w))) for w in BASE_WIDTHS)


def _stem(widths):
    c1, c2, c3, c4 = widths
    return [
        LayerSpec("conv1", "conv", channels=c1, kernel=5, stride=2),
        LayerSpec("relu1", "relu"),
        LayerSpec("pool1", "maxpool", kernel=2, stride=2),
        LayerSpec("conv2", "conv", channels=c2, kernel=3, stride=1, pad=1),
        LayerSpec("relu2", "relu"),
        LayerSpec("conv3", "conv", channels=c3, kernel=3, stride=1, pad=1),
        LayerSpec("relu3", "relu"),
        LayerSpec("conv4", "conv", channels=c4, kernel=3, stride=1, pad=1),
        LayerSpec("relu4", "relu"),
    ]


def _head(num_classes, hidden, levels):
    return [
        LayerSpec("spp", "spp", bins=levels),
        LayerSpec("fc7", "fc", channels=hidden),
        LayerSpec("relu7", "relu"),
        LayerSpec("fc8", "fc", channels=num_classes),
        LayerSpec("prob", "softmax"),
    ]


def _build(input_shape, num_classes, scale, hidden, levels, name):
    input_shape = tuple(int(s) for s in input_shape)
    if len(input_shape) != 3:
        raise ValueError(f"input_shape must be C x H x W, got {input_shape}")
    if hidden is None:
        hidden = max(1, int(round(scale * BASE_HIDDEN)))
    layers = _stem(stem_widths(scale)) + _head(num_classes, hidden, levels)
    try:
        return ModelSpec(layers, input_shape, num_classes, name=name)
    except T.ShapeError as exc:
        raise ValueError(f"input {input_shape} is too small for the {name} stem: {exc}") from exc


def build_dcnn(input_shape, num_classes, scale=1.0, hidden=None, levels=((1, 1), (2, 2), (3, 3))):
    """Depth CNN: a 5x5/2 conv, 2x2/2 pool, three 3x3 convs, SPP and two fc layers.

    At ``scale=1`` the conv widths are 96, 256, 384, 512 and a 3x119x119 input
    gives a 512x29x29 ``conv4`` map.
    """
    return _build(input_shape, num_classes, scale, hidden, levels, "dcnn")


def build_wsp_cnn(patch_shape, num_classes, scale=1.0, hidden=None, levels=((1, 1), (2, 2), (3, 3))):
    """Patch network sharing the D-CNN stem layer for layer, so conv weights transfer by name."""
    return _build(patch_shape, num_classes, scale, hidden, levels, "wsp")


def _glorot(rng, shape, fan_in, fan_out, dtype):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape).astype(dtype)


class Model:
    """A CNN instantiated from a :class:`ModelSpec`."""

    def __init__(self, spec, seed=0, params=None, dtype=np.float32):
        self.spec = spec
        self.dtype = dtype
        shapes = spec.param_shapes()
        if params is None:
            rng = np.random.default_rng(seed)
            params = {}
            for name, shape in shapes.items():
                if name.endswith(".bias"):
                    params[name] = np.zeros(shape, dtype=dtype)
                elif len(shape) == 4:
                    k, c, kh, kw = shape
                    params[name] = _glorot(rng, shape, c * kh * kw, k * kh * kw, dtype)
                else:
                    params[name] = _glorot(rng, shape, shape[1], shape[0], dtype)
        else:
            missing = set(shapes) - set(params)
            if missing:
                raise KeyError(f"missing parameters {sorted(missing)}")
            for name, shape in shapes.items():
                if tuple(params[name].shape) != shape:
                    raise T.ShapeError(f"{name}: got {params[name].shape}, spec needs {shape}")
            params = {n: np.array(params[n], dtype=dtype) for n in shapes}
        self.params = params

    def trainable_names(self, stop=None):
        """Trainable parameter names, optionally only for layers up to ``stop``."""
        names = []
        for l in self.spec.layers:
            if l.has_params and l.trainable:
                names += [f"{l.name}.weight", f"{l.name}.bias"]
            if l.name == stop:
                break
        return names

    def conv_layers(self):
        return [l.name for l in self.spec.layers if l.kind == "conv"]

    @property
    def feature_layer(self):
        """The relu after the penultimate fc layer."""
        fcs = [i for i, l in enumerate(self.spec.layers) if l.kind == "fc"]
        if len(fcs) < 2:
            return self.spec.layers[fcs[-1] - 1].name
        idx = fcs[-2]
        nxt = self.spec.layers[idx + 1]
        return nxt.name if nxt.kind == "relu" else self.spec.layers[idx].name

    @property
    def feature_width(self):
        return self.spec.shapes()[self.feature_layer][0]

    def forward(self, x, stop=None, start=None, keep=False):
        """Run layers from ``start`` (exclusive) up to ``stop`` (inclusive).

        Without ``stop`` the network runs to the logits (the softmax layer is
        applied by the loss).  With ``keep=True`` returns ``(out, cache)``.
        """
        layers = self.spec.layers
        i0 = 0 if start is None else [l.name for l in layers].index(start) + 1
        cache = []
        p = self.params
        for l in layers[i0:]:
            if l.kind == "softmax":
                break
            inp = x
            if l.kind == "conv":
                x = T.conv2d_forward(x, p[f"{l.name}.weight"], p[f"{l.name}.bias"], l.stride, l.pad, return_cols=keep)
                if keep:
                    x, cols = x
                    inp = (inp, cols)
            elif l.kind == "relu":
                x = T.relu(x)
            elif l.kind == "maxpool":
                x = T.maxpool_forward(x, l.kernel, l.stride)
            elif l.kind == "spp":
                x = spp_forward(x, SppSpec(l.bins))
            elif l.kind == "fc":
                x = T.fc_forward(x, p[f"{l.name}.weight"], p[f"{l.name}.bias"])
            if keep:
                cache.append((l, inp))
            if stop is not None and l.name == stop:
                break
        else:
            if stop is not None and stop not in [l.name for l in layers[i0:]]:
                raise KeyError(f"no layer {stop!r}")
        return (x, cache) if keep else x

    def backprop(self, dout, cache, need_dx=True):
        """Backpropagate through a cached forward pass; returns ``(grads, dx)``.

        With ``need_dx=False`` the gradient with respect to the network input
        is skipped and ``dx`` is None.
        """
        grads = {}
        trainable = set(self.trainable_names())
        p = self.params
        for pos, (l, inp) in reversed(list(enumerate(cache))):
            if l.kind == "conv":
                inp, cols = inp
                dout, dw, db = T.conv2d_backward(dout, inp, p[f"{l.name}.weight"], l.stride, l.pad,
                                                 cols=cols, need_dx=pos > 0 or need_dx)
            elif l.kind == "relu":
                dout = T.relu_backward(dout, inp)
                continue
            elif l.kind == "maxpool":
                dout = T.maxpool_backward(dout, inp, l.kernel, l.stride)
                continue
            elif l.kind == "spp":
                dout = spp_backward(dout, inp, SppSpec(l.bins))
                continue
            elif l.kind == "fc":
                dout, dw, db = T.fc_backward(dout, inp, p[f"{l.name}.weight"])
            if f"{l.name}.weight" in trainable:
                grads[f"{l.name}.weight"] = dw
                grads[f"{l.name}.bias"] = db
        return grads, dout

    def forward_train(self, x):
        return self.forward(x, keep=True)

    def backward(self, dlogits, cache):
        return self.backprop(dlogits, cache, need_dx=False)[0]

    def features(self, x, batch_size=256):
        return self._batched(lambda b: self.forward(b, stop=self.feature_layer), x, batch_size)

    def logits(self, x, batch_size=256):
        return self._batched(self.forward, x, batch_size)

    def predict_proba(self, x, batch_size=256):
        return T.softmax(self.logits(x, batch_size))

    @staticmethod
    def _batched(fn, x, batch_size):
        x = np.asarray(x)
        return np.concatenate([fn(x[i:i + batch_size]) for i in range(0, len(x), batch_size)], axis=0)

    def describe(self):
        return {"kind": "cnn", "model": self.spec.to_dict()}


def transfer_conv_weights(src, dst):
    """Copy every conv layer present in both models from ``src`` into ``dst``.

    Non-conv parameters of ``dst`` are left untouched.  Returns ``dst``.
    """
    shared = [n for n in dst.conv_layers() if n in set(src.conv_layers())]
    bad = []
    for n in shared:
        for suffix in (".weight", ".bias"):
            a, b = src.params[n + suffix], dst.params[n + suffix]
            if a.shape != b.shape:
                bad.append(f"{n}{suffix}: src {a.shape} vs dst {b.shape}")
    if bad:
        raise T.ShapeError("cannot transfer conv weights, shape mismatch in " + "; ".join(bad))
    for n in shared:
        for suffix in (".weight", ".bias"):
            dst.params[n + suffix][...] = src.params[n + suffix]
    return dst


@dataclass
class FusionSpec:
    branch_feature_widths: tuple
    hidden_width: int
    num_classes: int

    def __post_init__(self):
        self.branch_feature_widths = tuple(int(w) for w in self.branch_feature_widths)

    @property
    def input_width(self):
        return sum(self.branch_feature_widths)


class FusionHead:
    """Concatenate (rgb, depth) features, then fc -> relu -> fc."""

    def __init__(self, spec, seed=0, params=None, prefix="fusion", dtype=np.float32):
        self.spec = spec
        self.prefix = prefix
        h, d, k = spec.hidden_width, spec.input_width, spec.num_classes
        if params is None:
            rng = np.random.default_rng(seed)
            params = {
                f"{prefix}.fc1.weight": _glorot(rng, (h, d), d, h, dtype),
                f"{prefix}.fc1.bias": np.zeros(h, dtype),
                f"{prefix}.fc2.weight": _glorot(rng, (k, h), h, k, dtype),
                f"{prefix}.fc2.bias": np.zeros(k, dtype),
            }
        self.params = params

    def trainable_names(self):
        return list(self.params)

    def forward(self, rgb_feat, depth_feat, keep=False):
        return fusion_forward(rgb_feat, depth_feat, self, keep=keep)

    def backward(self, dlogits, cache):
        z, a = cache["concat"], cache["hidden_pre"]
        p = self.params
        da, dw2, db2 = T.fc_backward(dlogits, T.relu(a), p[f"{self.prefix}.fc2.weight"])
        dz, dw1, db1 = T.fc_backward(T.relu_backward(da, a), z, p[f"{self.prefix}.fc1.weight"])
        grads = {
            f"{self.prefix}.fc1.weight": dw1, f"{self.prefix}.fc1.bias": db1,
            f"{self.prefix}.fc2.weight": dw2, f"{self.prefix}.fc2.bias": db2,
        }
        wr = self.spec.branch_feature_widths[0]
        return grads, dz[..., :wr], dz[..., wr:]


def fusion_forward(rgb_feat, depth_feat, fusion, keep=False):
    """Logits of the fusion head over the concatenation ``[rgb, depth]``."""
    wr, wd = fusion.spec.branch_feature_widths
    if np.shape(rgb_feat)[-1] != wr or np.shape(depth_feat)[-1] != wd:
        raise T.ShapeError(
            f"fusion expects widths ({wr}, {wd}), got ({np.shape(rgb_feat)[-1]}, {np.shape(depth_feat)[-1]})"
        )
    if np.ndim(rgb_feat) != np.ndim(depth_feat) or np.shape(rgb_feat)[:-1] != np.shape(depth_feat)[:-1]:
        raise T.ShapeError(f"branch batch shapes differ: {np.shape(rgb_feat)} vs {np.shape(depth_feat)}")
    p = fusion.params
    z = np.concatenate([rgb_feat, depth_feat], axis=-1)
    a = T.fc_forward(z, p[f"{fusion.prefix}.fc1.weight"], p[f"{fusion.prefix}.fc1.bias"])
    logits = T.fc_forward(T.relu(a), p[f"{fusion.prefix}.fc2.weight"], p[f"{fusion.prefix}.fc2.bias"])
    if keep:
        return logits, {"concat": z, "hidden_pre": a}
    return logits


def _prefixed(prefix, params):
    return {f"{prefix}{k}": v for k, v in params.items()}


class CnnLstm:
    """Per-frame CNN features -> LSTM -> linear head on the final hidden state.

    Inputs are ``N x T x C x H x W`` sequence batches (or a single ``T x C x H x W``).
    """

    def __init__(self, cnn, hidden, seed=0, lstm=None, head=None, train_cnn=True, prefix=""):
        self.cnn = cnn
        self.prefix = prefix
        rng = np.random.default_rng(seed)
        self.lstm = lstm if lstm is not None else LstmWeights.init(cnn.feature_width, hidden, rng, cnn.dtype)
        k = cnn.spec.num_classes
        if head is None:
            head = {"weight": _glorot(rng, (k, hidden), hidden, k, cnn.dtype), "bias": np.zeros(k, cnn.dtype)}
        self.head = head
        self.train_cnn = train_cnn

    @property
    def hidden(self):
        return self.lstm.hidden

    @property
    def params(self):
        d = _prefixed(self.prefix, self.cnn.params)
        d.update({f"{self.prefix}lstm.{n}": getattr(self.lstm, n) for n in GATE_NAMES})
        d[f"{self.prefix}head.weight"] = self.head["weight"]
        d[f"{self.prefix}head.bias"] = self.head["bias"]
        return d

    def trainable_names(self):
        names = []
        if self.train_cnn:
            names = [f"{self.prefix}{n}" for n in self.cnn.trainable_names(stop=self.cnn.feature_layer)]
        names += [f"{self.prefix}lstm.{n}" for n in GATE_NAMES]
        return names + [f"{self.prefix}head.weight", f"{self.prefix}head.bias"]

    def _split(self, frames):
        frames = np.asarray(frames)
        if frames.ndim == 4:
            frames = frames[None]
        if frames.ndim != 5:
            raise T.ShapeError(f"expected N x T x C x H x W frames, got {frames.shape}")
        if frames.shape[1] == 0:
            raise ValueError("empty frame sequence")
        return frames

    def embed(self, frames, keep=False):
        """Final LSTM hidden state ``N x hidden`` for a sequence batch."""
        frames = self._split(frames)
        n, t = frames.shape[:2]
        flat = frames.reshape(n * t, *frames.shape[2:])
        if keep and self.train_cnn:
            feats, ccache = self.cnn.forward(flat, stop=self.cnn.feature_layer, keep=True)
        else:
            feats, ccache = self.cnn.features(flat), None
        feats = feats.reshape(n, t, -1)
        return self.embed_features(feats, keep=keep, cnn_cache=ccache)

    def embed_features(self, feats, keep=False, cnn_cache=None):
        feats = np.asarray(feats)
        if feats.shape[1] == 0:
            raise ValueError("empty frame sequence")
        final, states = lstm_unroll([feats[:, i] for i in range(feats.shape[1])], self.lstm)
        if keep:
            return final.m, {"states": states, "cnn": cnn_cache, "shape": feats.shape}
        return final.m

    def head_forward(self, m):
        return T.fc_forward(m, self.head["weight"], self.head["bias"])

    def forward(self, frames):
        return self.head_forward(self.embed(frames))

    def forward_train(self, frames):
        m, cache = self.embed(frames, keep=True)
        cache["m"] = m
        return self.head_forward(m), cache

    def forward_features_train(self, feats):
        m, cache = self.embed_features(feats, keep=True)
        cache["m"] = m
        return self.head_forward(m), cache

    def backward_embed(self, dm, cache):
        grads = {}
        lg, dxs = lstm_backward(cache["states"], self.lstm, dm_final=dm)
        grads.update({f"{self.prefix}lstm.{n}": g for n, g in lg.items()})
        if self.train_cnn and cache["cnn"] is not None:
            n, t, d = cache["shape"]
            dfeat = np.stack(dxs, axis=1).reshape(n * t, d)
            cg = self.cnn.backward(dfeat, cache["cnn"])
            grads.update(_prefixed(self.prefix, cg))
        return grads

    def backward(self, dlogits, cache):
        dm, dw, db = T.fc_backward(dlogits, cache["m"], self.head["weight"])
        grads = self.backward_embed(dm, cache)
        grads[f"{self.prefix}head.weight"] = dw
        grads[f"{self.prefix}head.bias"] = db
        return grads

    def logits(self, frames, batch_size=32):
        frames = self._split(frames)
        return np.concatenate([self.forward(frames[i:i + batch_size]) for i in range(0, len(frames), batch_size)])

    def predict_proba(self, frames, batch_size=32):
        return T.softmax(self.logits(frames, batch_size))

    def describe(self):
        return {"kind": "cnn_lstm", "cnn": self.cnn.spec.to_dict(), "hidden": self.hidden}


def cnn_lstm_forward(frames, cnn, lstm, head):
    """Logits for one sequence ``T x C x H x W`` (or a batch) of frames."""
    frames = np.asarray(frames)
    if len(frames) == 0:
        raise ValueError("empty frame list")
    model = CnnLstm(cnn, lstm.hidden, lstm=lstm, head=head)
    out = model.forward(frames)
    return out[0] if frames.ndim == 4 else out


class FusedVideoModel:
    """RGB and depth CNN+LSTM branches joined by a fusion head on the final hidden states."""

    def __init__(self, rgb, depth, fusion_hidden, seed=0, fusion=None):
        rgb.prefix, depth.prefix = "rgb/", "depth/"
        self.rgb, self.depth = rgb, depth
        k = rgb.cnn.spec.num_classes
        if depth.cnn.spec.num_classes != k:
            raise ValueError("branches disagree on the number of classes")
        if fusion is None:
            fusion = FusionHead(FusionSpec((rgb.hidden, depth.hidden), fusion_hidden, k), seed=seed)
        self.fusion = fusion

    @property
    def params(self):
        d = {}
        for b in (self.rgb, self.depth):
            d.update({k: v for k, v in b.params.items() if "/head." not in k})
        d.update(self.fusion.params)
        return d

    def trainable_names(self):
        names = []
        for b in (self.rgb, self.depth):
            names += [n for n in b.trainable_names() if "/head." not in n]
        return names + self.fusion.trainable_names()

    def forward(self, frames):
        rgb, depth = frames
        return self.fusion.forward(self.rgb.embed(rgb), self.depth.embed(depth))

    def forward_train(self, frames):
        rgb, depth = frames
        mr, cr = self.rgb.embed(rgb, keep=True)
        md, cd = self.depth.embed(depth, keep=True)
        logits, cf = self.fusion.forward(mr, md, keep=True)
        return logits, {"rgb": cr, "depth": cd, "fusion": cf}

    def backward(self, dlogits, cache):
        grads, dr, dd = self.fusion.backward(dlogits, cache["fusion"])
        grads.update(self.rgb.backward_embed(dr, cache["rgb"]))
        grads.update(self.depth.backward_embed(dd, cache["depth"]))
        return grads

    def logits(self, frames, batch_size=32):
        rgb, depth = frames
        return np.concatenate([
            self.forward((rgb[i:i + batch_size], depth[i:i + batch_size])) for i in range(0, len(rgb), batch_size)
        ])

    def predict_proba(self, frames, batch_size=32):
        return T.softmax(self.logits(frames, batch_size))

    def describe(self):
        return {"kind": "fused", "rgb": self.rgb.describe(), "depth": self.depth.describe(),
                "fusion": asdict(self.fusion.spec)}
