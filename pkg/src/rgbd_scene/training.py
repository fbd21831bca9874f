"""Optimizer, class-weighted linear classifier and the staged training procedures."""

import copy
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .analysis import mean_class_accuracy
from .checkpoint import save_checkpoint
from .data import patch_dataset
from .models import CnnLstm, FusedVideoModel, Model, build_dcnn, build_wsp_cnn, transfer_conv_weights

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    freeze_mask: frozenset = frozenset()

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        object.__setattr__(self, "freeze_mask", frozenset(self.freeze_mask))


def _layer_of(name):
    return name.rsplit(".", 1)[0].split("/")[-1]


def is_frozen(name, freeze_mask):
    return name in freeze_mask or _layer_of(name) in freeze_mask


def sgd_step(params, grads, velocity, config):
    """Momentum SGD with L2 weight decay, updating ``params`` in place.

    ``v <- momentum * v - lr * (g + weight_decay * w)``, ``w <- w + v``.
    Parameters named (or whose layer is named) in ``config.freeze_mask`` are
    skipped.  Returns ``(params, velocity)``.
    """
    for name, g in grads.items():
        if is_frozen(name, config.freeze_mask):
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name}")
        w = params[name]
        if g.shape != w.shape:
            raise T.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {w.shape}")
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(w)
        v *= config.momentum
        v -= config.learning_rate * (g + config.weight_decay * w)
        w += v
    return params, velocity


def compute_class_weights(counts, p=2.0):
    """Per-class weights ``(min_i N_i / N_k) ** p``."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.size == 0:
        raise ValueError("no class counts given")
    if np.any(counts < 1):
        raise ValueError(f"every class needs at least one training sample, got counts {counts.tolist()}")
    return (counts.min() / counts) ** p


@dataclass
class LinearClassifier:
    weight: np.ndarray
    bias: np.ndarray

    def scores(self, x):
        return np.asarray(x) @ self.weight.T + self.bias

    def predict(self, x):
        return self.scores(x).argmax(axis=1)


def train_weighted_linear(features, labels, class_weights=None, num_classes=None, reg=1e-3,
                          epochs=50, learning_rate=0.05, batch_size=32, seed=0):
    """One-vs-rest linear classifier on an L2-regularized, class-weighted hinge loss.

    Each sample's hinge terms are scaled by the weight of its true class.
    Weights are normalized by their mean over the training set, so scaling
    every class weight by the same constant leaves the optimization unchanged
    (equivalently, the regularizer scales with the weights).
    """
    x = np.asarray(features, dtype=np.float32)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or len(x) != len(y):
        raise T.ShapeError(f"features {x.shape} and labels {y.shape} do not align")
    k = int(num_classes if num_classes is not None else y.max() + 1)
    if len(np.unique(y)) < 2:
        raise ValueError("need at least two classes to train a classifier")
    if class_weights is None:
        sw = np.ones(len(y), dtype=np.float32)
    else:
        cw = np.asarray(class_weights, dtype=np.float64)
        sw = cw[y]
        sw = (sw / sw.mean()).astype(np.float32)
    targets = -np.ones((len(y), k), dtype=np.float32)
    targets[np.arange(len(y)), y] = 1
    params = {"weight": np.zeros((k, x.shape[1]), np.float32), "bias": np.zeros(k, np.float32)}
    cfg = TrainingConfig(learning_rate=learning_rate, momentum=0.9, weight_decay=reg, batch_size=batch_size)
    velocity = {}
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        for idx in _batches(len(y), batch_size, rng):
            s = x[idx] @ params["weight"].T + params["bias"]
            active = (targets[idx] * s < 1).astype(np.float32)
            ds = -(targets[idx] * active) * sw[idx, None] / len(idx)
            grads = {"weight": ds.T @ x[idx], "bias": ds.sum(axis=0)}
            sgd_step(params, grads, velocity, cfg)
    return LinearClassifier(params["weight"], params["bias"])


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _take(inputs, idx):
    if isinstance(inputs, tuple):
        return tuple(a[idx] for a in inputs)
    return inputs[idx]


class _FeatureRunner:
    """Trains a CnnLstm's LSTM and head on precomputed CNN features."""

    def __init__(self, model):
        self.model = model
        self.params = model.params

    def trainable_names(self):
        return [n for n in self.model.trainable_names() if "lstm." in n or "head." in n]

    def forward_train(self, feats):
        return self.model.forward_features_train(feats)

    def backward(self, dlogits, cache):
        return self.model.backward(dlogits, cache)


class _FusionHeadRunner:
    """Trains only the fusion head of a FusedVideoModel on precomputed branch embeddings."""

    def __init__(self, fused):
        self.fusion = fused.fusion
        self.params = fused.fusion.params

    def trainable_names(self):
        return self.fusion.trainable_names()

    def forward_train(self, embeddings):
        return self.fusion.forward(*embeddings, keep=True)

    def backward(self, dlogits, cache):
        return self.fusion.backward(dlogits, cache)[0]


def fit(model, inputs, labels, config, class_weights=None, name="train", callback=None):
    """Mini-batch softmax cross-entropy training; returns per-epoch history."""
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    rng = np.random.default_rng(config.seed)
    velocity = {}
    params = model.params
    allowed = set(model.trainable_names())
    sw_all = None if class_weights is None else np.asarray(class_weights, np.float32)[labels]
    history = []
    for epoch in range(config.epochs):
        total, preds = 0.0, np.empty(n, dtype=np.int64)
        for idx in _batches(n, config.batch_size, rng):
            logits, cache = model.forward_train(_take(inputs, idx))
            sw = None if sw_all is None else sw_all[idx]
            loss, probs, dlogits = T.softmax_cross_entropy(logits, labels[idx], sw)
            grads = model.backward(dlogits.astype(logits.dtype, copy=False), cache)
            grads = {k: v for k, v in grads.items() if k in allowed}
            try:
                sgd_step(params, grads, velocity, config)
            except TrainingError as exc:
                raise TrainingError(f"{name}: epoch {epoch + 1} aborted: {exc}") from exc
            total += loss * len(idx)
            preds[idx] = probs.argmax(axis=1)
        rec = {"stage": name, "epoch": epoch + 1, "loss": total / max(n, 1),
               "mean_class_accuracy": mean_class_accuracy(preds, labels).mean_class_accuracy}
        history.append(rec)
        log.info("%s epoch %d loss %.4f mca %.4f", name, epoch + 1, rec["loss"], rec["mean_class_accuracy"])
        if callback is not None:
            callback(rec)
    return history


@dataclass(frozen=True)
class TwoStepConfig:
    scale: float = 0.125
    hidden: int = None
    grid: int = 7
    patch: int = 17
    wsp: TrainingConfig = TrainingConfig()
    finetune: TrainingConfig = TrainingConfig()
    seed: int = 0


@dataclass
class TwoStepResult:
    wsp: Model
    dcnn: Model
    history: list
    checkpoints: dict = field(default_factory=dict)


def _check_taxonomy(*sets):
    classes = [tuple(s.classes) for s in sets if s is not None]
    if any(c != classes[0] for c in classes):
        raise ValueError(f"class taxonomies differ: {classes}")


def run_two_step(patch_ds, image_ds, config, out_dir=None, callback=None):
    """Patch pretraining of the conv stem followed by full-image training.

    With ``config.wsp.epochs == 0`` this is plain training from scratch.
    """
    _check_taxonomy(patch_ds, image_ds)
    k = len(image_ds.classes)
    history = []
    checkpoints = {}
    wsp = Model(build_wsp_cnn(patch_ds.x.shape[1:], k, config.scale, config.hidden), seed=config.seed)
    if config.wsp.epochs:
        history += fit(wsp, patch_ds.x, patch_ds.y, config.wsp, name="wsp", callback=callback)
    if out_dir is not None:
        checkpoints["wsp"] = save_checkpoint(Path(out_dir) / "wsp.dsc", wsp)
    dcnn = Model(build_dcnn(image_ds.x.shape[1:], k, config.scale, config.hidden), seed=config.seed + 1)
    transfer_conv_weights(wsp, dcnn)
    history += fit(dcnn, image_ds.x, image_ds.y, config.finetune, name="finetune", callback=callback)
    if out_dir is not None:
        checkpoints["dcnn"] = save_checkpoint(Path(out_dir) / "dcnn.dsc", dcnn)
    return TwoStepResult(wsp, dcnn, history, checkpoints)


@dataclass(frozen=True)
class ThreeStepConfig:
    modalities: tuple = ("rgb", "depth")
    T: int = 9
    scale: float = 0.125
    hidden: int = None
    lstm_hidden: int = 32
    fusion_hidden: int = 32
    grid: int = 5
    patch: int = 17
    patch_pretrain: tuple = ("depth",)
    wsp: TrainingConfig = TrainingConfig(epochs=5)
    frame: TrainingConfig = TrainingConfig(epochs=10)
    temporal: TrainingConfig = TrainingConfig(epochs=30)
    joint: TrainingConfig = TrainingConfig(epochs=5, learning_rate=0.003)
    fusion: TrainingConfig = TrainingConfig(epochs=30)
    seed: int = 0
    run_joint: bool = True


@dataclass
class ThreeStepResult:
    frame_cnn: dict
    temporal: dict
    joint: dict
    fused_temporal: FusedVideoModel
    fused: FusedVideoModel
    history: list


def segment_set(videos, T, modality):
    """Stack non-overlapping length-``T`` segments of every video."""
    segs, labels = [], []
    arr = videos.frames[modality]
    n_seg = arr.shape[1] // T
    if n_seg == 0:
        log.warning("videos have %d keyframes, fewer than T=%d; no segments", arr.shape[1], T)
        return np.empty((0, T) + arr.shape[2:], arr.dtype), np.empty(0, np.int64)
    for s in range(n_seg):
        segs.append(arr[:, s * T:(s + 1) * T])
        labels.append(videos.y)
    # video-major ordering
    segs = np.stack(segs, axis=1).reshape(-1, T, *arr.shape[2:])
    labels = np.stack(labels, axis=1).reshape(-1)
    return segs, labels


def train_temporal(cnn, videos, modality, T, hidden, config, seed=0, callback=None):
    """Step 2: LSTM and head trained on fixed CNN features of length-``T`` segments."""
    segs, labels = segment_set(videos, T, modality)
    model = CnnLstm(cnn, hidden, seed=seed, train_cnn=False)
    if len(labels) == 0:
        return model, []
    n, t = segs.shape[:2]
    feats = cnn.features(segs.reshape(n * t, *segs.shape[2:])).reshape(n, t, -1)
    hist = fit(_FeatureRunner(model), feats, labels, config, name=f"temporal-{modality}", callback=callback)
    return model, hist


def train_fusion(rgb, depth, videos, T, hidden, head_config, joint_config=None, seed=0, callback=None):
    """RGB-D fusion of two temporal models.

    A fusion head is trained on the frozen branch embeddings; with
    ``joint_config`` a copy is then fine-tuned end to end, CNNs included.
    Returns ``(fused_frozen, fused_joint_or_None, history)``.
    """
    rs, labels = segment_set(videos, T, "rgb")
    ds, _ = segment_set(videos, T, "depth")
    frozen = FusedVideoModel(copy.deepcopy(rgb), copy.deepcopy(depth), hidden, seed=seed)
    history = []
    if not len(labels):
        return frozen, None, history
    emb = (frozen.rgb.embed(rs), frozen.depth.embed(ds))
    history += fit(_FusionHeadRunner(frozen), emb, labels, head_config, name="fusion", callback=callback)
    joint = None
    if joint_config is not None:
        joint = copy.deepcopy(frozen)
        joint.rgb.train_cnn = joint.depth.train_cnn = True
        history += fit(joint, (rs, ds), labels, joint_config, name="joint-fusion", callback=callback)
    return frozen, joint, history


def run_three_step(patch_ds, frame_ds, video_ds, config, out_dir=None, callback=None):
    """Patch pretraining, temporal pretraining on segments, joint fine-tuning.

    With both modalities present, a fusion head is first trained on the frozen
    step-2 embeddings (``fused_temporal``); step 3 then fine-tunes a copy of it
    end to end, CNNs included (``fused``).  ``joint`` holds the single-modality
    end-to-end models.

    ``patch_ds`` and ``frame_ds`` map modality to :class:`LabeledSet` (patch
    sets may be missing for modalities without patch pretraining);
    ``video_ds`` is the training :class:`SequenceSet`.
    """
    frame_cnn, temporal, joint = {}, {}, {}
    history = []
    for i, mod in enumerate(config.modalities):
        pds = patch_ds.get(mod) if (patch_ds and mod in config.patch_pretrain) else None
        _check_taxonomy(pds, frame_ds[mod], video_ds)
        two = TwoStepConfig(scale=config.scale, hidden=config.hidden, grid=config.grid, patch=config.patch,
                            wsp=config.wsp if pds is not None else replace(config.wsp, epochs=0),
                            finetune=config.frame, seed=config.seed + 10 * i)
        if pds is None:
            # no patch pretraining: a placeholder patch set only fixes the WSP geometry
            pds = patch_dataset(frame_ds[mod], 1, min(config.patch, frame_ds[mod].x.shape[-1]))
        res = run_two_step(pds, frame_ds[mod], two, callback=callback)
        history += [{**h, "modality": mod} for h in res.history]
        frame_cnn[mod] = res.dcnn
        model, hist = train_temporal(copy.deepcopy(res.dcnn), video_ds, mod, config.T, config.lstm_hidden,
                                     config.temporal, seed=config.seed + 10 * i + 2, callback=callback)
        history += hist
        temporal[mod] = model
        if config.run_joint:
            ete = copy.deepcopy(model)
            ete.train_cnn = True
            segs, labels = segment_set(video_ds, config.T, mod)
            if len(labels):
                history += fit(ete, segs, labels, config.joint, name=f"joint-{mod}", callback=callback)
            joint[mod] = ete
    fused_temporal = fused = None
    if set(config.modalities) >= {"rgb", "depth"}:
        fused_temporal, fused, hist = train_fusion(
            temporal["rgb"], temporal["depth"], video_ds, config.T, config.fusion_hidden, config.fusion,
            config.joint if config.run_joint else None, seed=config.seed + 99, callback=callback)
        history += hist
    if out_dir is not None:
        out = Path(out_dir)
        for mod in config.modalities:
            save_checkpoint(out / f"frame_{mod}.dsc", frame_cnn[mod])
            save_checkpoint(out / f"temporal_{mod}.dsc", temporal[mod])
            if mod in joint:
                save_checkpoint(out / f"joint_{mod}.dsc", joint[mod])
        if fused_temporal is not None:
            save_checkpoint(out / "fused_temporal.dsc", fused_temporal)
        if fused is not None:
            save_checkpoint(out / "fused.dsc", fused)
    return ThreeStepResult(frame_cnn, temporal, joint, fused_temporal, fused, history)

