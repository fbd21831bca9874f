"""Batch command line: synthetic data, training stages, evaluation and diagnostics.

Every command takes its parameters from flags and, optionally, a UTF-8
``key=value`` file given with ``--config`` (flags win).  The resolved
parameters are echoed to ``config.txt`` in the output directory, and that
file can be passed back with ``--config`` to repeat a run.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error.
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import synthetic
from .analysis import activation_rate, average_predictions, filter_grid, gini, mean_class_accuracy, metric_line
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    ImageFormatError, ManifestError, ManifestRecord, class_list, images_from_manifest, patch_dataset,
    read_manifest, save_image, sequences_from_manifest, write_manifest,
)
from .models import CnnLstm, FusedVideoModel, Model, build_dcnn, build_wsp_cnn, transfer_conv_weights
from .synthetic import frames_of
from .tensor import softmax
from .training import (
    TrainingConfig, TrainingError, compute_class_weights, fit, segment_set, train_fusion, train_temporal,
    train_weighted_linear,
)

log = logging.getLogger("rgbd_scene")

STAGES = ("wsp", "finetune", "temporal", "joint", "scratch")
AGGREGATES = ("none", "ave", "lstm")


class UsageError(Exception):
    """Bad flags or flag combinations (exit 2)."""


class RunFailure(Exception):
    """Inputs that are well-formed but cannot be used together (exit 1)."""


def _paths(value):
    if isinstance(value, (list, tuple)):
        return list(value)
    return [p for p in str(value).split(",") if p]


def _optional_int(value):
    return None if value in (None, "", "auto") else int(value)


# name -> (parser, default); None defaults are filled in per command
PARAMS = {
    "gen-data": {
        "out": (str, None),
        "classes": (int, 10),
        "per_class": (int, 20),
        "videos_per_class": (_optional_int, None),
        "video_frames": (int, 45),
        "sensor_range": (float, synthetic.SENSOR_RANGE),
        "size": (int, 40),
        "video_size": (int, 32),
        "train_fraction": (float, 0.6),
        "seed": (int, 0),
    },
    "train": {
        "stage": (str, None),
        "modality": (str, "depth"),
        "manifest": (str, None),
        "init": (_paths, []),
        "out": (str, None),
        "epochs": (int, 30),
        "learning_rate": (float, 0.01),
        "momentum": (float, 0.9),
        "weight_decay": (float, 5e-4),
        "batch_size": (int, 32),
        "freeze": (_paths, []),
        "scale": (float, 0.125),
        "hidden": (_optional_int, None),
        "grid": (int, 4),
        "patch": (int, 17),
        "T": (int, 9),
        "lstm_hidden": (int, 32),
        "fusion_hidden": (int, 32),
        "fusion_epochs": (int, 30),
        "fusion_learning_rate": (float, 0.01),
        "segment_len": (int, 5),
        "seed": (int, 0),
    },
    "eval": {
        "checkpoint": (str, None),
        "manifest": (str, None),
        "aggregate": (str, None),
        "modality": (str, None),
        "wsvm_p": (float, None),
        "T": (int, 9),
        "segment_len": (int, 5),
        "out": (str, None),
        "seed": (int, 0),
    },
    "diag": {
        "checkpoint": (str, None),
        "manifest": (str, None),
        "layer": (str, None),
        "modality": (str, None),
        "role": (str, "test"),
        "out": (str, None),
    },
}

# stage-specific defaults sit between the base defaults and the config file
STAGE_DEFAULTS = {"joint": {"epochs": 5, "learning_rate": 0.003}}

REQUIRED = {
    "gen-data": ("out",),
    "train": ("stage", "manifest", "out"),
    "eval": ("checkpoint", "manifest"),
    "diag": ("checkpoint", "manifest", "layer", "out"),
}

CHOICES = {
    "stage": STAGES,
    "modality": ("rgb", "depth", "rgbd"),
    "aggregate": AGGREGATES,
    "role": ("train", "test"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser():
    parser = _Parser(prog="rgbd-scene", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "gen-data": "render a synthetic RGB-D corpus with a manifest",
        "train": "run one training stage",
        "eval": "evaluate a checkpoint on the test split",
        "diag": "activation-rate table and filter grid for one conv layer",
    }
    for cmd, params in PARAMS.items():
        p = sub.add_parser(cmd, help=helps[cmd])
        p.add_argument("--config", help="key=value file; flags override its values")
        for name, (kind, _) in params.items():
            flag = "--" + name.replace("_", "-")
            kw = {"dest": name, "default": None}
            if name in CHOICES:
                kw["choices"] = CHOICES[name]
            if kind is _paths:
                kw["nargs"] = "+"
            else:
                kw["type"] = kind
            p.add_argument(flag, **kw)
    return parser


def read_config_file(path, params):
    """Parse ``key=value`` lines; ``#`` starts a comment line."""
    values = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in params:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        kind = params[key][0]
        try:
            values[key] = kind(value) if value != "" else None
        except ValueError:
            raise UsageError(f"{path}:{lineno}: bad value {value!r} for {key}") from None
    return values


def resolve(command, args):
    """Merge base defaults, stage defaults, config file and flags (in rising priority)."""
    params = PARAMS[command]
    cfg = {name: default for name, (_, default) in params.items()}
    from_file = read_config_file(args.config, params) if args.config else {}
    flags = {k: getattr(args, k) for k in params if getattr(args, k) is not None}
    stage = flags.get("stage", from_file.get("stage"))
    cfg.update(STAGE_DEFAULTS.get(stage, {}))
    cfg.update({k: v for k, v in from_file.items() if v is not None})
    cfg.update(flags)
    for key, allowed in CHOICES.items():
        if key in cfg and cfg[key] is not None and cfg[key] not in allowed:
            raise UsageError(f"{key} must be one of {', '.join(allowed)}, got {cfg[key]!r}")
    missing = [k for k in REQUIRED[command] if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError(f"{command}: missing required " + ", ".join("--" + k.replace("_", "-") for k in missing))
    return cfg


def _format(value):
    if value is None:
        return ""
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


def echo_config(command, cfg, out):
    lines = [f"# rgbd-scene {command}"] + [f"{k}={_format(v)}" for k, v in cfg.items()]
    (Path(out) / "config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _emit(lines, log_path=None):
    for line in lines:
        print(line)
    if log_path is not None:
        with open(log_path, "a", encoding="utf-8") as fh:
            fh.write("".join(line + "\n" for line in lines))


def _out_dir(cfg):
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(cfg):
    if cfg["classes"] < 1 or cfg["classes"] > len(synthetic.CLASS_NAMES):
        raise UsageError(f"--classes must be in 1..{len(synthetic.CLASS_NAMES)}")
    if cfg["per_class"] < 1:
        raise UsageError("--per-class must be >= 1")
    if cfg["video_frames"] < 0:
        raise UsageError("--video-frames must be >= 0 (0 skips videos)")
    if not cfg["sensor_range"] > 0:
        raise UsageError("--sensor-range must be positive")
    if not 0 < cfg["train_fraction"] < 1:
        raise UsageError("--train-fraction must be in (0, 1)")
    if cfg["videos_per_class"] is None:
        cfg["videos_per_class"] = cfg["per_class"]
    n_videos = cfg["videos_per_class"]
    if n_videos < 0:
        raise UsageError("--videos-per-class must be >= 0")
    n_train = int(round(cfg["per_class"] * cfg["train_fraction"]))
    if n_train < 1:
        raise UsageError("--per-class and --train-fraction leave no training images")
    out = _out_dir(cfg)
    seed = cfg["seed"]
    records = []

    def store(rel, tensor, label, modality, role, seq=None, frame=None):
        path = out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        save_image(path, tensor)
        records.append(ManifestRecord(rel, label, modality, role, seq, frame))

    for k, name in enumerate(synthetic.CLASS_NAMES[:cfg["classes"]]):
        for i in range(cfg["per_class"]):
            role = "train" if i < n_train else "test"
            sc = synthetic.generate_synthetic_scene(k, seed * 100003 + i, "image", size=cfg["size"],
                                                    sensor_range=cfg["sensor_range"])
            stem = f"images/{role}/{name}/{i:04d}"
            store(f"{stem}_rgb.ppm", sc.rgb, name, "rgb", role)
            store(f"{stem}_depth.pgm", sc.depth_raw, name, "depth", role)
        if not cfg["video_frames"]:
            continue
        v_train = int(round(n_videos * cfg["train_fraction"]))
        for i in range(n_videos):
            role = "train" if i < v_train else "test"
            frames = synthetic.generate_synthetic_scene(
                k, (seed + 1) * 100003 + i, "video", n_frames=cfg["video_frames"], size=cfg["video_size"],
                sensor_range=cfg["sensor_range"])
            seq = f"{name}-{i:04d}"
            for t, f in enumerate(frames):
                stem = f"videos/{role}/{name}/{i:04d}/{t:03d}"
                store(f"{stem}_rgb.ppm", f.rgb, name, "rgb", role, seq, t)
                store(f"{stem}_depth.pgm", f.depth_raw, name, "depth", role, seq, t)
    write_manifest(out / "manifest.tsv", records)
    echo_config("gen-data", cfg, out)
    stills = [r for r in records if r.sequence_id is None and r.modality == "rgb"]
    seqs = {r.sequence_id for r in records if r.sequence_id is not None}
    lines = [metric_line("gen.classes", cfg["classes"]),
             metric_line("gen.images", len(stills)),
             metric_line("gen.images.train", sum(r.role == "train" for r in stills)),
             metric_line("gen.videos", len(seqs)),
             metric_line("gen.records", len(records))]
    _emit(lines)
    return 0


# ---------------------------------------------------------------------------
# shared loading


def _load_manifest(path):
    path = Path(path)
    return read_manifest(path), path.parent


def _still_images(records, root, role, modality, classes, segment_len):
    """Still images of a split, or video keyframes when the manifest has no stills."""
    ds = images_from_manifest(records, root, role, modality, classes)
    if len(ds):
        return ds
    videos = sequences_from_manifest(records, root, role, (modality,), classes, segment_len)
    if not len(videos):
        return ds
    return frames_of(videos, modality)


def _num_classes(model):
    if isinstance(model, Model):
        return model.spec.num_classes
    if isinstance(model, CnnLstm):
        return model.cnn.spec.num_classes
    return model.rgb.cnn.spec.num_classes


def _check_taxonomy(model, spec, classes, path):
    stored = spec.get("extra", {}).get("classes")
    if stored is not None and list(stored) != list(classes):
        raise RunFailure(f"taxonomy mismatch: {path} was trained on {stored}, manifest has {classes}")
    if _num_classes(model) != len(classes):
        raise RunFailure(f"taxonomy mismatch: {path} predicts {_num_classes(model)} classes, "
                         f"manifest has {len(classes)}")


def _effective_T(videos, T):
    length = next(iter(videos.frames.values())).shape[1] if len(videos) else 0
    if 0 < length < T:
        log.warning("sequences have %d keyframes, fewer than T=%d; using T=%d", length, T, length)
        return length
    return T


# ---------------------------------------------------------------------------
# train

PRIOR = {
    "finetune": ("wsp", "a --stage wsp checkpoint"),
    "temporal": ("cnn", "a --stage finetune or --stage scratch checkpoint"),
    "joint": ("cnn_lstm", "a --stage temporal checkpoint"),
}


def _load_init(cfg, classes):
    stage, inits = cfg["stage"], cfg["init"]
    if stage not in PRIOR:
        if inits:
            raise UsageError(f"--stage {stage} starts from random weights and takes no --init")
        return []
    kind, what = PRIOR[stage]
    need = 2 if (stage == "joint" and cfg["modality"] == "rgbd") else 1
    if len(inits) != need:
        per = " (rgb first, then depth)" if need == 2 else ""
        raise UsageError(f"--stage {stage} --modality {cfg['modality']} needs --init with {need} path(s): "
                         f"{what}{per}")
    models = []
    for path in inits:
        model, spec = load_checkpoint(path)
        got = spec["kind"]
        if kind == "wsp":
            ok = got == "cnn" and spec["model"]["name"] == "wsp"
        elif kind == "cnn":
            ok = got == "cnn" and spec["model"]["name"] == "dcnn"
        else:
            ok = got == kind
        if not ok:
            raise UsageError(f"--stage {stage} needs --init with {what}; {path} holds a {got} model")
        _check_taxonomy(model, spec, classes, path)
        models.append((model, spec.get("extra", {})))
    if need == 2:
        mods = [extra.get("modality") for _, extra in models]
        if mods != ["rgb", "depth"] and all(m is not None for m in mods):
            raise UsageError(f"--init checkpoints must be rgb then depth, got {mods}")
    return models


def _epoch_lines(history):
    lines = []
    for rec in history:
        name = f"{rec['stage']}.epoch{rec['epoch']:03d}"
        lines.append(metric_line(f"{name}.loss", float(rec["loss"])))
        lines.append(metric_line(f"{name}.mean_class_accuracy", float(rec["mean_class_accuracy"])))
    return lines


def _report_lines(probs_or_preds, labels, classes, prefix):
    y = np.asarray(labels)
    if y.size == 0:
        log.warning("no test samples; skipping evaluation")
        return []
    preds = probs_or_preds.argmax(axis=1) if np.ndim(probs_or_preds) == 2 else probs_or_preds
    return mean_class_accuracy(preds, y, num_classes=len(classes)).lines(classes, prefix=prefix)


def cmd_train(cfg):
    stage, modality = cfg["stage"], cfg["modality"]
    if modality == "rgbd" and stage != "joint":
        raise UsageError(f"--stage {stage} trains one modality; use rgb or depth (rgbd is for --stage joint)")
    if cfg["T"] < 1:
        raise UsageError("--T must be >= 1")
    try:
        tc = TrainingConfig(learning_rate=cfg["learning_rate"], momentum=cfg["momentum"],
                            weight_decay=cfg["weight_decay"], batch_size=cfg["batch_size"], epochs=cfg["epochs"],
                            seed=cfg["seed"], freeze_mask=cfg["freeze"])
        fusion_tc = TrainingConfig(learning_rate=cfg["fusion_learning_rate"], momentum=cfg["momentum"],
                                   weight_decay=cfg["weight_decay"], batch_size=cfg["batch_size"],
                                   epochs=cfg["fusion_epochs"], seed=cfg["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    records, root = _load_manifest(cfg["manifest"])
    classes = class_list(records)
    inits = _load_init(cfg, classes)
    out = _out_dir(cfg)
    echo_config("train", cfg, out)
    log_path = out / "metrics.log"
    log_path.write_text("", encoding="utf-8")
    extra = {"classes": classes, "modality": modality, "stage": stage}
    seed, k = cfg["seed"], len(classes)
    seg = cfg["segment_len"]

    if stage in ("wsp", "scratch", "finetune"):
        train = _still_images(records, root, "train", modality, classes, seg)
        test = _still_images(records, root, "test", modality, classes, seg)
        if not len(train):
            raise RunFailure(f"manifest has no training {modality} images")
        if stage == "wsp":
            train = patch_dataset(train, cfg["grid"], cfg["patch"])
            if len(test):
                test = patch_dataset(test, cfg["grid"], cfg["patch"])
            model = Model(build_wsp_cnn(train.x.shape[1:], k, cfg["scale"], cfg["hidden"]), seed=seed)
        else:
            model = Model(build_dcnn(train.x.shape[1:], k, cfg["scale"], cfg["hidden"]), seed=seed + 1)
            if stage == "finetune":
                transfer_conv_weights(inits[0][0], model)
        history = fit(model, train.x, train.y, tc, name=stage)
        ckpt = save_checkpoint(out / f"{'wsp' if stage == 'wsp' else 'dcnn'}.dsc", model, extra)
        lines = _epoch_lines(history)
        if len(test):
            lines += _report_lines(model.predict_proba(test.x), test.y, classes, "test")
    else:
        mods = ("rgb", "depth") if modality == "rgbd" else (modality,)
        train = sequences_from_manifest(records, root, "train", mods, classes, seg)
        test = sequences_from_manifest(records, root, "test", mods, classes, seg)
        if not len(train):
            raise RunFailure("manifest has no training videos")
        T = _effective_T(train, cfg["T"])
        extra["T"] = T
        if stage == "temporal":
            model, history = train_temporal(inits[0][0], train, modality, T, cfg["lstm_hidden"], tc, seed=seed)
            ckpt = save_checkpoint(out / "temporal.dsc", model, extra)
        elif modality != "rgbd":
            model = inits[0][0]
            model.train_cnn = True
            segs, labels = segment_set(train, T, modality)
            history = fit(model, segs, labels, tc, name=f"joint-{modality}")
            ckpt = save_checkpoint(out / "joint.dsc", model, extra)
        else:
            frozen, model, history = train_fusion(inits[0][0], inits[1][0], train, T, cfg["fusion_hidden"],
                                                  fusion_tc, tc, seed=seed)
            save_checkpoint(out / "fused_temporal.dsc", frozen, {**extra, "stage": "fusion"})
            ckpt = save_checkpoint(out / "fused.dsc", model, extra)
        lines = _epoch_lines(history)
        if len(test):
            segs, labels = _segments(test, T, modality)
            lines += _report_lines(model.predict_proba(segs), labels, classes, "test")
    _emit(lines, log_path)
    print(f"checkpoint\t{ckpt}")
    return 0


def _segments(videos, T, modality):
    if modality == "rgbd":
        rs, labels = segment_set(videos, T, "rgb")
        ds, _ = segment_set(videos, T, "depth")
        return (rs, ds), labels
    return segment_set(videos, T, modality)


# ---------------------------------------------------------------------------
# eval


def _frame_models(model, modality):
    """(cnn, modality) pairs whose per-frame outputs are combined."""
    if isinstance(model, Model):
        if modality == "rgbd":
            raise UsageError("a single CNN checkpoint takes --modality rgb or depth")
        return [(model, modality)]
    if isinstance(model, CnnLstm):
        return [(model.cnn, modality)]
    return [(model.rgb.cnn, "rgb"), (model.depth.cnn, "depth")]


def _frame_outputs(pairs, data, wsvm):
    """Per-frame class probabilities (or linear-head scores turned into probabilities)."""
    if wsvm is None:
        return average_predictions([cnn.predict_proba(data[mod]) for cnn, mod in pairs])
    feats = np.concatenate([cnn.features(data[mod]) for cnn, mod in pairs], axis=1)
    return softmax(wsvm.scores(feats).astype(np.float64))


def _fit_wsvm(features, labels, p, k, seed):
    counts = np.bincount(labels, minlength=k)
    weights = compute_class_weights(counts, p)
    return train_weighted_linear(features, labels, weights, num_classes=k, seed=seed)


def cmd_eval(cfg):
    model, spec = load_checkpoint(cfg["checkpoint"])
    extra = spec.get("extra", {})
    video_model = isinstance(model, (CnnLstm, FusedVideoModel))
    modality = cfg["modality"] or extra.get("modality") or ("rgbd" if isinstance(model, FusedVideoModel) else "depth")
    if isinstance(model, FusedVideoModel) and modality != "rgbd":
        raise UsageError("a fused checkpoint is evaluated with --modality rgbd")
    aggregate = cfg["aggregate"] or ("lstm" if video_model else "none")
    if aggregate == "lstm" and not video_model:
        raise UsageError("--aggregate lstm needs a temporal, joint or fused checkpoint")
    records, root = _load_manifest(cfg["manifest"])
    classes = class_list(records)
    _check_taxonomy(model, spec, classes, cfg["checkpoint"])
    k, p, seg = len(classes), cfg["wsvm_p"], cfg["segment_len"]
    mods = ("rgb", "depth") if modality == "rgbd" else (modality,)

    if aggregate == "lstm":
        train = sequences_from_manifest(records, root, "train", mods, classes, seg)
        test = sequences_from_manifest(records, root, "test", mods, classes, seg)
        if not len(test):
            raise RunFailure("manifest has no test videos")
        T = _effective_T(test, cfg["T"])
        segs, labels = _segments(test, T, modality)
        if p is None:
            preds = model.predict_proba(segs).argmax(axis=1)
        else:
            tsegs, tlabels = _segments(train, T, modality)
            wsvm = _fit_wsvm(_embed(model, tsegs), tlabels, p, k, cfg["seed"])
            preds = wsvm.predict(_embed(model, segs))
    else:
        pairs = _frame_models(model, modality)
        wsvm = None
        if p is not None:
            train = _frame_data(records, root, "train", mods, classes, seg, aggregate)
            feats = np.concatenate([cnn.features(train[0][m]) for cnn, m in pairs], axis=1)
            wsvm = _fit_wsvm(feats, train[1], p, k, cfg["seed"])
        if aggregate == "none":
            data, labels = _frame_data(records, root, "test", mods, classes, seg, aggregate)
            preds = _frame_outputs(pairs, data, wsvm).argmax(axis=1)
        else:
            test = sequences_from_manifest(records, root, "test", mods, classes, seg)
            if not len(test):
                raise RunFailure("manifest has no test videos")
            n, t = len(test), next(iter(test.frames.values())).shape[1]
            flat = {m: a.reshape(n * t, *a.shape[2:]) for m, a in test.frames.items()}
            per_frame = _frame_outputs(pairs, flat, wsvm).reshape(n, t, -1)
            preds = average_predictions(list(per_frame.transpose(1, 0, 2))).argmax(axis=1)
            labels = test.y
    if len(labels) == 0:
        raise RunFailure("no test samples to evaluate")
    report = mean_class_accuracy(preds, labels, num_classes=k)
    print(report.table(classes))
    lines = report.lines(classes, prefix=f"eval.{aggregate}")
    log_path = None
    if cfg["out"]:
        out = _out_dir(cfg)
        echo_config("eval", cfg, out)
        (out / "report.txt").write_text(report.table(classes) + "\n", encoding="utf-8")
        log_path = out / "metrics.log"
        log_path.write_text("", encoding="utf-8")
    _emit(lines, log_path)
    return 0


def _embed(model, segs):
    if isinstance(model, FusedVideoModel):
        return np.concatenate([model.rgb.embed(segs[0]), model.depth.embed(segs[1])], axis=1)
    return model.embed(segs)


def _frame_data(records, root, role, mods, classes, seg, aggregate):
    """``({modality: frames}, labels)`` of single frames for one split."""
    data, labels = {}, None
    for m in mods:
        ds = _still_images(records, root, role, m, classes, seg)
        if labels is not None and not np.array_equal(labels, ds.y):
            raise RunFailure(f"{role} rgb and depth images do not pair up")
        data[m], labels = ds.x, ds.y
    if labels is None or len(labels) == 0:
        raise RunFailure(f"manifest has no {role} images")
    return data, labels


# ---------------------------------------------------------------------------
# diag


def cmd_diag(cfg):
    model, spec = load_checkpoint(cfg["checkpoint"])
    extra = spec.get("extra", {})
    modality = cfg["modality"] or extra.get("modality") or "depth"
    if isinstance(model, FusedVideoModel):
        if modality not in ("rgb", "depth"):
            raise UsageError("a fused checkpoint needs --modality rgb or depth to pick a branch")
        cnn = model.rgb.cnn if modality == "rgb" else model.depth.cnn
    elif isinstance(model, CnnLstm):
        cnn = model.cnn
    else:
        cnn = model
    if modality == "rgbd":
        raise UsageError("--modality must be rgb or depth for diag")
    convs = cnn.conv_layers()
    layer = cfg["layer"]
    if layer not in convs:
        raise UsageError(f"unknown layer {layer!r}; conv layers are {', '.join(convs)}")
    records, root = _load_manifest(cfg["manifest"])
    classes = class_list(records)
    _check_taxonomy(model, spec, classes, cfg["checkpoint"])
    images = _still_images(records, root, cfg["role"], modality, classes, 5)
    if not len(images):
        raise RunFailure(f"manifest has no {cfg['role']} {modality} images")
    profile = activation_rate(cnn, layer, images.x, dataset=f"{Path(cfg['manifest']).name}:{cfg['role']}")
    out = _out_dir(cfg)
    echo_config("diag", cfg, out)
    (out / f"activation_{layer}.tsv").write_text(profile.table(), encoding="utf-8")
    grid = filter_grid(cnn.params[f"{layer}.weight"])
    if grid.shape[0] == 1:
        grid = np.repeat(grid, 3, axis=0)
    save_image(out / f"filters_{layer}.ppm", grid)
    lines = [metric_line(f"diag.{layer}.filters", len(profile.rates)),
             metric_line(f"diag.{layer}.mean_rate", float(profile.rates.mean())),
             metric_line(f"diag.{layer}.gini", gini(profile.rates))]
    log_path = out / "metrics.log"
    log_path.write_text("", encoding="utf-8")
    _emit(lines, log_path)
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "diag": cmd_diag}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve(args.command, args)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (RunFailure, OSError, ManifestError, ImageFormatError, CheckpointError, TrainingError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
