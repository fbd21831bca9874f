"""Acceptance suite: one test per criterion, each reporting a pass/fail line.

The directional criteria (4 to 7) train real models on the synthetic corpus
and take several minutes.  Criteria 5 to 7 share one set of five video runs.
"""

import time

import numpy as np
import pytest

from rgbd_scene import tensor as T
from rgbd_scene.analysis import average_predictions, mean_class_accuracy
from rgbd_scene.checkpoint import crc_of
from rgbd_scene.cli import main as cli
from rgbd_scene.data import expected_keyframes, jet_encode, patch_dataset, select_keyframes
from rgbd_scene.layers import GATE_NAMES, LstmState, LstmWeights, SppSpec, lstm_backward, lstm_step, lstm_unroll, \
    spp_backward, spp_forward
from rgbd_scene.models import Model, build_dcnn, build_wsp_cnn, transfer_conv_weights
from rgbd_scene.synthetic import frames_of, image_corpus, video_corpus
from rgbd_scene.training import (
    ThreeStepConfig, TrainingConfig, TwoStepConfig, compute_class_weights, run_three_step, run_two_step, segment_set,
    train_temporal, train_weighted_linear,
)

SEEDS = range(5)


def mca(pred, y):
    return mean_class_accuracy(pred, y).mean_class_accuracy


def wins(pairs, margin=0.0):
    return sum(a >= b + margin for a, b in pairs)


# ---------------------------------------------------------------------------
# 1. gradient correctness

TOL = 1e-3
EPS = 1e-6
FLOOR = 1e-7


def _numeric(f, x):
    """Central differences in extended precision.

    Saturated LSTM gates give gradient entries near 1e-9, below what float64
    differencing can resolve; the layers run unchanged on longdouble inputs.
    """
    x = np.array(x, dtype=np.longdouble)
    flat = x.reshape(-1)
    grad = np.zeros(flat.size, dtype=np.longdouble)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + EPS
        fp = f(x)
        flat[i] = orig - EPS
        fm = f(x)
        flat[i] = orig
        grad[i] = (np.longdouble(fp) - np.longdouble(fm)) / (2 * EPS)
    return grad.reshape(x.shape)


def _check(analytic, f, x):
    return T.relative_error(analytic, _numeric(f, x).astype(np.float64), floor=FLOOR)


def _grad_errors(seed):
    """Max relative error of every layer's backward pass against central differences."""
    rng = np.random.default_rng(seed)
    errs = {}

    # conv with random stride and padding
    c, k = rng.integers(1, 3), rng.integers(1, 3)
    ksz, stride, pad = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x = rng.normal(size=(2, c, 6, 5))
    w = rng.normal(size=(k, c, ksz, ksz))
    b = rng.normal(size=k)
    r = rng.normal(size=T.conv2d_forward(x, w, b, stride, pad).shape)
    dx, dw, db = T.conv2d_backward(r, x, w, stride, pad)
    errs["conv"] = max(_check(dx, lambda v: np.sum(T.conv2d_forward(v, w, b, stride, pad) * r), x),
                       _check(dw, lambda v: np.sum(T.conv2d_forward(x, v, b, stride, pad) * r), w),
                       _check(db, lambda v: np.sum(T.conv2d_forward(x, w, v, stride, pad) * r), b))

    # max pooling
    x = rng.normal(size=(2, 2, 6, 6))
    win, st = int(rng.integers(2, 4)), int(rng.integers(1, 3))
    r = rng.normal(size=T.maxpool_forward(x, win, st).shape)
    errs["pool"] = _check(T.maxpool_backward(r, x, win, st), lambda v: np.sum(T.maxpool_forward(v, win, st) * r), x)

    # fully connected
    x = rng.normal(size=(3, 5))
    w = rng.normal(size=(4, 5))
    b = rng.normal(size=4)
    r = rng.normal(size=(3, 4))
    dx, dw, db = T.fc_backward(r, x, w)
    errs["fc"] = max(_check(dx, lambda v: np.sum(T.fc_forward(v, w, b) * r), x),
                     _check(dw, lambda v: np.sum(T.fc_forward(x, v, b) * r), w),
                     _check(db, lambda v: np.sum(T.fc_forward(x, w, v) * r), b))

    # spatial pyramid pooling
    spec = SppSpec()
    x = rng.normal(size=(2, 2, int(rng.integers(3, 8)), int(rng.integers(3, 8))))
    r = rng.normal(size=spp_forward(x, spec).shape)
    errs["spp"] = _check(spp_backward(r, x, spec), lambda v: np.sum(spp_forward(v, spec) * r), x)

    # softmax cross-entropy
    logits = rng.normal(size=(3, 4)) * 2
    labels = rng.integers(0, 4, size=3)
    _, _, dl = T.softmax_cross_entropy(logits, labels)
    errs["softmax_ce"] = _check(dl, lambda v: T.softmax_cross_entropy(v, labels)[0], logits)

    # one LSTM step and BPTT over T <= 4
    d, h = 3, 4
    lw = LstmWeights(**{n: rng.normal(size=(h, d if n.endswith("x") else h)) for n in GATE_NAMES})
    prev = LstmState(rng.normal(size=h), rng.normal(size=h))
    xt = rng.normal(size=d)
    r = rng.normal(size=h)
    grads, dxs = lstm_backward([lstm_step(xt, prev, lw)], lw, dm_final=r)
    step_err = _check(dxs[0], lambda v: lstm_step(v, prev, lw).m @ r, xt)
    for n in GATE_NAMES:
        step_err = max(step_err, _check(
            grads[n], lambda v, n=n: lstm_step(xt, prev, LstmWeights(**{**lw.as_dict(), n: v})).m @ r,
            getattr(lw, n)))
    errs["lstm_step"] = step_err

    steps = int(rng.integers(1, 5))
    xs = rng.normal(size=(steps, d))
    _, states = lstm_unroll(list(xs), lw)
    grads, dxs = lstm_backward(states, lw, dm_final=r)
    bptt_err = _check(np.stack(dxs), lambda v: lstm_unroll(list(v), lw)[0].m @ r, xs)
    for n in GATE_NAMES:
        bptt_err = max(bptt_err, _check(
            grads[n], lambda v, n=n: lstm_unroll(list(xs), LstmWeights(**{**lw.as_dict(), n: v}))[0].m @ r,
            getattr(lw, n)))
    errs["bptt"] = bptt_err
    return errs


def test_criterion_1_gradient_correctness(criteria):
    t0 = time.time()
    worst = {}
    for seed in range(100):
        for layer, err in _grad_errors(seed).items():
            worst[layer] = max(worst.get(layer, 0.0), err)
    elapsed = time.time() - t0
    ok = all(e < TOL for e in worst.values()) and elapsed < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    criteria.record(1, ok, f"100 seeds, worst relative error {detail}; {elapsed:.1f} s")
    assert ok


# ---------------------------------------------------------------------------
# 2. shape fidelity

def test_criterion_2_shape_fidelity(criteria):
    model = Model(build_dcnn((3, 119, 119), 10, scale=1.0), seed=0)
    rng = np.random.default_rng(0)
    full = rng.random((1, 3, 119, 119)).astype(np.float32)
    patch = rng.random((1, 3, 35, 35)).astype(np.float32)
    conv4 = model.forward(full, stop="conv4").shape
    spp_full = model.forward(full, stop="spp").shape
    spp_patch = model.forward(patch, stop="spp").shape
    declared = model.spec.shapes()
    ok = (conv4 == (1, 512, 29, 29) and declared["conv4"] == (512, 29, 29)
          and spp_full == (1, 7168) and spp_patch == (1, 7168)
          and build_wsp_cnn((3, 35, 35), 10, scale=1.0).shapes()["spp"] == (7168,))
    criteria.record(2, ok, f"conv4 {conv4[1:]}, spp width {spp_full[1]} at 119x119 and {spp_patch[1]} at 35x35")
    assert ok


# ---------------------------------------------------------------------------
# 3. transfer contract

def test_criterion_3_transfer_contract(criteria):
    wsp = Model(build_wsp_cnn((3, 17, 17), 10, scale=0.125), seed=1)
    dcnn = Model(build_dcnn((3, 40, 40), 10, scale=0.125), seed=2)
    transfer_conv_weights(wsp, dcnn)
    x = np.random.default_rng(3).random((4, 3, 40, 40)).astype(np.float32)
    same = []
    for name in ("conv1", "pool1", "conv2", "conv3", "conv4", "relu4"):
        same.append(wsp.forward(x, stop=name).tobytes() == dcnn.forward(x, stop=name).tobytes())
    ok = all(same)
    criteria.record(3, ok, f"{sum(same)}/{len(same)} shared stem outputs bitwise equal")
    assert ok


# ---------------------------------------------------------------------------
# 4. patch pretraining benefit

C4_GRID, C4_PATCH, C4_EPOCHS = 4, 17, 30


def _two_step_pair(seed):
    corpus = image_corpus(num_classes=10, per_class=34, seed=seed, size=40, modalities=("depth",))
    train, test = corpus["train"]["depth"], corpus["test"]["depth"]
    assert len(train) == 200
    patches = patch_dataset(train, C4_GRID, C4_PATCH)
    out = {}
    for name, wsp_epochs in (("scratch", 0), ("two_step", C4_EPOCHS)):
        cfg = TwoStepConfig(scale=0.125, grid=C4_GRID, patch=C4_PATCH, seed=seed,
                            wsp=TrainingConfig(epochs=wsp_epochs, seed=seed),
                            finetune=TrainingConfig(epochs=C4_EPOCHS, seed=seed))
        res = run_two_step(patches, train, cfg)
        out[name] = mca(res.dcnn.predict_proba(test.x).argmax(axis=1), test.y)
    return out


def test_criterion_4_patch_pretraining_benefit(criteria):
    t0 = time.time()
    runs = [_two_step_pair(seed) for seed in SEEDS]
    elapsed = time.time() - t0
    n = sum(r["two_step"] > r["scratch"] for r in runs)
    ok = n >= 4 and elapsed < 15 * 60
    pairs = ", ".join(f"{r['two_step']:.3f}/{r['scratch']:.3f}" for r in runs)
    criteria.record(4, ok, f"two-step beats scratch in {n}/5 seeds (two-step/scratch: {pairs}); {elapsed:.0f} s")
    assert ok


# ---------------------------------------------------------------------------
# 5 to 7. video runs

VIDEO_T = 9


def _video_run(seed):
    videos = video_corpus(num_classes=10, per_class=20, seed=seed)
    train, test = videos["train"], videos["test"]
    frames = {m: frames_of(train, m) for m in ("rgb", "depth")}
    patches = {"depth": patch_dataset(frames["depth"], 3, 17)}
    cfg = ThreeStepConfig(
        T=VIDEO_T, grid=3, patch=17, seed=seed,
        wsp=TrainingConfig(epochs=5, seed=seed), frame=TrainingConfig(epochs=10, seed=seed),
        temporal=TrainingConfig(epochs=30, seed=seed), fusion=TrainingConfig(epochs=30, seed=seed),
        joint=TrainingConfig(epochs=5, learning_rate=0.003, seed=seed))
    res = run_three_step(patches, frames, train, cfg)
    out = {}
    segs = {m: segment_set(test, VIDEO_T, m) for m in ("rgb", "depth")}
    y = segs["depth"][1]
    per_frame = {}
    for m in ("rgb", "depth"):
        s = segs[m][0]
        n, t = s.shape[:2]
        per_frame[m] = res.frame_cnn[m].predict_proba(s.reshape(n * t, *s.shape[2:])).reshape(n, t, -1)
        out[f"{m}_lstm"] = mca(res.temporal[m].predict_proba(s).argmax(1), y)
        out[f"{m}_ete"] = mca(res.joint[m].predict_proba(s).argmax(1), y)
        # the same recipe with one-keyframe segments
        single, _ = train_temporal(res.frame_cnn[m], train, m, 1, cfg.lstm_hidden, cfg.temporal, seed=seed + 5)
        s1, y1 = segment_set(test, 1, m)
        out[f"{m}_t1"] = mca(single.predict_proba(s1).argmax(1), y1)
    both = (segs["rgb"][0], segs["depth"][0])
    out["rgbd_ete"] = mca(res.fused.predict_proba(both).argmax(1), y)
    out["rgbd_lstm"] = mca(res.fused_temporal.predict_proba(both).argmax(1), y)
    frame_probs = [p for m in ("rgb", "depth") for p in per_frame[m].transpose(1, 0, 2)]
    out["rgbd_ave"] = mca(average_predictions(frame_probs).argmax(1), y)
    return out


@pytest.fixture(scope="module")
def video_runs():
    t0 = time.time()
    runs = [_video_run(seed) for seed in SEEDS]
    print(f"video runs took {time.time() - t0:.0f} s")
    return runs


def _fmt(runs, a, b):
    return ", ".join(f"{r[a]:.3f}/{r[b]:.3f}" for r in runs)


def test_criterion_5_video_benefit_for_depth(criteria, video_runs):
    n = wins([(r["depth_lstm"], r["depth_t1"]) for r in video_runs], margin=0.03)
    ok = n >= 4
    rgb_gain = np.mean([r["rgb_lstm"] - r["rgb_t1"] for r in video_runs])
    criteria.record(5, ok, f"depth T=9 beats T=1 by >=0.03 in {n}/5 seeds (T=9/T=1: "
                           f"{_fmt(video_runs, 'depth_lstm', 'depth_t1')}); mean rgb gain {rgb_gain:+.3f}")
    assert ok


def test_criterion_6_aggregation_ordering(criteria, video_runs):
    ete = wins([(r["rgbd_ete"], r["rgbd_lstm"]) for r in video_runs])
    lstm = wins([(r["rgbd_lstm"], r["rgbd_ave"]) for r in video_runs])
    ok = ete >= 4 and lstm >= 4
    criteria.record(6, ok, f"RGB-D EtE >= LSTM in {ete}/5 ({_fmt(video_runs, 'rgbd_ete', 'rgbd_lstm')}), "
                           f"LSTM >= AVE in {lstm}/5 ({_fmt(video_runs, 'rgbd_lstm', 'rgbd_ave')})")
    assert ok


def test_criterion_7_fusion_benefit(criteria, video_runs):
    pairs = [(r["rgbd_ete"], max(r["rgb_ete"], r["depth_ete"])) for r in video_runs]
    n = wins(pairs)
    ok = n >= 4
    detail = ", ".join(f"{a:.3f}/{b:.3f}" for a, b in pairs)
    criteria.record(7, ok, f"fused >= best single modality in {n}/5 seeds (fused/best: {detail})")
    assert ok


# ---------------------------------------------------------------------------
# 8 to 10

def test_criterion_8_weighted_classifier(criteria):
    weights = compute_class_weights([10, 40], p=2)
    exact = weights.tolist() == [1.0, 0.0625]
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(-1, 1, (40, 3)), rng.normal(1, 1, (10, 3))]).astype(np.float32)
    y = np.repeat([0, 1], [40, 10])
    plain = train_weighted_linear(x, y, num_classes=2, seed=3)
    ones = train_weighted_linear(x, y, np.ones(2), num_classes=2, seed=3)
    bitwise = plain.weight.tobytes() == ones.weight.tobytes() and plain.bias.tobytes() == ones.bias.tobytes()
    ok = exact and bitwise
    criteria.record(8, ok, f"weights {weights.tolist()}; all-ones run bitwise equal to unweighted: {bitwise}")
    assert ok


def test_criterion_9_metric_and_preprocessing_suite(criteria):
    frames = [np.random.default_rng(i).random((1, 4, 4)) for i in range(15)]
    counts = all(expected_keyframes(n) == -(-n // 5) and len(select_keyframes(frames[:n])) == -(-n // 5)
                 for n in range(1, 16))
    keyframes = len(select_keyframes(frames)) == 3 and counts
    jet = (jet_encode(np.zeros((1, 1, 1)))[:, 0, 0].tolist() == [0.0, 0.0, 0.5]
           and jet_encode(np.ones((1, 1, 1)))[:, 0, 0].tolist() == [0.5, 0.0, 0.0]
           and jet_encode(np.full((1, 1, 1), 0.5))[:, 0, 0].tolist() == [0.5, 1.0, 0.5])
    imbalanced = mca([0] * 10, [0] * 9 + [1]) == 0.5
    ok = keyframes and jet and imbalanced
    criteria.record(9, ok, f"keyframes {keyframes}, jet {jet}, imbalanced mean class accuracy {imbalanced}")
    assert ok


def test_criterion_10_determinism(criteria, tmp_path):
    def run(*argv):
        assert cli([str(a) for a in argv]) == 0

    data = tmp_path / "data"
    run("gen-data", "--classes", 3, "--per-class", 4, "--video-frames", 10, "--videos-per-class", 3,
        "--size", 24, "--video-size", 20, "--out", data)
    m = data / "manifest.tsv"
    common = ["--manifest", m, "--epochs", 2, "--seed", 7, "--grid", 2, "--T", 2, "--fusion-epochs", 2]
    chain = [
        ("wsp", "depth", [], "wsp.dsc"),
        ("finetune", "depth", ["wsp/wsp.dsc"], "dcnn.dsc"),
        ("scratch", "rgb", [], "dcnn.dsc"),
        ("temporal", "depth", ["finetune/dcnn.dsc"], "temporal.dsc"),
        ("temporal", "rgb", ["scratch/dcnn.dsc"], "temporal.dsc"),
        ("joint", "depth", ["temporal_depth/temporal.dsc"], "joint.dsc"),
        ("joint", "rgbd", ["temporal_rgb/temporal.dsc", "temporal_depth/temporal.dsc"], "fused.dsc"),
    ]
    matches = []
    for stage, mod, inits, ckpt in chain:
        name = stage if stage in ("wsp", "finetune", "scratch") else f"{stage}_{mod}"
        crcs = []
        for rep in ("", "_again"):
            out = tmp_path / f"{name}{rep}"
            init_args = ["--init", *[tmp_path / p for p in inits]] if inits else []
            run("train", "--stage", stage, "--modality", mod, *common, *init_args, "--out", out)
            crcs.append(crc_of(out / ckpt))
        matches.append(crcs[0] == crcs[1])
    ok = all(matches)
    criteria.record(10, ok, f"{sum(matches)}/{len(matches)} training commands repeat with identical checkpoint CRC32")
    assert ok
