"""
Temporal models and RGB-D fusion on panned videos
=================================================

The camera pans and moves forward, so depth sees more of the room in later
frames.  Three ways of turning a keyframe sequence into one prediction are
compared on RGB-D input:

* AVE: average the per-frame class probabilities of both frame CNNs
* LSTM: a fusion head over the final LSTM states, CNNs held fixed
* EtE: the same model fine-tuned end to end, CNNs included
"""

import numpy as np

from rgbd_scene.analysis import average_predictions, mean_class_accuracy
from rgbd_scene.data import patch_dataset
from rgbd_scene.synthetic import frames_of, video_corpus
from rgbd_scene.training import ThreeStepConfig, TrainingConfig, run_three_step, segment_set

seed = 0
videos = video_corpus(per_class=20, seed=seed)
train, test = videos["train"], videos["test"]
print("keyframes per video:", train.frames["depth"].shape[1])

frames = {m: frames_of(train, m) for m in ("rgb", "depth")}
patches = {"depth": patch_dataset(frames["depth"], 3, 17)}
cfg = ThreeStepConfig(T=9, grid=3, seed=seed,
                      wsp=TrainingConfig(epochs=5, seed=seed), frame=TrainingConfig(epochs=10, seed=seed),
                      temporal=TrainingConfig(epochs=30, seed=seed), fusion=TrainingConfig(epochs=30, seed=seed),
                      joint=TrainingConfig(epochs=5, learning_rate=0.003, seed=seed))
res = run_three_step(patches, frames, train, cfg)

rgb, y = segment_set(test, 9, "rgb")
depth, _ = segment_set(test, 9, "depth")


def score(pred):
    return mean_class_accuracy(pred, y).mean_class_accuracy


per_frame = []
for m, segs in (("rgb", rgb), ("depth", depth)):
    n, t = segs.shape[:2]
    probs = res.frame_cnn[m].predict_proba(segs.reshape(n * t, *segs.shape[2:])).reshape(n, t, -1)
    per_frame += list(probs.transpose(1, 0, 2))
    print(f"{m:<5} LSTM {score(res.temporal[m].predict_proba(segs).argmax(1)):.3f}"
          f"  EtE {score(res.joint[m].predict_proba(segs).argmax(1)):.3f}")

print(f"RGB-D AVE  {score(average_predictions(per_frame).argmax(1)):.3f}")
print(f"RGB-D LSTM {score(res.fused_temporal.predict_proba((rgb, depth)).argmax(1)):.3f}")
print(f"RGB-D EtE  {score(res.fused.predict_proba((rgb, depth)).argmax(1)):.3f}")
print("chance", 1 / len(np.unique(y)))
