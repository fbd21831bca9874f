"""
Patch pretraining versus training from scratch
==============================================

Depth images carry little texture, so a small training set is not much to
learn a conv stem from.  Here the stem is first trained on a grid of
patches that inherit their image's label, then the full network is
fine-tuned on whole images.  The same network trained from random weights
serves as the baseline.
"""

import time

from rgbd_scene.analysis import mean_class_accuracy
from rgbd_scene.data import patch_dataset
from rgbd_scene.synthetic import image_corpus
from rgbd_scene.training import TrainingConfig, TwoStepConfig, run_two_step

SEEDS = (0, 1)
EPOCHS = 30

for seed in SEEDS:
    t0 = time.time()
    corpus = image_corpus(per_class=34, seed=seed, size=40, modalities=("depth",))
    train, test = corpus["train"]["depth"], corpus["test"]["depth"]
    # 4 x 4 grid of 17 x 17 patches from every 40 x 40 image
    patches = patch_dataset(train, 4, 17)

    scores = {}
    for name, wsp_epochs in (("scratch", 0), ("two-step", EPOCHS)):
        cfg = TwoStepConfig(scale=0.125, grid=4, patch=17, seed=seed,
                            wsp=TrainingConfig(epochs=wsp_epochs, seed=seed),
                            finetune=TrainingConfig(epochs=EPOCHS, seed=seed))
        result = run_two_step(patches, train, cfg)
        pred = result.dcnn.predict_proba(test.x).argmax(axis=1)
        scores[name] = mean_class_accuracy(pred, test.y).mean_class_accuracy

    print(f"seed {seed}: scratch {scores['scratch']:.3f}  two-step {scores['two-step']:.3f}"
          f"  ({time.time() - t0:.0f} s)")
