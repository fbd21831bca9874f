"""
How evenly are the filters used?
================================

Trains one frame CNN per modality and measures, for every conv filter, the
fraction of (image, site) pairs where it fires.  A high Gini coefficient
means a few filters do most of the work.  The sorted rate tables and the
first-layer filters are written next to this script.
"""

from pathlib import Path

from rgbd_scene.analysis import activation_rate, export_filter_grid, gini
from rgbd_scene.models import Model, build_dcnn
from rgbd_scene.synthetic import image_corpus
from rgbd_scene.training import TrainingConfig, fit

out = Path(__file__).with_name("diagnostics")
out.mkdir(exist_ok=True)
corpus = image_corpus(per_class=20, seed=0, size=40)

for modality in ("rgb", "depth"):
    train, test = corpus["train"][modality], corpus["test"][modality]
    model = Model(build_dcnn(train.x.shape[1:], len(train.classes), scale=0.125), seed=0)
    fit(model, train.x, train.y, TrainingConfig(epochs=15))
    for layer in model.conv_layers():
        profile = activation_rate(model, layer, test.x, dataset=f"synthetic {modality}")
        (out / f"{modality}_{layer}.tsv").write_text(profile.table())
        print(f"{modality:<5} {layer}  mean rate {profile.rates.mean():.3f}  gini {gini(profile.rates):.3f}")
    export_filter_grid(model, "conv1", out / f"{modality}_conv1_filters.ppm")
