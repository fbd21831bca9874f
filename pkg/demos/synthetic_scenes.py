"""
Synthetic RGB-D scenes
======================

Renders one scene per class, then one video, and writes them as PPM/PGM
files next to this script.  The depth sensor has a limited range, so far
structures show up in RGB long before they show up in depth.
"""

from pathlib import Path

import numpy as np

from rgbd_scene.data import save_image
from rgbd_scene.synthetic import CLASS_NAMES, generate_synthetic_scene

out = Path(__file__).with_name("scenes")
out.mkdir(exist_ok=True)

# one still image per class: RGB, raw depth (0 = no reading) and its jet encoding
for k, name in enumerate(CLASS_NAMES):
    scene = generate_synthetic_scene(k, seed=0, size=64)
    save_image(out / f"{name}_rgb.ppm", scene.rgb)
    save_image(out / f"{name}_depth.pgm", scene.depth_raw)
    save_image(out / f"{name}_jet.ppm", scene.depth_encoded)
    print(f"{name:<12} missing depth: {scene.missing.mean():5.1%}")

# a panned video: the missing fraction drops as the camera moves in
frames = generate_synthetic_scene(1, seed=0, mode="video", n_frames=45, size=64)
for t in (0, 22, 44):
    print(f"frame {t:2d} missing depth: {frames[t].missing.mean():5.1%}")

# a longer sensor range removes the holes altogether
far = generate_synthetic_scene(1, seed=0, size=64, sensor_range=np.inf)
print(f"unlimited range missing depth: {far.missing.mean():5.1%}")
