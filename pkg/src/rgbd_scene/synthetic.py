"""Procedural RGB-D indoor scenes with a limited-range depth sensor.

Scenes are rendered orthographically from a wide panorama.  Every class is a
combination of four factors, each visible to a different subset of views:

========== ============================ ===================================
factor     what it is                   visible in
========== ============================ ===================================
layout     near furniture footprint     rgb, depth
offset     near furniture distance      depth only (rgb is pure albedo)
far        far structure shape          rgb always; depth once in range
texture    furniture surface pattern    rgb only
========== ============================ ===================================

Far structures sit beyond the sensor range at the start of a video.  Video
mode pans the camera sideways while moving forward, so they enter the depth
range in later frames; raw frames carry random motion blur.
"""

from dataclasses import dataclass

import numpy as np

from .data import LabeledSet, SequenceSet, jet_encode, keyframe_indices

MAX_DEPTH = 6.0
SENSOR_RANGE = 4.5
MIN_DEPTH = 0.3
WALL_DEPTH = 7.5
FAR_DEPTH = 5.6
NEAR_DEPTH = (2.0, 2.5)
ADVANCE = 1.6
PAN = 0.25
CLUTTER = (2, 5)
CLUTTER_DEPTH = (1.2, 4.2)
JITTER = 0.08

# (layout, offset, far, texture) per class
TAXONOMY = (
    (0, 0, 0, 0),
    (0, 0, 1, 0),
    (0, 1, 0, 0),
    (0, 1, 1, 1),
    (1, 0, 0, 0),
    (1, 0, 0, 1),
    (1, 1, 1, 0),
    (2, 0, 0, 0),
    (2, 0, 1, 1),
    (2, 1, 0, 0),
)
CLASS_NAMES = (
    "bedroom", "guest_room", "dorm", "hotel_room", "office",
    "study", "library", "dining_room", "cafe", "kitchen",
)

# furniture boxes as (x0, x1, y0, y1) in frame fractions, x measured on the panorama
LAYOUTS = (
    [(0.22, 0.82, 0.62, 0.88)],
    [(0.04, 0.24, 0.38, 0.92), (0.74, 0.94, 0.38, 0.92)],
    [(0.34, 0.70, 0.50, 0.66), (0.40, 0.64, 0.66, 0.92)],
)
FAR_SHAPES = (
    [(0.46, 0.60, 0.06, 0.52)],
    [(0.26, 0.86, 0.16, 0.30)],
)
HORIZON = 0.55


@dataclass
class SceneImage:
    rgb: np.ndarray
    depth_raw: np.ndarray

    @property
    def missing(self):
        return self.depth_raw[0] == 0

    @property
    def depth_encoded(self):
        return jet_encode(self.depth_raw, self.missing)

    def modality(self, name):
        return self.rgb if name == "rgb" else self.depth_encoded


def class_factors(class_id):
    if not 0 <= class_id < len(TAXONOMY):
        raise ValueError(f"unknown class {class_id}; taxonomy has {len(TAXONOMY)} classes")
    return TAXONOMY[class_id]


def _jitter_box(box, rng, amount):
    return tuple(v + rng.uniform(-amount, amount) for v in box)


def _fill(mask_shape, box, size, u0):
    """Boolean mask of a panorama box inside the frame starting at column u0."""
    h, w = mask_shape
    x0, x1, y0, y1 = box
    cols = np.arange(w) + u0
    rows = np.arange(h)
    cx = (cols >= x0 * size) & (cols < x1 * size)
    ry = (rows >= y0 * size) & (rows < y1 * size)
    return ry[:, None] & cx[None, :]


class _Scene:
    def __init__(self, class_id, rng, size):
        layout, offset, far, texture = class_factors(class_id)
        self.size = size
        self.pan_px = int(round(PAN * size))
        jit = JITTER
        self.near = []
        base = NEAR_DEPTH[offset] + rng.uniform(-0.25, 0.25)
        shift = rng.uniform(-0.06, 0.06) + PAN / 2
        for box in LAYOUTS[layout]:
            b = _jitter_box(box, rng, jit)
            b = (b[0] + shift, b[1] + shift, b[2], b[3])
            self.near.append((b, base + rng.uniform(-0.15, 0.15), rng.uniform(0.15, 0.95, 3)))
        self.texture = texture
        self.tex_freq = rng.uniform(0.9, 1.3)
        self.tex_phase = rng.uniform(0, 2 * np.pi)
        fshift = rng.uniform(-0.08, 0.08) + PAN / 2
        self.far = []
        for box in FAR_SHAPES[far]:
            b = _jitter_box(box, rng, jit)
            self.far.append(((b[0] + fshift, b[1] + fshift, b[2], b[3]),
                             FAR_DEPTH + rng.uniform(-0.2, 0.2), rng.uniform(0.15, 0.95, 3)))
        self.wall_color = rng.uniform(0.35, 0.75, 3)
        self.floor_color = rng.uniform(0.2, 0.6, 3)
        self.wall_depth = WALL_DEPTH + rng.uniform(-0.2, 0.2)
        self.horizon = HORIZON + rng.uniform(-0.03, 0.03)
        self.noise_seed = int(rng.integers(2**32))
        # class-independent distractors at random positions and depths
        self.clutter = []
        for _ in range(int(rng.integers(CLUTTER[0], CLUTTER[1] + 1))):
            x0, y0 = rng.uniform(0, 1 + PAN - 0.12), rng.uniform(0.2, 0.85)
            wd, ht = rng.uniform(0.05, 0.14, 2)
            self.clutter.append(((x0, x0 + wd, y0, y0 + ht), rng.uniform(*CLUTTER_DEPTH), rng.uniform(0.15, 0.95, 3)))

    def render(self, u0, advance, sensor_range, rng):
        s = self.size
        h = w = s
        rows = (np.arange(h) + 0.5) / s
        # floor depth falls from the wall at the horizon to 1 m at the bottom row
        t = np.clip((rows - self.horizon) / (1 - self.horizon), 0, 1)
        floor_depth = 1.0 / (1.0 / self.wall_depth + t * (1.0 - 1.0 / self.wall_depth))
        is_floor = rows >= self.horizon
        depth = np.where(is_floor[:, None], floor_depth[:, None], self.wall_depth) * np.ones((1, w))
        rgb = np.where(is_floor[None, :, None], self.floor_color[:, None, None], self.wall_color[:, None, None])
        rgb = rgb * np.ones((3, h, w))
        for box, d, color in self.far + self.clutter + self.near:
            # painter's order: furniture stands in front of the floor it rests on
            m = _fill((h, w), box, s, u0)
            depth[m] = d
            rgb[:, m] = color[:, None]
        for box, d, color in self.near:
            m = _fill((h, w), box, s, u0)
            if self.texture:
                yy, xx = np.mgrid[0:h, 0:w]
                stripes = np.sign(np.sin(self.tex_freq * np.pi * (xx + u0 + yy) + self.tex_phase))
                rgb[:, m] = np.clip(rgb[:, m] + 0.22 * stripes[m], 0, 1)
        rgb = np.clip(rgb + rng.normal(0, 0.03, rgb.shape), 0, 1)
        observed = np.maximum(depth - advance, MIN_DEPTH) + rng.normal(0, 0.02, depth.shape)
        raw = np.clip(observed / MAX_DEPTH, 1.0 / 255, 1.0)
        raw[observed > sensor_range] = 0.0
        return SceneImage(rgb.astype(np.float32), raw[None].astype(np.float32))


def _motion_blur(img, width):
    if width <= 1:
        return img
    k = np.ones(width) / width
    pad = np.pad(img, ((0, 0), (0, 0), (width // 2, width - 1 - width // 2)), mode="edge")
    out = np.zeros_like(img)
    for i in range(width):
        out += k[i] * pad[:, :, i:i + img.shape[2]]
    return out


def generate_synthetic_scene(class_id, seed, mode="image", n_frames=45, size=32,
                             sensor_range=SENSOR_RANGE, blur=True):
    """Render one scene deterministically from ``(class_id, seed)``.

    ``mode="image"`` returns a :class:`SceneImage` seen from the start of the
    camera path with a random pan; ``mode="video"`` returns ``n_frames``
    frames along a pan-and-advance path.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(class_id), 7]))
    scene = _Scene(class_id, rng, size)
    noise = np.random.default_rng(scene.noise_seed)
    if mode == "image":
        u0 = int(rng.integers(0, scene.pan_px + 1))
        return scene.render(u0, 0.0, sensor_range, noise)
    if mode != "video":
        raise ValueError(f"unknown mode {mode!r}")
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    frames = []
    for t in range(n_frames):
        frac = t / max(n_frames - 1, 1)
        img = scene.render(int(round(frac * scene.pan_px)), frac * ADVANCE, sensor_range, noise)
        if blur:
            width = int(rng.choice([1, 1, 2, 3, 4]))
            rgb = _motion_blur(img.rgb, width).astype(np.float32)
            img = SceneImage(rgb, img.depth_raw)
        frames.append(img)
    return frames


def _split_counts(per_class, train_fraction):
    n_train = int(round(per_class * train_fraction))
    return n_train, per_class - n_train


def image_corpus(num_classes=10, per_class=34, seed=0, size=40, train_fraction=0.6,
                 sensor_range=SENSOR_RANGE, modalities=("rgb", "depth")):
    """Image-mode scenes split per class into train/test.

    Returns ``{role: {modality: LabeledSet}}``.
    """
    n_train, _ = _split_counts(per_class, train_fraction)
    classes = list(CLASS_NAMES[:num_classes])
    out = {r: {m: ([], []) for m in modalities} for r in ("train", "test")}
    for k in range(num_classes):
        for i in range(per_class):
            sc = generate_synthetic_scene(k, seed * 100003 + i, "image", size=size, sensor_range=sensor_range)
            role = "train" if i < n_train else "test"
            for m in modalities:
                out[role][m][0].append(sc.modality(m))
                out[role][m][1].append(k)
    return {r: {m: LabeledSet(np.stack(xs), np.array(ys), classes) for m, (xs, ys) in d.items()}
            for r, d in out.items()}


def video_corpus(num_classes=10, per_class=20, seed=0, size=32, n_frames=45, segment_len=5,
                 train_fraction=0.6, sensor_range=SENSOR_RANGE):
    """Panned videos reduced to keyframes (least blurred RGB frame per segment).

    Returns ``{"train": SequenceSet, "test": SequenceSet}``.
    """
    n_train, _ = _split_counts(per_class, train_fraction)
    classes = list(CLASS_NAMES[:num_classes])
    acc = {r: ({"rgb": [], "depth": []}, []) for r in ("train", "test")}
    for k in range(num_classes):
        for i in range(per_class):
            frames = generate_synthetic_scene(k, seed * 100003 + i, "video", n_frames=n_frames, size=size,
                                              sensor_range=sensor_range)
            keep = keyframe_indices([f.rgb for f in frames], segment_len)
            role = "train" if i < n_train else "test"
            acc[role][0]["rgb"].append(np.stack([frames[j].rgb for j in keep]))
            acc[role][0]["depth"].append(np.stack([frames[j].depth_encoded for j in keep]))
            acc[role][1].append(k)
    return {r: SequenceSet({m: np.stack(v) for m, v in fr.items()}, np.array(ys), classes)
            for r, (fr, ys) in acc.items()}


def frames_of(videos, modality):
    """Flatten a SequenceSet into a per-keyframe LabeledSet."""
    arr = videos.frames[modality]
    n, t = arr.shape[:2]
    return LabeledSet(arr.reshape(n * t, *arr.shape[2:]), np.repeat(videos.y, t), list(videos.classes))
