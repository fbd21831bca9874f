"""Dataset records, image files and frame preprocessing."""

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MODALITIES = ("rgb", "depth")
ROLES = ("train", "test")


@dataclass
class LabeledSet:
    """Stacked samples ``x`` (N x C x H x W) with integer labels into ``classes``."""
    x: np.ndarray
    y: np.ndarray
    classes: list

    def __len__(self):
        return len(self.y)


@dataclass
class SequenceSet:
    """Per-modality keyframe stacks ``N x L x C x H x W`` sharing one label per video."""
    frames: dict
    y: np.ndarray
    classes: list

    def __len__(self):
        return len(self.y)

    def subset(self, idx):
        return SequenceSet({k: v[idx] for k, v in self.frames.items()}, self.y[idx], self.classes)


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    label: str
    modality: str
    role: str
    sequence_id: str = None
    frame_index: int = None


class ManifestError(ValueError):
    pass


def read_manifest(path, check_files=True):
    path = Path(path)
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) < 4 or len(cols) > 6:
            raise ManifestError(f"{path}:{lineno}: expected 4 to 6 tab-separated fields, got {len(cols)}")
        cols += [""] * (6 - len(cols))
        rpath, label, modality, role, seq, frame = (c.strip() for c in cols)
        if modality not in MODALITIES:
            raise ManifestError(f"{path}:{lineno}: unknown modality {modality!r}")
        if role not in ROLES:
            raise ManifestError(f"{path}:{lineno}: unknown role {role!r}")
        seq = None if seq in ("", "-") else seq
        try:
            frame = None if frame in ("", "-") else int(frame)
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: frame index {frame!r} is not an integer") from None
        records.append(ManifestRecord(rpath, label, modality, role, seq, frame))
    validate_manifest(records, path.parent if check_files else None)
    return records


def validate_manifest(records, root=None):
    train_classes = {r.label for r in records if r.role == "train"}
    missing = {r.label for r in records} - train_classes
    if missing:
        raise ManifestError(f"classes without training records: {sorted(missing)}")
    if root is not None:
        for r in records:
            if not (Path(root) / r.path).is_file():
                raise ManifestError(f"missing file {r.path}")
    keys = {}
    for r in records:
        if r.sequence_id is not None:
            keys.setdefault((r.sequence_id, r.frame_index, r.role), set()).add(r.modality)
    mods = {r.modality for r in records}
    if mods == set(MODALITIES):
        unpaired = [k for k, v in keys.items() if v != mods]
        if unpaired:
            raise ManifestError(f"unpaired rgb/depth frames, e.g. sequence {unpaired[0][0]} frame {unpaired[0][1]}")


def write_manifest(path, records):
    lines = ["# path\tlabel\tmodality\trole\tsequence_id\tframe_index"]
    for r in records:
        seq = "-" if r.sequence_id is None else r.sequence_id
        frame = "-" if r.frame_index is None else str(r.frame_index)
        lines.append("\t".join([r.path, r.label, r.modality, r.role, seq, frame]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def class_list(records):
    return sorted({r.label for r in records})


# ---------------------------------------------------------------------------
# PPM / PGM


class ImageFormatError(ValueError):
    pass


def _read_header(data):
    """Parse a binary PNM header; returns ``(magic, width, height, maxval, offset)``."""
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"truncated header at byte offset {pos}")
        fields.append((data[start:pos], start))
    (magic, _), *nums = fields
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {magic!r} at byte offset 0")
    vals = []
    for tok, off in nums:
        if not tok.isdigit():
            raise ImageFormatError(f"bad header field {tok!r} at byte offset {off}")
        vals.append(int(tok))
    w, h, maxval = vals
    if w < 1 or h < 1 or not 0 < maxval < 256:
        raise ImageFormatError(f"unsupported size {w}x{h} / maxval {maxval} at byte offset {nums[0][1]}")
    if pos >= len(data):
        raise ImageFormatError(f"missing payload at byte offset {pos}")
    return magic.decode(), w, h, maxval, pos + 1


def load_image(path):
    """Read a binary PPM (3 x H x W) or PGM (1 x H x W) as float32 in [0, 1]."""
    data = Path(path).read_bytes()
    magic, w, h, maxval, off = _read_header(data)
    c = 3 if magic == "P6" else 1
    need = w * h * c
    if len(data) - off < need:
        raise ImageFormatError(f"{path}: payload truncated at byte offset {len(data)}, expected {off + need} bytes")
    arr = np.frombuffer(data, dtype=np.uint8, count=need, offset=off).reshape(h, w, c)
    return (arr.transpose(2, 0, 1).astype(np.float32) / maxval)


def quantize(t):
    return np.clip(np.round(np.asarray(t, dtype=np.float64) * 255), 0, 255).astype(np.uint8)


def save_image(path, t):
    """Write a 1- or 3-channel tensor in [0, 1] as 8-bit PGM or PPM."""
    t = np.asarray(t)
    if t.ndim != 3 or t.shape[0] not in (1, 3):
        raise ValueError(f"expected a 1 x H x W or 3 x H x W tensor, got {t.shape}")
    c, h, w = t.shape
    header = f"{'P6' if c == 3 else 'P5'}\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + quantize(t).transpose(1, 2, 0).tobytes())
    return path


# ---------------------------------------------------------------------------
# preprocessing


def patch_corners(size, grid, patch):
    if patch > size:
        raise ValueError(f"patch {patch} larger than image extent {size}")
    if grid < 1:
        raise ValueError("grid must be >= 1")
    if grid == 1:
        return [int(round((size - patch) / 2))]
    return [int(round(i * (size - patch) / (grid - 1))) for i in range(grid)]


def sample_patch_grid(image, grid=7, patch=35):
    """Regular ``grid x grid`` patches; returns ``(patches, corners)``.

    Corners run from 0 to ``H - patch`` evenly (rounded), row-major.
    """
    image = np.asarray(image)
    _, h, w = image.shape
    if patch > h or patch > w:
        raise ValueError(f"patch {patch} does not fit image {h}x{w}")
    ys, xs = patch_corners(h, grid, patch), patch_corners(w, grid, patch)
    corners = [(y, x) for y in ys for x in xs]
    patches = np.stack([image[:, y:y + patch, x:x + patch] for y, x in corners])
    return patches, corners


def patch_dataset(images, grid, patch):
    """Every image's patch grid, each patch labeled with its image's class."""
    xs = [sample_patch_grid(img, grid, patch)[0] for img in images.x]
    x = np.concatenate(xs) if xs else np.empty((0, images.x.shape[1], patch, patch), images.x.dtype)
    y = np.repeat(np.asarray(images.y), grid * grid)
    return LabeledSet(x, y, list(images.classes))


def jet_encode(depth, missing=None):
    """Piecewise-linear jet colormap; ``missing`` pixels become exact black.

    ``depth`` is ``1 x H x W`` (or ``H x W``) with valid values in [0, 1].
    """
    d = np.asarray(depth, dtype=np.float32)
    if d.ndim == 3:
        if d.shape[0] != 1:
            raise ValueError(f"depth must have one channel, got {d.shape}")
        d = d[0]
    miss = np.zeros(d.shape, bool) if missing is None else np.asarray(missing, bool).reshape(d.shape)
    valid = d[~miss]
    if valid.size and (np.any(~np.isfinite(valid)) or valid.min() < 0 or valid.max() > 1):
        raise ValueError("depth values outside [0, 1] that are not flagged missing")
    v = np.where(miss, 0, d)
    out = np.stack([np.clip(1.5 - np.abs(4 * v - c), 0, 1) for c in (3, 2, 1)]).astype(np.float32)
    out[:, miss] = 0
    return out


def blur_score(image):
    """Mean absolute forward difference: higher means sharper.

    Per-site horizontal plus vertical terms, each averaged over the sites where
    the forward difference exists.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    if image.shape[1] < 2 or image.shape[2] < 2:
        raise ValueError(f"blur score needs at least 2x2 pixels, got {image.shape[1:]}")
    dx = np.abs(np.diff(image, axis=2)).mean()
    dy = np.abs(np.diff(image, axis=1)).mean()
    return float(dx + dy)


def keyframe_indices(frames, segment_len=5, score=blur_score):
    if segment_len < 1:
        raise ValueError("segment_len must be >= 1")
    n = len(frames)
    if n == 0:
        raise ValueError("no frames to select from")
    out = []
    for s in range(0, n, segment_len):
        scores = [score(frames[i]) for i in range(s, min(s + segment_len, n))]
        out.append(s + int(np.argmax(scores)))
    return out


def select_keyframes(frames, segment_len=5, score=blur_score):
    """Least-blurred frame of every consecutive ``segment_len`` frames (earliest on ties)."""
    return [frames[i] for i in keyframe_indices(frames, segment_len, score)]


def expected_keyframes(n, segment_len=5):
    return math.ceil(n / segment_len)


def segment_sequence(keyframes, T, label=None):
    """Non-overlapping windows of ``T`` keyframes; the remainder is dropped.

    Returns a list of segments (lists), or ``(segment, label)`` pairs when a
    label is given.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    n = len(keyframes)
    if n < T:
        log.warning("sequence of %d keyframes is shorter than T=%d; no segments", n, T)
        return []
    segs = [list(keyframes[i:i + T]) for i in range(0, n - T + 1, T)]
    return segs if label is None else [(s, label) for s in segs]


# ---------------------------------------------------------------------------
# manifest -> datasets


def load_frame(path, modality):
    """Network input for one stored frame.

    RGB files load as they are.  Depth files are single-channel with 0 marking
    missing pixels and are jet-encoded on load.
    """
    t = load_image(path)
    if modality == "depth":
        if t.shape[0] != 1:
            raise ImageFormatError(f"{path}: depth frames must be PGM, got {t.shape[0]} channels")
        return jet_encode(t, t[0] == 0)
    if t.shape[0] != 3:
        raise ImageFormatError(f"{path}: rgb frames must be PPM, got {t.shape[0]} channel")
    return t


def _stack(arrays, what):
    shapes = {a.shape for a in arrays}
    if len(shapes) > 1:
        raise ManifestError(f"{what} have mixed shapes {sorted(shapes)}")
    return np.stack(arrays)


def images_from_manifest(records, root, role, modality, classes=None):
    """Still images (records without a sequence id) as a :class:`LabeledSet`."""
    classes = list(classes or class_list(records))
    index = {c: i for i, c in enumerate(classes)}
    picked = [r for r in records if r.sequence_id is None and r.role == role and r.modality == modality]
    if not picked:
        return LabeledSet(np.empty((0, 3, 1, 1), np.float32), np.empty(0, np.int64), classes)
    x = _stack([load_frame(Path(root) / r.path, modality) for r in picked], f"{role} {modality} images")
    return LabeledSet(x, np.array([index[r.label] for r in picked]), classes)


def sequences_from_manifest(records, root, role, modalities=MODALITIES, classes=None, segment_len=5):
    """Videos reduced to keyframes as a :class:`SequenceSet`.

    Keyframes are chosen on the RGB frames when present so both modalities
    keep the same time steps.  Videos longer than the shortest one are cut to
    its keyframe count.
    """
    classes = list(classes or class_list(records))
    index = {c: i for i, c in enumerate(classes)}
    seqs = {}
    for r in records:
        if r.sequence_id is not None and r.role == role and r.modality in modalities:
            seqs.setdefault(r.sequence_id, {"label": r.label, "frames": {}})
            seqs[r.sequence_id]["frames"].setdefault(r.modality, []).append(r)
    frames = {m: [] for m in modalities}
    labels = []
    for sid, seq in seqs.items():
        if set(seq["frames"]) != set(modalities):
            raise ManifestError(f"sequence {sid} lacks one of {list(modalities)}")
        loaded = {m: [load_frame(Path(root) / r.path, m) for r in sorted(rs, key=lambda r: r.frame_index or 0)]
                  for m, rs in seq["frames"].items()}
        pick = "rgb" if "rgb" in loaded else modalities[0]
        keep = keyframe_indices(loaded[pick], segment_len)
        for m in modalities:
            frames[m].append([loaded[m][i] for i in keep])
        labels.append(index[seq["label"]])
    if not labels:
        return SequenceSet({m: np.empty((0, 0, 3, 1, 1), np.float32) for m in modalities},
                           np.empty(0, np.int64), classes)
    length = min(len(v) for v in frames[modalities[0]])
    if any(len(v) != length for v in frames[modalities[0]]):
        log.warning("videos have different keyframe counts; cutting all to %d", length)
    stacked = {m: _stack([np.stack(v[:length]) for v in vs], f"{role} {m} videos") for m, vs in frames.items()}
    return SequenceSet(stacked, np.array(labels), classes)
