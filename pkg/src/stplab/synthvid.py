"""Labeled synthetic video: moving shapes with exact flow and labels.

A sequence renders K-1 rigid shapes (one per foreground class) drifting
over a textured background. Labels and backward flow are exact by
construction: every shape mask is an analytic function of the offset
from its (translated) center, so integer velocities shift masks
verbatim and the flow at an on-shape pixel equals that shape's
velocity. Background flow carries the camera motion, zero by default.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, FormatError, GenerationError
from .stvd import read_tensor, write_tensor

_PLACEMENT_ATTEMPTS = 400


@dataclass(frozen=True)
class DomainSpec:
    """Photometric make-up of one domain plus scene-motion knobs.

    noise_sigma and blur_sigma are upper bounds: each sequence draws its
    own level uniformly from [0, bound], so a domain is a family of
    related appearances rather than one fixed corruption. color_jitter
    adds a per-sequence global RGB offset drawn from +-value.
    """

    palette_shift: tuple = ()  # per-class (dr, dg, db); missing classes shift by zero
    noise_sigma: float = 0.0
    blur_sigma: float = 0.0
    color_jitter: float = 0.0
    texture_seed: int = 0
    max_speed: float = 2.0
    fractional_velocity: bool = False

    def __post_init__(self):
        if self.noise_sigma < 0 or self.blur_sigma < 0 or self.color_jitter < 0:
            raise ConfigError("DomainSpec: noise, blur, and jitter must be >= 0")
        if self.max_speed < 0:
            raise ConfigError("DomainSpec: max_speed must be >= 0")


@dataclass
class VideoSequence:
    frames: np.ndarray  # [T,3,H,W] float64 in [0,1]
    labels: np.ndarray | None  # [T,H,W] uint8, None when loaded label-free
    flows: np.ndarray  # [T-1,2,H,W] float64, backward convention

    @property
    def num_frames(self):
        return self.frames.shape[0]

    def without_labels(self):
        return VideoSequence(self.frames, None, self.flows)


_BASE_COLORS = [
    (0.82, 0.22, 0.24),
    (0.22, 0.74, 0.30),
    (0.25, 0.35, 0.85),
    (0.88, 0.78, 0.20),
    (0.75, 0.30, 0.80),
    (0.25, 0.78, 0.78),
]


def class_color(class_id):
    return np.array(_BASE_COLORS[(class_id - 1) % len(_BASE_COLORS)])


def _shape_mask(kind, h, w, cy, cx, size):
    yy, xx = np.mgrid[0:h, 0:w]
    dy = yy - cy
    dx = xx - cx
    if kind == "rect":
        return (np.abs(dy) <= size) & (np.abs(dx) <= size * 1.15)
    if kind == "disk":
        return dy * dy + dx * dx <= size * size
    # upward triangle: apex size above center, base size below
    half_width = (dy + size) * 0.75
    return (dy >= -size) & (dy <= size) & (np.abs(dx) <= half_width)


_SHAPE_KINDS = ("rect", "disk", "triangle")


def generate_sequence(seed, spec, num_frames=2, height=64, width=64, classes=4):
    """Render one labeled sequence, deterministic in (seed, spec)."""
    if classes < 3:
        raise ConfigError(f"need background plus >=2 object classes, got K={classes}")
    if height < 32 or width < 32:
        raise ConfigError(f"canvas must be at least 32x32, got {height}x{width}")
    if num_frames < 2:
        raise ConfigError(f"need at least two frames, got {num_frames}")
    rng = np.random.default_rng([int(seed), int(spec.texture_seed), 2094])

    # static background: smooth low-amplitude texture around mid grey
    tex = rng.uniform(-1.0, 1.0, (3, height, width))
    for _ in range(3):
        tex = (tex + np.roll(tex, 1, axis=1) + np.roll(tex, -1, axis=1)
               + np.roll(tex, 1, axis=2) + np.roll(tex, -1, axis=2)) / 5.0
    background = np.clip(0.42 + 0.35 * tex, 0.25, 0.6)

    margin = 7
    shapes = []
    occupied = [np.zeros((height, width), dtype=bool) for _ in range(num_frames)]
    for class_id in range(1, classes):
        kind = _SHAPE_KINDS[(class_id - 1) % len(_SHAPE_KINDS)]
        size_lo, size_hi = {"rect": (8, 12), "disk": (9, 13), "triangle": (11, 16)}[kind]
        placed = False
        for _ in range(_PLACEMENT_ATTEMPTS):
            size = rng.uniform(size_lo, size_hi)
            if spec.max_speed == 0:
                vel = np.zeros(2)
            elif spec.fractional_velocity:
                vel = rng.uniform(-spec.max_speed, spec.max_speed, 2)
            else:
                v_int = int(spec.max_speed)
                vel = rng.integers(-v_int, v_int + 1, 2).astype(np.float64)
            cy = rng.uniform(margin, height - margin)
            cx = rng.uniform(margin, width - margin)
            end_y = cy + vel[0] * (num_frames - 1)
            end_x = cx + vel[1] * (num_frames - 1)
            if not (margin <= end_y <= height - margin and margin <= end_x <= width - margin):
                continue
            masks = [_shape_mask(kind, height, width, cy + vel[0] * t, cx + vel[1] * t, size)
                     for t in range(num_frames)]
            if any(m.sum() == 0 for m in masks):
                continue
            if any((m & occ).any() for m, occ in zip(masks, occupied)):
                continue
            for m, occ in zip(masks, occupied):
                occ |= m
            color = np.clip(class_color(class_id) + rng.uniform(-0.04, 0.04, 3), 0.05, 0.95)
            shapes.append((class_id, vel, masks, color))
            placed = True
            break
        if not placed:
            raise GenerationError(
                f"could not place shape for class {class_id} on a {height}x{width} canvas")

    frames = np.empty((num_frames, 3, height, width))
    labels = np.zeros((num_frames, height, width), dtype=np.uint8)
    flows = np.zeros((num_frames - 1, 2, height, width))
    for t in range(num_frames):
        frames[t] = background
        for class_id, vel, masks, color in shapes:
            labels[t][masks[t]] = class_id
            frames[t][:, masks[t]] = color[:, None]
        if t > 0:
            for class_id, vel, masks, _ in shapes:
                flows[t - 1][0][masks[t]] = vel[0]
                flows[t - 1][1][masks[t]] = vel[1]
    return VideoSequence(frames, labels, flows)


def gaussian_blur(frame, sigma):
    """Per-channel spatial Gaussian blur of a [3,H,W] frame."""
    if sigma <= 0:
        return frame
    return ndimage.gaussian_filter(frame, sigma=(0, sigma, sigma), mode="nearest")


def apply_domain_shift(seq, spec, seed):
    """Photometric-only transform; labels and flows pass through untouched.

    The per-sequence noise level, blur level, and global color offset are
    drawn once from the spec's bounds, then applied to every frame.
    """
    if seq.labels is None:
        raise ConfigError("apply_domain_shift needs labels to locate class regions")
    rng = np.random.default_rng([int(seed), 4721])
    frames = seq.frames.copy()
    noise = rng.uniform(0.0, spec.noise_sigma) if spec.noise_sigma > 0 else 0.0
    blur = rng.uniform(0.0, spec.blur_sigma) if spec.blur_sigma > 0 else 0.0
    jitter = (rng.uniform(-spec.color_jitter, spec.color_jitter, 3)
              if spec.color_jitter > 0 else None)
    for t in range(frames.shape[0]):
        for class_id, offset in enumerate(spec.palette_shift):
            region = seq.labels[t] == class_id
            if region.any():
                frames[t][:, region] += np.asarray(offset, dtype=np.float64)[:, None]
        if jitter is not None:
            frames[t] += jitter[:, None, None]
        if blur > 0:
            frames[t] = gaussian_blur(frames[t], blur)
        if noise > 0:
            frames[t] = frames[t] + rng.normal(0.0, noise, frames[t].shape)
    np.clip(frames, 0.0, 1.0, out=frames)
    return VideoSequence(frames, seq.labels, seq.flows)


def default_source_spec():
    return DomainSpec(noise_sigma=0.03, blur_sigma=0.5, color_jitter=0.05,
                      texture_seed=11)


def default_target_spec():
    return DomainSpec(
        palette_shift=(
            (0.08, 0.032, -0.096),
            (-0.192, 0.096, 0.08),
            (0.112, -0.176, 0.064),
            (-0.08, 0.08, 0.16),
        ),
        noise_sigma=0.09,
        blur_sigma=1.1,
        color_jitter=0.15,
        texture_seed=23,
    )


# ---------------------------------------------------------------------------
# dataset directory format
# ---------------------------------------------------------------------------

def _seq_paths(directory, index):
    directory = Path(directory)
    stem = f"seq_{index:04d}"
    return (directory / f"{stem}_frames.stvd",
            directory / f"{stem}_labels.stvd",
            directory / f"{stem}_flows.stvd")


def write_dataset(directory, sequences, *, classes, domain, seed, spec):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    first = sequences[0]
    manifest = {
        "format": "stvd-dir",
        "version": 1,
        "sequences": len(sequences),
        "frames_per_sequence": int(first.frames.shape[0]),
        "height": int(first.frames.shape[2]),
        "width": int(first.frames.shape[3]),
        "classes": int(classes),
        "dtype": "f64",
        "domain": domain,
        "seed": int(seed),
        "spec": asdict(spec),
    }
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    for i, seq in enumerate(sequences):
        fpath, lpath, opath = _seq_paths(directory, i)
        write_tensor(fpath, seq.frames)
        write_tensor(lpath, seq.labels.astype(np.uint8))
        write_tensor(opath, seq.flows)
    return manifest


def read_manifest(directory):
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise FormatError(f"no manifest.json in {directory}")
    with open(path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "stvd-dir":
        raise FormatError(f"{path} is not a dataset manifest")
    return manifest


def read_dataset(directory, load_labels=True):
    """Load a dataset directory.

    With load_labels=False the label files are never opened; sequences
    come back with ``labels=None``. The adaptation path relies on this
    to stay provably label-free.
    """
    manifest = read_manifest(directory)
    sequences = []
    for i in range(manifest["sequences"]):
        fpath, lpath, opath = _seq_paths(directory, i)
        frames = read_tensor(fpath)
        labels = read_tensor(lpath) if load_labels else None
        flows = read_tensor(opath)
        sequences.append(VideoSequence(frames, labels, flows))
    return manifest, sequences


def generate_dataset(directory, *, domain, seed, spec, num_sequences,
                     num_frames=2, height=64, width=64, classes=4):
    """Generate, photometrically shift, and persist one domain's data."""
    sequences = []
    for i in range(num_sequences):
        seq_seed = int(np.random.SeedSequence([int(seed), i]).generate_state(1)[0])
        seq = generate_sequence(seq_seed, spec, num_frames, height, width, classes)
        sequences.append(apply_domain_shift(seq, spec, seq_seed))
    return write_dataset(directory, sequences, classes=classes, domain=domain,
                         seed=seed, spec=spec)
