"""Seeded synthetic grayscale dataset and leakage perturbations.

Stands in for a chest-radiograph corpus at desk scale: dark background with
a vertical brightness gradient and two bright elliptical "lung" fields with
seeded jitter.  Abnormal images add a smooth circular opacity blob inside
one lung, strong enough that a mean-intensity threshold separates the
classes; the detection task is therefore guaranteed learnable.

Rendering draws all random values before branching on the abnormal flag, so
for a fixed seed the normal and abnormal variants differ only inside the
blob's footprint.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, UsageError
from .images import from_pixels, pgm_bytes, read_pgm

SPLIT_NAMES = ("train_normal", "train_mixture", "test_unknown")

BACKGROUND_TOP = 24.0
BACKGROUND_BOTTOM = 56.0
LUNG_INTENSITY = 150.0
LUNG_INTENSITY_JITTER = 2.0
LUNG_EDGE_SHARPNESS = 6.0
BLOB_AMPLITUDE_RANGE = (34.0, 54.0)
BLOB_RADIUS_RANGE = (0.45, 0.65)  # fraction of the smaller lung semi-axis
BLOB_CUTOFF = 9.0  # squared normalized distance beyond which the bump is exactly 0


@dataclass
class ToyImageParts:
    pixels: np.ndarray  # uint8 (H, W, 1)
    label: str
    lung_mask: np.ndarray  # bool (H, W)
    blob_mask: np.ndarray  # bool (H, W): footprint the blob would occupy


def render_toy_image(seed, abnormal, shape=(16, 16)):
    """Full render with masks; see :func:`gen_toy_image` for the plain API."""
    h, w = int(shape[0]), int(shape[1])
    if h < 8 or w < 8:
        raise UsageError(f"toy images need at least 8x8 pixels, got {h}x{w}")
    rng = np.random.default_rng(seed)
    # Draw every random quantity up front: the normal and abnormal renders of
    # one seed then share the same base image.
    brightness = rng.normal(0.0, 1.5)
    jit = rng.normal(0.0, 1.0, size=(2, 2))  # per-lung center jitter
    axis_jit = rng.normal(0.0, 1.0, size=(2, 2))
    intensity = LUNG_INTENSITY + rng.normal(0.0, LUNG_INTENSITY_JITTER, size=2)
    blob_side = int(rng.integers(0, 2))
    blob_offset = rng.uniform(-0.35, 0.35, size=2)
    blob_radius_frac = rng.uniform(*BLOB_RADIUS_RANGE)
    blob_amp = rng.uniform(*BLOB_AMPLITUDE_RANGE)

    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    gradient = BACKGROUND_TOP + (BACKGROUND_BOTTOM - BACKGROUND_TOP) * rows / (h - 1)
    canvas = np.broadcast_to(gradient + brightness, (h, w)).copy()

    centers = np.array([[0.48, 0.30], [0.48, 0.70]]) + 0.02 * jit
    semi = np.array([[0.26, 0.15], [0.26, 0.15]]) * (1.0 + 0.08 * axis_jit)
    lung_mask = np.zeros((h, w), dtype=bool)
    lung_geo = []
    for side in range(2):
        cy, cx = centers[side, 0] * h, centers[side, 1] * w
        ry, rx = semi[side, 0] * h, semi[side, 1] * w
        dist = np.sqrt(((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2)
        profile = 1.0 / (1.0 + np.exp(LUNG_EDGE_SHARPNESS * (dist - 1.0)))
        canvas = canvas + (intensity[side] - canvas) * profile
        lung_mask |= dist <= 1.0
        lung_geo.append((cy, cx, ry, rx))

    cy, cx, ry, rx = lung_geo[blob_side]
    by = cy + blob_offset[0] * ry
    bx = cx + blob_offset[1] * rx
    radius = max(1.4, blob_radius_frac * min(ry, rx))
    dist2 = ((rows - by) ** 2 + (cols - bx) ** 2) / radius**2
    # Truncate to exact zero outside the footprint so the normal and abnormal
    # renders of one seed are pixel-identical there.
    blob_mask = dist2 <= BLOB_CUTOFF
    bump = np.where(blob_mask, blob_amp * np.exp(-dist2), 0.0)
    if abnormal:
        canvas = canvas + bump

    pixels = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)[:, :, None]
    return ToyImageParts(
        pixels=pixels,
        label="abnormal" if abnormal else "normal",
        lung_mask=lung_mask,
        blob_mask=blob_mask,
    )


def gen_toy_image(seed, abnormal, shape=(16, 16)):
    """Deterministic toy image; returns (uint8 pixels (H, W, 1), label)."""
    parts = render_toy_image(seed, abnormal, shape)
    return parts.pixels, parts.label


def apply_block_marker(x, position, size, value):
    """Overwrite a rectangle with a constant; simulates an identifying tag.

    ``size`` may be an int (square) or an (height, width) pair; size 0 is a
    no-op.  Works on any value representation; ``value`` is written as is.
    """
    x = np.array(x, copy=True)
    if np.isscalar(size):
        size = (int(size), int(size))
    sh, sw = size
    if sh < 0 or sw < 0:
        raise UsageError("marker size must be nonnegative")
    if sh == 0 or sw == 0:
        return x
    r, c = position
    x[r : r + sh, c : c + sw, ...] = value
    return x


def apply_flip(x):
    """Mirror about the vertical axis (left-right flip); an involution."""
    return np.asarray(x)[:, ::-1, ...].copy()


def asymmetry_score(x):
    """L1 distance between an image and its mirror."""
    x = np.asarray(x, dtype=np.float64)
    return float(np.abs(x - apply_flip(x)).sum())


@dataclass
class ObfuscationMetrics:
    marker_residual: float  # privatized vs original, inside the marker
    marker_energy: float  # perturbed vs original, inside the marker
    asymmetry_perturbed: float
    asymmetry_privatized: float


def obfuscation_metrics(original, perturbed, privatized, marker_rect=None):
    """Quantify how much of an injected feature survives privatization.

    ``marker_rect`` is (row, col, height, width); when omitted the marker
    terms are NaN and only the asymmetry scores are filled in.
    """
    original = np.asarray(original, dtype=np.float64)
    perturbed = np.asarray(perturbed, dtype=np.float64)
    privatized = np.asarray(privatized, dtype=np.float64)
    residual = energy = float("nan")
    if marker_rect is not None:
        r, c, rh, rw = marker_rect
        win = np.s_[r : r + rh, c : c + rw, ...]
        residual = float(np.abs(privatized[win] - original[win]).mean())
        energy = float(np.abs(perturbed[win] - original[win]).mean())
    return ObfuscationMetrics(
        marker_residual=residual,
        marker_energy=energy,
        asymmetry_perturbed=asymmetry_score(perturbed),
        asymmetry_privatized=asymmetry_score(privatized),
    )


@dataclass
class ManifestEntry:
    path: str
    label: str
    perturbation: str
    seed: int


@dataclass
class DatasetManifest:
    split: str
    seed: int
    shape: tuple
    entries: list = field(default_factory=list)
    base_dir: str = "."

    def resolve(self, entry):
        return os.path.join(self.base_dir, entry.path)


def save_manifest(manifest, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# split {manifest.split}\n")
        fh.write(f"# seed {manifest.seed}\n")
        h, w, c = manifest.shape
        fh.write(f"# shape {h}x{w}x{c}\n")
        for e in manifest.entries:
            fh.write(f"{e.path}\t{e.label}\t{e.perturbation}\t{e.seed}\n")


def load_manifest(path, check_files=True):
    meta = {}
    entries = []
    base_dir = os.path.dirname(os.path.abspath(path))
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].strip().split(None, 1)
                if len(parts) == 2:
                    meta[parts[0]] = parts[1]
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise UsageError(f"{path}:{line_no}: expected 4 tab-separated fields")
            entries.append(ManifestEntry(fields[0], fields[1], fields[2], int(fields[3])))
    split = meta.get("split", "")
    try:
        h, w, c = (int(v) for v in meta.get("shape", "0x0x0").split("x"))
    except ValueError:
        raise UsageError(f"{path}: malformed shape metadata {meta.get('shape')!r}") from None
    manifest = DatasetManifest(
        split=split,
        seed=int(meta.get("seed", 0)),
        shape=(h, w, c),
        entries=entries,
        base_dir=base_dir,
    )
    if split == "train_normal" and any(e.label != "normal" for e in entries):
        raise UsageError(f"{path}: train_normal split contains non-normal labels")
    for e in entries:
        if e.label not in ("normal", "abnormal"):
            raise UsageError(f"{path}: unknown label {e.label!r}")
        if check_files and not os.path.exists(manifest.resolve(e)):
            raise UsageError(f"{path}: missing image file {e.path}")
    return manifest


def load_unit_images(manifest):
    """Mid-bin unit-range image stack plus labels and ids for a manifest."""
    images = np.stack([read_pgm(manifest.resolve(e)) for e in manifest.entries])
    labels = [e.label for e in manifest.entries]
    ids = [os.path.splitext(os.path.basename(e.path))[0] for e in manifest.entries]
    return images, labels, ids


def load_pixel_images(manifest):
    """Integer pixel stack (uint8 as float64-compatible) for training."""
    unit, labels, ids = load_unit_images(manifest)
    return np.rint((unit + 0.5) * 256 - 0.5).astype(np.uint8), labels, ids


def _image_seed(base_seed, index):
    return int(np.random.SeedSequence((int(base_seed), int(index))).generate_state(1, np.uint64)[0])


def generate_dataset(out_dir, seed, shape=(16, 16), counts=(600, 1000, 400), overlap=0.8):
    """Write the three splits to ``out_dir``: images/ plus one manifest each.

    The normal-training and mixture-training splits share a block of normal
    images (by default 80 percent of the smaller split) so the mixture
    model's training distribution covers the normal model's.  Every unique
    image is written once and referenced by path; per-image seeds are mixed
    from (seed, global index), so distinct images never collide and the whole
    tree is a pure function of the arguments.
    """
    n_normal, n_mixture, n_test = (int(v) for v in counts)
    if n_normal + n_mixture + n_test == 0:
        raise UsageError("empty dataset: all split counts are zero")
    if n_normal < 1 or n_mixture < 2 or n_test < 2:
        raise UsageError(f"split counts too small to be usable: {counts}")
    mix_normal = n_mixture // 2
    mix_abnormal = n_mixture - mix_normal
    shared = min(int(overlap * min(n_normal, n_mixture)), n_normal, mix_normal)
    test_normal = n_test // 2
    test_abnormal = n_test - test_normal

    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    index = 0

    def emit(abnormal):
        nonlocal index
        img_seed = _image_seed(seed, index)
        pixels, label = gen_toy_image(img_seed, abnormal, shape)
        name = f"images/img_{index:05d}.pgm"
        with open(os.path.join(out_dir, name), "wb") as fh:
            fh.write(pgm_bytes(from_pixels(pixels)))
        index += 1
        return ManifestEntry(name, label, "none", img_seed)

    normal_entries = [emit(False) for _ in range(n_normal)]
    fresh_mix_normal = [emit(False) for _ in range(mix_normal - shared)]
    mix_abnormal_entries = [emit(True) for _ in range(mix_abnormal)]
    test_entries = [emit(False) for _ in range(test_normal)]
    test_entries += [emit(True) for _ in range(test_abnormal)]

    shape3 = (int(shape[0]), int(shape[1]), 1)
    manifests = {
        "train_normal": DatasetManifest("train_normal", seed, shape3, normal_entries, out_dir),
        "train_mixture": DatasetManifest(
            "train_mixture",
            seed,
            shape3,
            normal_entries[:shared] + fresh_mix_normal + mix_abnormal_entries,
            out_dir,
        ),
        "test_unknown": DatasetManifest("test_unknown", seed, shape3, test_entries, out_dir),
    }
    for split, manifest in manifests.items():
        save_manifest(manifest, os.path.join(out_dir, f"{split}.tsv"))
    return manifests
