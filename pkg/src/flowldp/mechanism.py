"""Latent-space Laplace mechanism with range clipping, plus the pixel-domain
baseline.

The privatizer maps an image to its latent vector, clips every element to a
window derived from the training latents, adds per-element Laplace noise
scaled by sensitivity * D / epsilon, clips again, and maps back to image
space.  Because the flow is a fixed bijection, the log-likelihood ratio of
the output between any two clipped inputs is bounded by the total budget
epsilon; the per-element budget is epsilon / D.

``epsilon = inf`` is a reserved sentinel that skips the noise step (and,
when clipping is also disabled, turns the mechanism into a pure roundtrip).
"""

import math
import struct
import zlib
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import FormatError, UsageError
from .flow.model import forward, inverse

SENSITIVITY_MODES = ("clipped", "conservative")

PARAMS_MAGIC = b"FDPP"
PARAMS_VERSION = 1


@dataclass
class PrivacyParams:
    """Per-element noise calibration derived from training latents.

    ``sensitivity[k]`` calibrates the Laplace scale for element k, ``center``
    and ``width`` define the clip window [center - width/2, center + width/2],
    ``alpha`` is the fraction of the observed range kept by clipping, and
    ``epsilon`` is the total privacy budget shared equally by all D elements.
    """

    sensitivity: np.ndarray
    center: np.ndarray
    width: np.ndarray
    alpha: float
    epsilon: float
    sensitivity_mode: str = "clipped"

    def __post_init__(self):
        self.sensitivity = np.asarray(self.sensitivity, dtype=np.float64)
        self.center = np.asarray(self.center, dtype=np.float64)
        self.width = np.asarray(self.width, dtype=np.float64)
        if not (self.sensitivity.shape == self.center.shape == self.width.shape):
            raise UsageError("privacy parameter arrays must share one shape")
        if (self.sensitivity < 0).any() or (self.width < 0).any():
            raise UsageError("sensitivity and width must be nonnegative")
        if not 0.0 < self.alpha <= 1.0:
            raise UsageError(f"alpha must be in (0, 1], got {self.alpha}")
        if not self.epsilon > 0.0:
            raise UsageError(f"epsilon must be positive, got {self.epsilon}")
        if self.sensitivity_mode not in SENSITIVITY_MODES:
            raise UsageError(f"unknown sensitivity mode {self.sensitivity_mode!r}")

    @property
    def dim(self):
        return self.sensitivity.shape[0]

    @property
    def epsilon_per_element(self):
        return self.epsilon / self.dim

    def noise_scales(self):
        """Per-element Laplace scales b_k = sensitivity_k * D / epsilon."""
        if math.isinf(self.epsilon):
            return np.zeros(self.dim)
        return self.sensitivity * (self.dim / self.epsilon)

    def clip_bounds(self):
        half = 0.5 * self.width
        return self.center - half, self.center + half

    def with_epsilon(self, epsilon):
        return PrivacyParams(
            self.sensitivity, self.center, self.width, self.alpha, epsilon, self.sensitivity_mode
        )


def _latent_matrix(latents):
    z = np.asarray(latents, dtype=np.float64)
    if z.ndim == 1:
        z = z[None]
    if z.ndim != 2:
        raise UsageError(f"expected latents of shape (N, D), got {z.shape}")
    return z


def compute_sensitivity(latents):
    """Per-element worst-case pair distance over a latent set.

    The max over all pairs of |z_k - z'_k| equals per-element max minus min,
    so a single pass suffices.  Needs at least two latents.
    """
    z = _latent_matrix(latents)
    if z.shape[0] < 2:
        raise UsageError(f"sensitivity needs at least 2 latents, got {z.shape[0]}")
    return z.max(axis=0) - z.min(axis=0)


def compute_clip_params(latents, alpha):
    """Clip window per element: width = alpha * (max - min), center = midpoint."""
    z = _latent_matrix(latents)
    if z.shape[0] < 1:
        raise UsageError("clip parameters need at least 1 latent")
    lo = z.min(axis=0)
    hi = z.max(axis=0)
    return (hi + lo) / 2.0, alpha * (hi - lo)


def make_privacy_params(latents, alpha, epsilon, sensitivity_mode="clipped"):
    """Assemble PrivacyParams from training latents.

    In "clipped" mode (default) the noise is calibrated to the clip width:
    after clipping, no two inputs can differ by more than width_k in element
    k, so the budget bound holds with the tighter constant.  "conservative"
    mode calibrates to the full observed range instead.
    """
    z = _latent_matrix(latents)
    center, width = compute_clip_params(z, alpha)
    if sensitivity_mode == "clipped":
        sensitivity = width.copy()
    elif sensitivity_mode == "conservative":
        sensitivity = compute_sensitivity(z)
    else:
        raise UsageError(f"unknown sensitivity mode {sensitivity_mode!r}")
    return PrivacyParams(sensitivity, center, width, alpha, epsilon, sensitivity_mode)


def clip_latent(z, params):
    """Clamp every element into its window; idempotent."""
    lo, hi = params.clip_bounds()
    return np.clip(np.asarray(z, dtype=np.float64), lo, hi)


def laplace_sample(rng, scale, size=None):
    """Laplace(0, scale) via the inverse CDF.

    Draws u in (-0.5, 0.5) and returns -scale * sgn(u) * ln(1 - 2|u|).
    ``scale`` may be an array broadcast against ``size``; zero scale yields
    exactly zero noise.
    """
    scale = np.asarray(scale, dtype=np.float64)
    shape = scale.shape if size is None else size
    u = rng.random(shape) - 0.5
    # rng.random() can return exactly 0.0, which would map to -inf.
    interior = np.maximum(1.0 - 2.0 * np.abs(u), np.finfo(np.float64).tiny)
    return -scale * np.sign(u) * np.log(interior)


def laplace_cdf(x, scale):
    """Analytic CDF of Laplace(0, scale), used by sampler diagnostics."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x < 0, 0.5 * np.exp(x / scale), 1.0 - 0.5 * np.exp(-x / scale))


def laplace_privatize(z_clipped, params, rng):
    """Add per-element Laplace noise to an already clipped latent vector."""
    z = np.asarray(z_clipped, dtype=np.float64)
    if math.isinf(params.epsilon):
        return z.copy()
    return z + laplace_sample(rng, params.noise_scales(), size=z.shape)


@dataclass
class PrivatizeAudit:
    image_id: str
    epsilon: float
    epsilon_per_element: float
    seed: int | None
    clip: bool
    sensitivity_mode: str
    mechanism: str
    clipped_before_noise: float  # fraction of elements moved by the first clip
    clipped_after_noise: float
    noise_scales: np.ndarray | None = None

    def line(self):
        eps = "inf" if math.isinf(self.epsilon) else f"{self.epsilon:.9g}"
        eps_k = "inf" if math.isinf(self.epsilon_per_element) else f"{self.epsilon_per_element:.9g}"
        seed = "none" if self.seed is None else str(self.seed)
        return (
            f"image={self.image_id} mechanism={self.mechanism} eps={eps} "
            f"eps_per_element={eps_k} seed={seed} clip={'on' if self.clip else 'off'} "
            f"sensitivity_mode={self.sensitivity_mode} "
            f"clip_frac_in={self.clipped_before_noise:.6f} "
            f"clip_frac_out={self.clipped_after_noise:.6f}"
        )


def privatize_latent(z, params, rng, clip=True):
    """Latent-space portion of the pipeline; returns (z_tilde, clip fractions)."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != params.dim:
        raise UsageError(f"latent dim {z.shape[-1]} does not match params dim {params.dim}")
    frac_in = frac_out = 0.0
    if clip:
        z_c = clip_latent(z, params)
        frac_in = float(np.mean(z_c != z))
    else:
        z_c = z
    z_t = laplace_privatize(z_c, params, rng)
    if clip:
        z_t2 = clip_latent(z_t, params)
        frac_out = float(np.mean(z_t2 != z_t))
        z_t = z_t2
    return z_t, frac_in, frac_out


def privatize_image(model, x, params, rng, clip=True, image_id="", seed=None):
    """Full pipeline: encode, clip, add Laplace noise, clip, decode.

    Returns the obfuscated image and an audit record.  With the infinite
    budget sentinel the noise step is skipped, so ``clip=False`` reproduces
    the plain flow roundtrip.
    """
    z, _ = forward(model, x)
    z_t, frac_in, frac_out = privatize_latent(z, params, rng, clip=clip)
    x_t, _ = inverse(model, z_t)
    audit = PrivatizeAudit(
        image_id=image_id,
        epsilon=params.epsilon,
        epsilon_per_element=params.epsilon_per_element,
        seed=seed,
        clip=clip,
        sensitivity_mode=params.sensitivity_mode,
        mechanism="latent-laplace",
        clipped_before_noise=frac_in,
        clipped_after_noise=frac_out,
        noise_scales=params.noise_scales(),
    )
    return x_t, audit


def derive_seed(base_seed, index):
    """Per-image seed for batch fan-out: base XOR image index."""
    return int(base_seed) ^ int(index)


def privatize_batch(model, images, params, base_seed, clip=True, ids=None):
    """Privatize a stack of images with per-image derived seeds.

    Flow passes are batched; the noise for image i comes from a generator
    seeded with ``derive_seed(base_seed, i)``, so the output for each image
    is identical to a lone :func:`privatize_image` call with that seed.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    n = images.shape[0]
    z, _ = model.forward_batch(images)
    z_out = np.empty_like(z)
    audits = []
    for i in range(n):
        seed = derive_seed(base_seed, i)
        rng = np.random.default_rng(seed)
        z_out[i], frac_in, frac_out = privatize_latent(z[i], params, rng, clip=clip)
        audits.append(
            PrivatizeAudit(
                image_id=ids[i] if ids else str(i),
                epsilon=params.epsilon,
                epsilon_per_element=params.epsilon_per_element,
                seed=seed,
                clip=clip,
                sensitivity_mode=params.sensitivity_mode,
                mechanism="latent-laplace",
                clipped_before_noise=frac_in,
                clipped_after_noise=frac_out,
            )
        )
    x_t, _ = model.inverse_batch(z_out)
    return x_t, audits


def pixel_sensitivity(images):
    """Per-pixel max - min over a training image stack (the image-domain
    analog of the latent sensitivity)."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if images.shape[0] < 2:
        raise UsageError("pixel sensitivity needs at least 2 images")
    return images.max(axis=0) - images.min(axis=0)


def privatize_pixels(x, epsilon, pixel_sens, rng, value_range=(-0.5, 0.5)):
    """Image-domain LDP baseline: per-pixel Laplace noise, clipped to range.

    The noise scale for pixel (i, j) is sens_ij * D / epsilon, the direct
    analog of the latent mechanism with the identity map.
    """
    x = np.asarray(x, dtype=np.float64)
    sens = np.asarray(pixel_sens, dtype=np.float64)
    if x.shape != sens.shape:
        raise UsageError(f"pixel sensitivity shape {sens.shape} does not match image {x.shape}")
    if math.isinf(epsilon):
        return x.copy()
    if epsilon <= 0:
        raise UsageError("epsilon must be positive")
    scales = sens * (x.size / epsilon)
    noisy = x + laplace_sample(rng, scales, size=x.shape)
    return np.clip(noisy, value_range[0], value_range[1])


def privatize_pixels_batch(images, epsilon, pixel_sens, base_seed, value_range=(-0.5, 0.5)):
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    out = np.empty_like(images)
    for i in range(images.shape[0]):
        rng = np.random.default_rng(derive_seed(base_seed, i))
        out[i] = privatize_pixels(images[i], epsilon, pixel_sens, rng, value_range)
    return out


@dataclass
class EpsilonBreakdown:
    dim: int
    total: float
    per_element: float
    exact_sum: bool  # per_element * dim == total in exact arithmetic


def epsilon_decompose(params):
    """Equal per-element budget split; the per-element shares sum to the
    total exactly (verified in rational arithmetic for finite budgets)."""
    total = params.epsilon
    d = params.dim
    if math.isinf(total):
        return EpsilonBreakdown(dim=d, total=total, per_element=math.inf, exact_sum=True)
    per = Fraction(total) / d
    exact = per * d == Fraction(total)
    return EpsilonBreakdown(dim=d, total=total, per_element=float(per), exact_sum=exact)


_MODE_CODES = {"clipped": 0, "conservative": 1}
_MODE_NAMES = {v: k for k, v in _MODE_CODES.items()}


def serialize_params(params):
    """Binary sidecar: magic FDPP, version, payload, CRC-32."""
    d = params.dim
    body = struct.pack("<I", d)
    body += struct.pack("<d", params.alpha)
    body += struct.pack("<d", params.epsilon)
    body += struct.pack("<B", _MODE_CODES[params.sensitivity_mode])
    for arr in (params.sensitivity, params.center, params.width):
        body += np.asarray(arr, dtype="<f8").tobytes()
    head = PARAMS_MAGIC + struct.pack("<H", PARAMS_VERSION) + struct.pack("<I", len(body))
    return head + body + struct.pack("<I", zlib.crc32(body))


def save_params(params, path):
    with open(path, "wb") as fh:
        fh.write(serialize_params(params))


def deserialize_params(data):
    if data[:4] != PARAMS_MAGIC:
        raise FormatError("bad privacy-params magic (expected FDPP)", offset=0)
    version = struct.unpack("<H", data[4:6])[0]
    if version != PARAMS_VERSION:
        raise FormatError(f"unsupported privacy-params version {version}")
    (length,) = struct.unpack("<I", data[6:10])
    body = data[10 : 10 + length]
    if len(body) < length or len(data) < 10 + length + 4:
        raise FormatError("truncated privacy-params payload", offset=len(data))
    (stored,) = struct.unpack("<I", data[10 + length : 14 + length])
    if stored != zlib.crc32(body):
        raise FormatError("privacy-params checksum mismatch")
    (d,) = struct.unpack("<I", body[:4])
    alpha, epsilon = struct.unpack("<2d", body[4:20])
    (mode_code,) = struct.unpack("<B", body[20:21])
    if mode_code not in _MODE_NAMES:
        raise FormatError(f"unknown sensitivity-mode code {mode_code}")
    need = 21 + 3 * 8 * d
    if len(body) != need:
        raise FormatError(f"privacy-params payload length {len(body)} != expected {need}")
    arrays = np.frombuffer(body[21:], dtype="<f8").reshape(3, d)
    return PrivacyParams(
        arrays[0].copy(),
        arrays[1].copy(),
        arrays[2].copy(),
        alpha,
        epsilon,
        _MODE_NAMES[mode_code],
    )


def load_params(path):
    with open(path, "rb") as fh:
        return deserialize_params(fh.read())


def parse_epsilon(text, dim=None):
    """Parse a budget expression.

    Accepts "inf", plain floats, and the scaled form "<float>xD" meaning
    float * D (so "1e1xD" is a per-element budget of 10).  The scaled form
    needs ``dim``.
    """
    text = text.strip()
    if text.lower() in ("inf", "infinity"):
        return math.inf
    if text.lower().endswith("xd"):
        if dim is None:
            raise UsageError(f"epsilon form {text!r} needs the latent dimension")
        try:
            factor = float(text[:-2])
        except ValueError:
            raise UsageError(f"cannot parse epsilon expression {text!r}") from None
        return factor * dim
    try:
        return float(text)
    except ValueError:
        raise UsageError(f"cannot parse epsilon expression {text!r}") from None
