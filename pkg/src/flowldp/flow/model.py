"""Multi-scale flow model: image batches to latent vectors and back.

The model is a flat ordered list of layers.  ``Squeeze`` layers trade space
for channels at the start of each level; after every level except the last a
``Split`` layer sends half of the channels straight to the latent vector.
The latent vector of a sample is the concatenation of the split outputs in
encounter order followed by the final tensor, each flattened in row-major
(H, W, C) order, so latent element indices are stable across runs for a
fixed architecture.
"""

import math

import numpy as np

from ..errors import ConfigError, NumericError, UsageError
from .layers import ActNorm, Coupling, FixedPermutation, Invertible1x1, Split, Squeeze

LOG_2PI = math.log(2.0 * math.pi)

ARCHITECTURES = ("glow", "nice")


class FlowModel:
    """Invertible map between (H, W, C) images and D = H*W*C latent vectors."""

    def __init__(self, input_shape, levels, depth, layers, trained_on=""):
        self.input_shape = tuple(int(v) for v in input_shape)
        self.levels = int(levels)
        self.depth = int(depth)
        self.layers = layers
        self.trained_on = trained_on
        self._trace_shapes()

    def _trace_shapes(self):
        """Record the shape entering each layer and the latent chunk layout."""
        shape = self.input_shape
        self.layer_shapes = []
        self.chunk_shapes = []
        for layer in self.layers:
            self.layer_shapes.append(shape)
            if isinstance(layer, Split):
                self.chunk_shapes.append(layer.exit_shape(shape))
            shape = layer.out_shape(shape)
        self.final_shape = shape
        self.chunk_shapes.append(shape)
        self.latent_dim = sum(int(np.prod(s)) for s in self.chunk_shapes)
        if self.latent_dim != int(np.prod(self.input_shape)):
            raise ConfigError("latent dimension does not match input volume")
        bounds = []
        offset = 0
        for s in self.chunk_shapes:
            size = int(np.prod(s))
            bounds.append((offset, offset + size, s))
            offset += size
        self.chunk_bounds = bounds

    @property
    def param_count(self):
        return sum(p.size for layer in self.layers for p in layer.params.values())

    def copy(self):
        return FlowModel(
            self.input_shape,
            self.levels,
            self.depth,
            [layer.copy() for layer in self.layers],
            self.trained_on,
        )

    def _check_batch(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ConfigError(
                f"batch shape {x.shape} does not match model input {self.input_shape}"
            )
        return x

    def forward_batch(self, x, want_cache=False):
        """Map images (B, H, W, C) to latents (B, D) with per-sample log-det."""
        x = self._check_batch(x)
        if not np.isfinite(x).all():
            raise NumericError("non-finite input to forward pass")
        batch = x.shape[0]
        h = x
        logdet = np.zeros(batch)
        chunks = []
        caches = []
        for index, layer in enumerate(self.layers):
            if isinstance(layer, Split):
                h, z_part = layer.split(h)
                chunks.append(z_part.reshape(batch, -1))
                caches.append(None)
                continue
            if want_cache:
                h, ld, cache = layer.forward(h, want_cache=True)
                caches.append(cache)
            else:
                h, ld = layer.forward(h)
            logdet += ld
            if not np.isfinite(h).all():
                raise NumericError(
                    f"non-finite activations after layer {index} ({layer.kind})",
                    layer_index=index,
                )
        chunks.append(h.reshape(batch, -1))
        z = np.concatenate(chunks, axis=1)
        if want_cache:
            return z, logdet, caches
        return z, logdet

    def inverse_batch(self, z):
        """Map latents (B, D) back to images; log-det negates the forward value."""
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ConfigError(f"latent shape {z.shape} does not match D={self.latent_dim}")
        batch = z.shape[0]
        start, end, shape = self.chunk_bounds[-1]
        h = z[:, start:end].reshape(batch, *shape)
        pending = len(self.chunk_bounds) - 2
        logdet = np.zeros(batch)
        for index in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[index]
            if isinstance(layer, Split):
                start, end, shape = self.chunk_bounds[pending]
                pending -= 1
                h = layer.merge(h, z[:, start:end].reshape(batch, *shape))
                continue
            h, ld = layer.inverse(h)
            logdet += ld
            if not np.isfinite(h).all():
                raise NumericError(
                    f"non-finite activations inverting layer {index} ({layer.kind})",
                    layer_index=index,
                )
        return h, logdet

    def backward_batch(self, caches, grad_z, grad_logdet):
        """Reverse-mode pass: gradients w.r.t. every parameter.

        ``grad_z`` is dLoss/dz, shape (B, D); ``grad_logdet`` is
        dLoss/dlogdet per sample, shape (B,).  Returns a list of dicts
        aligned with ``self.layers``.
        """
        batch = grad_z.shape[0]
        grads = [{} for _ in self.layers]
        start, end, shape = self.chunk_bounds[-1]
        grad_h = grad_z[:, start:end].reshape(batch, *shape)
        pending = len(self.chunk_bounds) - 2
        for index in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[index]
            if isinstance(layer, Split):
                start, end, shape = self.chunk_bounds[pending]
                pending -= 1
                grad_part = grad_z[:, start:end].reshape(batch, *shape)
                grad_h = np.concatenate([grad_h, grad_part], axis=-1)
                continue
            grad_h, grad_params = layer.backward(caches[index], grad_h, grad_logdet)
            grads[index] = grad_params
        return grads


def _as_batch(x, shape):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == len(shape):
        return x[None], True
    return x, False


def forward(model, x):
    """Image(s) to latent(s).  Accepts one (H, W, C) image or a (B, ...) batch."""
    xb, single = _as_batch(x, model.input_shape)
    z, logdet = model.forward_batch(xb)
    return (z[0], float(logdet[0])) if single else (z, logdet)


def inverse(model, z):
    """Latent(s) to image(s).  Accepts one (D,) vector or a (B, D) batch."""
    zb = np.asarray(z, dtype=np.float64)
    single = zb.ndim == 1
    if single:
        zb = zb[None]
    x, logdet = model.inverse_batch(zb)
    return (x[0], float(logdet[0])) if single else (x, logdet)


def log_prob(model, x):
    """Exact log density under the flow with a standard normal latent prior."""
    xb, single = _as_batch(x, model.input_shape)
    z, logdet = model.forward_batch(xb)
    lp = -0.5 * ((z * z).sum(axis=1) + model.latent_dim * LOG_2PI) + logdet
    return float(lp[0]) if single else lp


def build_model(
    input_shape,
    levels=2,
    depth=4,
    arch="glow",
    hidden=32,
    seed=0,
    identity_init=False,
    trained_on="",
):
    """Construct a multi-scale flow.

    ``arch`` selects the step recipe: "glow" uses affine couplings with a
    learned invertible 1x1 channel mix, "nice" uses additive couplings with
    a fixed channel reversal.  ``identity_init`` replaces every permutation
    with the identity (and leaves actnorm neutral), giving a model whose
    forward pass is exactly the squeeze/split element reordering; coupling
    conditioners always start at zero, so fresh models of either kind start
    as (possibly permuted) identities.
    """
    if arch not in ARCHITECTURES:
        raise ConfigError(f"unknown architecture {arch!r}, expected one of {ARCHITECTURES}")
    h, w, c = (int(v) for v in input_shape)
    if h < 2 or w < 2 or c < 1:
        raise ConfigError(f"degenerate input shape {(h, w, c)}")
    if levels < 1 or depth < 1:
        raise ConfigError("levels and depth must be at least 1")
    if h % (2**levels) or w % (2**levels):
        raise ConfigError(f"{h}x{w} input not divisible by 2^levels={2**levels}")
    rng = np.random.default_rng(seed)
    affine = arch == "glow"
    layers = []
    for level in range(levels):
        layers.append(Squeeze(level))
        h, w, c = layers[-1].out_shape((h, w, c))
        for _ in range(depth):
            layers.append(ActNorm(c, level))
            if identity_init:
                layers.append(
                    Invertible1x1(c, rng=None, level=level)
                    if affine
                    else FixedPermutation.identity(c, level)
                )
            elif affine:
                layers.append(Invertible1x1(c, rng=rng, level=level))
            else:
                layers.append(FixedPermutation.reverse(c, level))
            layers.append(Coupling(c, hidden, affine, rng, level))
        if level < levels - 1:
            layers.append(Split(level))
            h, w, c = layers[-1].out_shape((h, w, c))
    return FlowModel(input_shape, levels, depth, layers, trained_on)


def randomize_parameters(model, rng, scale=0.1):
    """Perturb every trainable parameter in place with Gaussian noise.

    Used to obtain nontrivial Jacobians and gradients in numerical checks
    without running a training loop.
    """
    for layer in model.layers:
        for name, value in layer.params.items():
            layer.params[name] = value + rng.normal(0.0, scale, size=value.shape)
    return model


def flatten_image(x):
    """Row-major flattening used for latent bookkeeping and reports."""
    return np.asarray(x, dtype=np.float64).reshape(-1)


def encode_dataset(model, images, batch_size=256):
    """Latent vectors for a stack of images, shape (N, D)."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if images.shape[0] == 0:
        raise UsageError("cannot encode an empty image set")
    outputs = []
    for lo in range(0, images.shape[0], batch_size):
        z, _ = model.forward_batch(images[lo : lo + batch_size])
        outputs.append(z)
    return np.concatenate(outputs, axis=0)
