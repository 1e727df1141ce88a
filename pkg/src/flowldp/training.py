"""Maximum-likelihood training with hand-derived gradients.

The layer set is closed and small, so there is no autodiff tape: every layer
ships its own reverse-mode rule and this module chains them.  The optimizer
is Adam with bias correction and a linear per-epoch learning-rate warmup.
Given a fixed seed and a fixed reduction order (single threaded here), runs
are bit-reproducible.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import TrainingDiverged, UsageError
from .flow.model import LOG_2PI
from .images import dequantize, from_pixels


@dataclass
class TrainConfig:
    minibatch: int = 16
    epochs: int = 30
    samples_per_epoch: int = 2000
    learning_rate: float = 1e-3
    warmup_epochs: int = 5
    seed: int = 0
    split_tag: str = ""
    grad_clip: float | None = None  # global-norm clip, disabled by default

    def __post_init__(self):
        if self.minibatch < 1:
            raise UsageError("minibatch must be at least 1")
        if self.learning_rate <= 0:
            raise UsageError("learning_rate must be positive")
        if self.epochs < 0 or self.samples_per_epoch < 1:
            raise UsageError("epochs must be >= 0 and samples_per_epoch >= 1")


@dataclass
class TrainResult:
    model: object
    epochs: list = field(default_factory=list)  # (epoch number, mean train NLL)
    initial_nll: float = float("nan")
    final_nll: float = float("nan")


def nll_loss(model, batch):
    """Mean negative log likelihood of a batch, in nats per image."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 3:
        batch = batch[None]
    if batch.shape[0] == 0:
        raise UsageError("nll_loss needs a nonempty batch")
    z, logdet = model.forward_batch(batch)
    nll = 0.5 * ((z * z).sum(axis=1) + model.latent_dim * LOG_2PI) - logdet
    return float(nll.mean())


def loss_and_grads(model, batch):
    """Mean NLL and its exact gradient w.r.t. every parameter."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 3:
        batch = batch[None]
    if batch.shape[0] == 0:
        raise UsageError("backward needs a nonempty batch")
    n = batch.shape[0]
    z, logdet, caches = model.forward_batch(batch, want_cache=True)
    nll = 0.5 * ((z * z).sum(axis=1) + model.latent_dim * LOG_2PI) - logdet
    grad_z = z / n
    grad_logdet = np.full(n, -1.0 / n)
    grads = model.backward_batch(caches, grad_z, grad_logdet)
    return float(nll.mean()), grads


def backward(model, batch):
    """Gradient of :func:`nll_loss` w.r.t. every parameter tensor.

    Returns a list of dicts aligned with ``model.layers``.
    """
    _, grads = loss_and_grads(model, batch)
    return grads


def grad_global_norm(grads):
    total = 0.0
    for g in grads:
        for arr in g.values():
            total += float((arr * arr).sum())
    return np.sqrt(total)


class Adam:
    """Adam with bias correction; state mirrors the model's parameter dicts."""

    def __init__(self, model, learning_rate, betas=(0.9, 0.999), eps=1e-8):
        self.model = model
        self.learning_rate = learning_rate
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [{k: np.zeros_like(v) for k, v in layer.params.items()} for layer in model.layers]
        self.v = [{k: np.zeros_like(v) for k, v in layer.params.items()} for layer in model.layers]

    def step(self, grads, learning_rate=None):
        lr = self.learning_rate if learning_rate is None else learning_rate
        self.t += 1
        correction1 = 1.0 - self.beta1**self.t
        correction2 = 1.0 - self.beta2**self.t
        for layer, g, m, v in zip(self.model.layers, grads, self.m, self.v):
            for name, grad in g.items():
                m[name] = self.beta1 * m[name] + (1.0 - self.beta1) * grad
                v[name] = self.beta2 * v[name] + (1.0 - self.beta2) * grad * grad
                m_hat = m[name] / correction1
                v_hat = v[name] / correction2
                layer.params[name] = layer.params[name] - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def initialize_actnorm(model, batch):
    """Data-dependent actnorm init: per-channel zero mean, unit variance.

    Walks the layer stack with the given batch and resets each actnorm from
    the activations that actually reach it.
    """
    batch = np.asarray(batch, dtype=np.float64)
    h = batch
    for layer in model.layers:
        if layer.kind == "split":
            h, _ = layer.split(h)
            continue
        if layer.kind == "actnorm":
            layer.data_init(h)
        h, _ = layer.forward(h)
    return model


def evaluate_nll(model, pixels, limit=512, batch_size=256):
    """Mean NLL over up to ``limit`` images, using mid-bin values.

    Deterministic measurement pass used for before/after comparisons; the
    training batches themselves use fresh dequantization noise.
    """
    pixels = np.asarray(pixels)
    count = min(limit, pixels.shape[0])
    total = 0.0
    for lo in range(0, count, batch_size):
        chunk = from_pixels(pixels[lo : min(lo + batch_size, count)])
        total += nll_loss(model, chunk) * chunk.shape[0]
    return total / count


def warmup_learning_rate(config, epoch):
    """Linear ramp to the steady-state rate over the first warmup epochs."""
    if config.warmup_epochs <= 0:
        return config.learning_rate
    ramp = min(1.0, (epoch + 1) / config.warmup_epochs)
    return config.learning_rate * ramp


def train(model, pixels, config, log_fh=None, start_epoch=0, data_init=True):
    """Train in place on integer pixel images (N, H, W, C), values 0..255.

    Samples with replacement: each epoch draws ``samples_per_epoch`` images.
    Writes one ``epoch <n> nll <value>`` line per epoch to ``log_fh`` when
    given.  On divergence raises :class:`TrainingDiverged` carrying the last
    model state whose epoch finished with a finite loss.
    """
    pixels = np.asarray(pixels)
    if pixels.ndim != 4 or pixels.shape[0] == 0:
        raise UsageError("train needs a nonempty (N, H, W, C) pixel stack")
    if config.split_tag:
        model.trained_on = config.split_tag
    result = TrainResult(model=model)
    result.initial_nll = evaluate_nll(model, pixels)
    if config.epochs == 0:
        result.final_nll = result.initial_nll
        return result

    rng = np.random.default_rng(config.seed)
    steps_per_epoch = max(1, -(-config.samples_per_epoch // config.minibatch))
    if data_init:
        first = rng.integers(0, pixels.shape[0], size=min(256, max(config.minibatch, 64)))
        initialize_actnorm(model, dequantize(pixels[first], rng))
    optimizer = Adam(model, config.learning_rate)
    last_good = model.copy()

    for epoch in range(start_epoch + 1, start_epoch + config.epochs + 1):
        lr = warmup_learning_rate(config, epoch - start_epoch - 1)
        epoch_sum = 0.0
        for _ in range(steps_per_epoch):
            idx = rng.integers(0, pixels.shape[0], size=config.minibatch)
            batch = dequantize(pixels[idx], rng)
            loss, grads = loss_and_grads(model, batch)
            if not np.isfinite(loss):
                result.final_nll = evaluate_nll(last_good, pixels)
                raise TrainingDiverged(
                    f"NLL became non-finite in epoch {epoch}",
                    last_good_model=last_good,
                    metrics=result,
                )
            if config.grad_clip is not None:
                norm = grad_global_norm(grads)
                if norm > config.grad_clip:
                    factor = config.grad_clip / norm
                    grads = [{k: v * factor for k, v in g.items()} for g in grads]
            optimizer.step(grads, lr)
            epoch_sum += loss
        epoch_nll = epoch_sum / steps_per_epoch
        result.epochs.append((epoch, epoch_nll))
        if log_fh is not None:
            log_fh.write(f"epoch {epoch} nll {epoch_nll:.6f}\n")
            log_fh.flush()
        last_good = model.copy()
    result.final_nll = evaluate_nll(model, pixels)
    return result
