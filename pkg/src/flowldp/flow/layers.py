"""Invertible layers for the multi-scale flow.

Every layer implements three views of the same bijection on (B, H, W, C)
batches:

* ``forward(x) -> (y, logdet)`` with ``logdet`` per sample, shape (B,),
* ``inverse(y) -> (x, logdet)`` whose log-det is the exact negation of the
  forward value at the corresponding point,
* ``backward(cache, grad_y, grad_logdet) -> (grad_x, grad_params)``, the
  hand-derived vector-Jacobian product for training.  ``cache`` comes from
  ``forward(x, want_cache=True)``; ``grad_logdet`` has shape (B,) and is the
  sensitivity of the loss to each sample's accumulated log-det.

All math is float64.  Parameters live in ``self.params`` (name -> array);
fixed non-trainable state lives in ``self.fixed`` and is still serialized so
checkpoints are self-contained.
"""

import numpy as np
import scipy.linalg

from ..errors import ConfigError, NumericError

# Raw log-scale outputs of affine couplings are clamped to this band before
# exponentiation so the inverse cannot overflow.
LOG_SCALE_CLAMP = 5.0


def squeeze(x):
    """Trade spatial extent for channels: (..., H, W, C) -> (..., H/2, W/2, 4C).

    The four pixels of each 2x2 block enter the channel axis in row-major
    block order, so a 2x2x1 tile [[a, b], [c, d]] becomes the channel vector
    [a, b, c, d].  Pure element permutation: volume preserving, log-det 0.
    """
    *lead, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ConfigError(f"squeeze needs even spatial dims, got {h}x{w}")
    x = x.reshape(*lead, h // 2, 2, w // 2, 2, c)
    x = np.moveaxis(x, (-4, -2), (-3, -2))  # (..., h/2, w/2, 2, 2, c)
    return np.ascontiguousarray(x).reshape(*lead, h // 2, w // 2, 4 * c)


def unsqueeze(y):
    """Exact inverse of :func:`squeeze`."""
    *lead, h, w, c = y.shape
    if c % 4:
        raise ConfigError(f"unsqueeze needs channels divisible by 4, got {c}")
    y = y.reshape(*lead, h, w, 2, 2, c // 4)
    y = np.moveaxis(y, (-3, -2), (-4, -2))  # (..., h, 2, w, 2, c/4)
    return np.ascontiguousarray(y).reshape(*lead, 2 * h, 2 * w, c // 4)


def _check_finite(arr, kind, what):
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite {what} in {kind} layer")


class Layer:
    """Common interface; concrete layers override the three core methods."""

    kind = "?"

    def __init__(self, level=0):
        self.level = level
        self.params = {}
        self.fixed = {}

    def forward(self, x, want_cache=False):
        raise NotImplementedError

    def inverse(self, y):
        raise NotImplementedError

    def backward(self, cache, grad_y, grad_logdet):
        raise NotImplementedError

    def out_shape(self, shape):
        return shape

    def copy(self):
        dup = self.__class__.__new__(self.__class__)
        dup.__dict__.update(self.__dict__)
        dup.params = {k: v.copy() for k, v in self.params.items()}
        dup.fixed = {k: v.copy() for k, v in self.fixed.items()}
        return dup


class ActNorm(Layer):
    """Per-channel affine map y = exp(log_scale) * (x + bias).

    log-det per sample is H*W*sum(log_scale).  ``data_init`` sets the
    parameters so the given batch comes out with zero mean and unit variance
    per channel.
    """

    kind = "actnorm"

    def __init__(self, channels, level=0):
        super().__init__(level)
        self.params = {
            "log_scale": np.zeros(channels),
            "bias": np.zeros(channels),
        }

    def data_init(self, x):
        mean = x.mean(axis=(0, 1, 2))
        std = x.std(axis=(0, 1, 2))
        std = np.maximum(std, 1e-8)
        self.params["bias"] = -mean
        self.params["log_scale"] = -np.log(std)

    def forward(self, x, want_cache=False):
        s = np.exp(self.params["log_scale"])
        y = s * (x + self.params["bias"])
        _, h, w, _ = x.shape
        logdet = np.full(x.shape[0], h * w * self.params["log_scale"].sum())
        return (y, logdet, (x,)) if want_cache else (y, logdet)

    def inverse(self, y):
        s = np.exp(self.params["log_scale"])
        x = y / s - self.params["bias"]
        _, h, w, _ = y.shape
        logdet = np.full(y.shape[0], -h * w * self.params["log_scale"].sum())
        return x, logdet

    def backward(self, cache, grad_y, grad_logdet):
        (x,) = cache
        _, h, w, _ = x.shape
        s = np.exp(self.params["log_scale"])
        grad_x = grad_y * s
        grad_bias = grad_x.sum(axis=(0, 1, 2))
        # d y / d log_scale = y elementwise; log-det adds H*W per sample.
        grad_log_scale = (grad_y * s * (x + self.params["bias"])).sum(axis=(0, 1, 2))
        grad_log_scale += grad_logdet.sum() * h * w
        return grad_x, {"log_scale": grad_log_scale, "bias": grad_bias}


class FixedPermutation(Layer):
    """Channel shuffle by a fixed index vector; log-det 0."""

    kind = "fixed-permutation"

    def __init__(self, perm, level=0):
        super().__init__(level)
        perm = np.asarray(perm, dtype=np.int64)
        self.fixed = {"perm": perm.astype(np.float64)}
        self._perm = perm
        self._inv = np.argsort(perm)

    @classmethod
    def reverse(cls, channels, level=0):
        return cls(np.arange(channels)[::-1], level)

    @classmethod
    def identity(cls, channels, level=0):
        return cls(np.arange(channels), level)

    def _refresh(self):
        self._perm = self.fixed["perm"].astype(np.int64)
        self._inv = np.argsort(self._perm)

    def forward(self, x, want_cache=False):
        y = x[..., self._perm]
        logdet = np.zeros(x.shape[0])
        return (y, logdet, None) if want_cache else (y, logdet)

    def inverse(self, y):
        return y[..., self._inv], np.zeros(y.shape[0])

    def backward(self, cache, grad_y, grad_logdet):
        return grad_y[..., self._inv], {}


class Invertible1x1(Layer):
    """Learned channel mixing y = W x with W = P L U.

    P is a fixed permutation, L unit lower triangular, U upper triangular
    with diagonal sign * exp(log_diag); signs and P are frozen at
    initialization so |det W| = prod(exp(log_diag)) and the log-det costs
    O(C).  Per sample the log-det is H*W*sum(log_diag).
    """

    kind = "invertible-1x1-conv"

    def __init__(self, channels, rng=None, level=0):
        super().__init__(level)
        c = channels
        if rng is None:
            perm = np.arange(c)
            lower = np.zeros((c, c))
            upper = np.zeros((c, c))
            sign = np.ones(c)
            log_diag = np.zeros(c)
        else:
            # Random rotation start, refactored so training only touches the
            # triangular factors and the diagonal magnitudes.
            q, r = np.linalg.qr(rng.normal(size=(c, c)))
            q *= np.sign(np.diag(r))
            p_mat, l_mat, u_mat = scipy.linalg.lu(q)
            perm = np.argmax(p_mat, axis=1)
            lower = np.tril(l_mat, -1)
            diag = np.diag(u_mat)
            sign = np.sign(diag)
            log_diag = np.log(np.abs(diag))
            upper = np.triu(u_mat, 1)
        self.params = {"lower": lower, "upper": upper, "log_diag": log_diag}
        self.fixed = {"perm": perm.astype(np.float64), "sign": sign.astype(np.float64)}

    def _weight(self):
        c = self.params["log_diag"].shape[0]
        perm = self.fixed["perm"].astype(np.int64)
        l_mat = np.tril(self.params["lower"], -1) + np.eye(c)
        diag = self.fixed["sign"] * np.exp(self.params["log_diag"])
        u_mat = np.triu(self.params["upper"], 1) + np.diag(diag)
        w_mat = np.eye(c)[perm] @ l_mat @ u_mat
        if np.exp(self.params["log_diag"].sum()) <= 1e-12:
            raise NumericError("1x1 convolution weight is numerically singular")
        return w_mat, l_mat, u_mat

    def forward(self, x, want_cache=False):
        w_mat, _, _ = self._weight()
        y = x @ w_mat.T
        _, h, w, _ = x.shape
        logdet = np.full(x.shape[0], h * w * self.params["log_diag"].sum())
        return (y, logdet, (x,)) if want_cache else (y, logdet)

    def inverse(self, y):
        w_mat, _, _ = self._weight()
        x = y @ np.linalg.inv(w_mat).T
        _, h, w, _ = y.shape
        logdet = np.full(y.shape[0], -h * w * self.params["log_diag"].sum())
        return x, logdet

    def backward(self, cache, grad_y, grad_logdet):
        (x,) = cache
        b, h, w, c = x.shape
        w_mat, l_mat, u_mat = self._weight()
        perm = self.fixed["perm"].astype(np.int64)
        grad_x = grad_y @ w_mat
        gy_flat = grad_y.reshape(-1, c)
        x_flat = x.reshape(-1, c)
        grad_w = gy_flat.T @ x_flat
        # W = P L U: split the weight gradient across the factors.
        m = np.eye(c)[perm].T @ grad_w
        grad_lower = (m @ u_mat.T) * np.tri(c, k=-1)
        grad_u_full = l_mat.T @ m
        grad_upper = grad_u_full * np.tri(c, k=-1).T
        grad_log_diag = np.diag(grad_u_full) * self.fixed["sign"] * np.exp(self.params["log_diag"])
        grad_log_diag = grad_log_diag + grad_logdet.sum() * h * w
        return grad_x, {"lower": grad_lower, "upper": grad_upper, "log_diag": grad_log_diag}


def _conv3x3(x, weight, bias):
    """Same-padded 3x3 convolution on (B, H, W, Cin) -> (B, H, W, Cout)."""
    b, h, w, _ = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.broadcast_to(bias, (b, h, w, bias.shape[0])).copy()
    for di in range(3):
        for dj in range(3):
            out += xp[:, di : di + h, dj : dj + w, :] @ weight[di, dj]
    return out, xp


def _conv3x3_backward(xp, weight, grad_out):
    """VJP of the same-padded 3x3 convolution."""
    b, hp, wp, _ = xp.shape
    h, w = hp - 2, wp - 2
    grad_xp = np.zeros_like(xp)
    grad_w = np.zeros_like(weight)
    for di in range(3):
        for dj in range(3):
            grad_xp[:, di : di + h, dj : dj + w, :] += grad_out @ weight[di, dj].T
            grad_w[di, dj] = np.tensordot(xp[:, di : di + h, dj : dj + w, :], grad_out, axes=([0, 1, 2], [0, 1, 2]))
    grad_bias = grad_out.sum(axis=(0, 1, 2))
    return grad_xp[:, 1:-1, 1:-1, :], grad_w, grad_bias


class Coupling(Layer):
    """Coupling layer: the first half of the channels conditions the second.

    The conditioner is a two-convolution network (3x3 then 1x1) with a tanh
    in between; the final 1x1 starts at zero so a fresh coupling is the
    identity.  Affine mode scales by exp(clamp(raw)) and contributes the sum
    of clamped raws to the log-det; additive mode is volume preserving.
    """

    def __init__(self, channels, hidden, affine, rng, level=0):
        super().__init__(level)
        if channels < 2:
            raise ConfigError(f"coupling needs at least 2 channels, got {channels}")
        self.affine = affine
        self.c_cond = channels // 2
        self.c_trans = channels - self.c_cond
        out_ch = 2 * self.c_trans if affine else self.c_trans
        fan_in = 9 * self.c_cond
        self.params = {
            "w1": rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(3, 3, self.c_cond, hidden)),
            "b1": np.zeros(hidden),
            "w2": np.zeros((hidden, out_ch)),
            "b2": np.zeros(out_ch),
        }

    @property
    def kind(self):
        return "affine-coupling" if self.affine else "additive-coupling"

    def _net(self, xa):
        pre, xp = _conv3x3(xa, self.params["w1"], self.params["b1"])
        act = np.tanh(pre)
        out = act @ self.params["w2"] + self.params["b2"]
        return out, act, xp

    def _scale_shift(self, out):
        shift = out[..., : self.c_trans]
        raw = np.clip(out[..., self.c_trans :], -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)
        return shift, raw

    def forward(self, x, want_cache=False):
        xa = x[..., : self.c_cond]
        xb = x[..., self.c_cond :]
        out, act, xp = self._net(xa)
        if self.affine:
            shift, raw = self._scale_shift(out)
            scale = np.exp(raw)
            yb = xb * scale + shift
            logdet = raw.sum(axis=(1, 2, 3))
        else:
            yb = xb + out
            logdet = np.zeros(x.shape[0])
            raw = scale = None
        y = np.concatenate([xa, yb], axis=-1)
        if want_cache:
            return y, logdet, (xp, act, xb, out, raw, scale)
        return y, logdet

    def inverse(self, y):
        ya = y[..., : self.c_cond]
        yb = y[..., self.c_cond :]
        out, _, _ = self._net(ya)
        if self.affine:
            shift, raw = self._scale_shift(out)
            xb = (yb - shift) * np.exp(-raw)
            logdet = -raw.sum(axis=(1, 2, 3))
        else:
            xb = yb - out
            logdet = np.zeros(y.shape[0])
        return np.concatenate([ya, xb], axis=-1), logdet

    def backward(self, cache, grad_y, grad_logdet):
        xp, act, xb, out, raw, scale = cache
        grad_ya = grad_y[..., : self.c_cond]
        grad_yb = grad_y[..., self.c_cond :]
        if self.affine:
            grad_xb = grad_yb * scale
            grad_shift = grad_yb
            # Through yb = xb*exp(raw) + shift and logdet = sum(raw); the
            # clamp zeroes the gradient outside the active band.
            live = np.abs(out[..., self.c_trans :]) < LOG_SCALE_CLAMP
            grad_raw = (grad_yb * xb * scale + grad_logdet[:, None, None, None]) * live
            grad_out = np.concatenate([grad_shift, grad_raw], axis=-1)
        else:
            grad_xb = grad_yb
            grad_out = grad_yb
        grad_act = grad_out @ self.params["w2"].T
        grad_w2 = np.tensordot(act, grad_out, axes=([0, 1, 2], [0, 1, 2]))
        grad_b2 = grad_out.sum(axis=(0, 1, 2))
        grad_pre = grad_act * (1.0 - act * act)
        grad_xa_net, grad_w1, grad_b1 = _conv3x3_backward(xp, self.params["w1"], grad_pre)
        grad_xa = grad_ya + grad_xa_net
        grad_x = np.concatenate([grad_xa, grad_xb], axis=-1)
        return grad_x, {"w1": grad_w1, "b1": grad_b1, "w2": grad_w2, "b2": grad_b2}


class Squeeze(Layer):
    """Structural layer wrapping :func:`squeeze`; log-det exactly 0."""

    kind = "squeeze"

    def forward(self, x, want_cache=False):
        y = squeeze(x)
        logdet = np.zeros(x.shape[0])
        return (y, logdet, None) if want_cache else (y, logdet)

    def inverse(self, y):
        return unsqueeze(y), np.zeros(y.shape[0])

    def backward(self, cache, grad_y, grad_logdet):
        return unsqueeze(grad_y), {}

    def out_shape(self, shape):
        h, w, c = shape
        if h % 2 or w % 2:
            raise ConfigError(f"squeeze needs even spatial dims, got {h}x{w}")
        return (h // 2, w // 2, 4 * c)


class Split(Layer):
    """Multi-scale split: first half of the channels continues through the
    remaining layers, second half exits to the latent vector immediately.
    """

    kind = "split"

    def split(self, x):
        c = x.shape[-1]
        keep = c // 2
        return x[..., :keep], x[..., keep:]

    def merge(self, h, z_part):
        return np.concatenate([h, z_part], axis=-1)

    def out_shape(self, shape):
        h, w, c = shape
        if c < 2:
            raise ConfigError(f"split needs at least 2 channels, got {c}")
        return (h, w, c // 2)

    def exit_shape(self, shape):
        h, w, c = shape
        return (h, w, c - c // 2)


LAYER_KINDS = {
    "actnorm": ActNorm,
    "fixed-permutation": FixedPermutation,
    "invertible-1x1-conv": Invertible1x1,
    "affine-coupling": Coupling,
    "additive-coupling": Coupling,
    "squeeze": Squeeze,
    "split": Split,
}
