"""Layer implementations for the training engine.

All activations, weights, and gradients are float64 numpy arrays. Images are
channel-last (H, W, C) and batches are leading: (N, H, W, C) or (N, M).
Convolution weights are stored as (I, J, K, F) so the flattened 2-D view
(M, F) with M = I*J*K enumerates filter cells in (I, J, K) row-major order,
which is the same order `im2col` emits input chunks in. That shared ordering
is what makes the dense view of a convolution exact.
"""

import numpy as np
from scipy import sparse

from ..errors import ShapeError


def _pair(v):
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def conv_output_size(in_size, kernel, stride, padding):
    """Spatial output size of a convolution/pool along one axis."""
    if padding == "same":
        return -(-in_size // stride)  # ceil
    if padding == "valid":
        return (in_size - kernel) // stride + 1
    raise ValueError(f"unknown padding {padding!r}")


def _same_pad(in_size, kernel, stride):
    out = -(-in_size // stride)
    total = max(0, (out - 1) * stride + kernel - in_size)
    return total // 2, total - total // 2


def im2col_indices(input_shape, kernel, stride, padding):
    """Index map from flattened (H*W*C) input features to conv chunks.

    Returns an int32 array of shape (U*V, M) with M = I*J*K. Rows enumerate
    stride positions in row-major (U then V) order; columns enumerate the
    chunk cells in (I, J, K) row-major order. Entries of -1 denote zero
    padding (no input feature exists there).
    """
    h, w, c = input_shape
    ki, kj = kernel
    sh, sw = stride
    u = conv_output_size(h, ki, sh, padding)
    v = conv_output_size(w, kj, sw, padding)
    if u < 1 or v < 1:
        raise ValueError(f"kernel {kernel} does not fit input {input_shape}")
    pad_top = _same_pad(h, ki, sh)[0] if padding == "same" else 0
    pad_left = _same_pad(w, kj, sw)[0] if padding == "same" else 0

    rows = np.arange(u)[:, None] * sh - pad_top + np.arange(ki)[None, :]  # (U, I)
    cols = np.arange(v)[:, None] * sw - pad_left + np.arange(kj)[None, :]  # (V, J)
    rr = rows[:, None, :, None, None]  # (U, 1, I, 1, 1)
    cc = cols[None, :, None, :, None]  # (1, V, 1, J, 1)
    ch = np.arange(c)[None, None, None, None, :]
    flat = (rr * w + cc) * c + ch  # (U, V, I, J, C)
    invalid = (rr < 0) | (rr >= h) | (cc < 0) | (cc >= w)
    flat = np.where(np.broadcast_to(invalid, flat.shape), -1, flat)
    return flat.reshape(u * v, ki * kj * c).astype(np.int32), (u, v)


def im2col(x, idx):
    """Gather conv chunks: (N, H, W, C) -> (N, U*V, M), padding cells read 0."""
    n = x.shape[0]
    flat = x.reshape(n, -1)
    cols = flat[:, np.clip(idx, 0, None)]
    cols[:, idx < 0] = 0.0
    return cols


def scatter_matrix(idx, n_features):
    """Sparse adjoint of the im2col gather: (U*V*M, n_features) CSC."""
    flat = idx.ravel()
    valid = np.nonzero(flat >= 0)[0]
    mat = sparse.csc_matrix(
        (np.ones(len(valid)), (valid, flat[valid])),
        shape=(flat.size, n_features),
    )
    return mat


def col2im(dcols, idx, n_features):
    """Scatter-add the im2col adjoint: (N, U*V, M) -> (N, n_features)."""
    n = dcols.shape[0]
    return dcols.reshape(n, -1) @ scatter_matrix(idx, n_features)


def pool_indices(input_shape, window, stride):
    """Spatial window map for pooling (valid, no padding): (U*V, k) int32."""
    h, w, _ = input_shape
    kh, kw = window
    sh, sw = stride
    u = (h - kh) // sh + 1
    v = (w - kw) // sw + 1
    if u < 1 or v < 1:
        raise ValueError(f"pool window {window} does not fit input {input_shape}")
    rows = np.arange(u)[:, None] * sh + np.arange(kh)[None, :]
    cols = np.arange(v)[:, None] * sw + np.arange(kw)[None, :]
    flat = rows[:, None, :, None] * w + cols[None, :, None, :]  # (U, V, kh, kw)
    return flat.reshape(u * v, kh * kw).astype(np.int32), (u, v)


class Layer:
    """Base layer: shape resolution, parameters, forward/backward."""

    kind = None

    def __init__(self):
        self.input_shape = None
        self.output_shape = None
        self.grads = {}
        self._cache = None

    def build(self, input_shape, rng, init="glorot"):
        self.input_shape = tuple(input_shape)
        self.output_shape = self._resolve(self.input_shape, rng, init)
        return self.output_shape

    def _resolve(self, input_shape, rng, init):
        return input_shape

    def param_arrays(self):
        """Trainable parameters, name -> array (updated in place)."""
        return {}

    def state_arrays(self):
        """Non-trainable persistent state (e.g. moving statistics)."""
        return {}

    def n_params(self):
        return sum(a.size for a in self.param_arrays().values())

    def forward(self, x, train_mode=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def config(self):
        return {"kind": self.kind}

    def __repr__(self):
        return f"{type(self).__name__}({self.input_shape}->{self.output_shape})"


def _init_limit(init, fan_in, fan_out):
    if init == "he":
        return np.sqrt(6.0 / fan_in)
    return np.sqrt(6.0 / (fan_in + fan_out))


def _init_bias(init, size):
    # small positive bias keeps ReLU units alive on zero-valued inputs
    fill = 0.1 if init == "he" else 0.0
    return np.full(size, fill)


class Dense(Layer):
    """Fully-connected layer: out = x @ W + b, W of shape (inputs, units)."""

    kind = "dense"

    def __init__(self, units):
        super().__init__()
        self.units = int(units)
        self.w = None
        self.b = None
        self.mask = None  # optional (M, units) 0/1 gate over W

    def _resolve(self, input_shape, rng, init):
        if len(input_shape) != 1:
            raise ValueError(f"dense expects flat input, got {input_shape}")
        m = input_shape[0]
        if self.w is None:
            limit = _init_limit(init, m, self.units)
            self.w = rng.uniform(-limit, limit, size=(m, self.units))
            self.b = _init_bias(init, self.units)
        return (self.units,)

    def param_arrays(self):
        return {"w": self.w, "b": self.b}

    def weight_matrix(self):
        """2-D (rows, columns) view used for block pruning; columns are units."""
        return self.w

    def effective_weights(self):
        return self.w if self.mask is None else self.w * self.mask

    def effective_bias(self):
        # a fully-masked column is a pruned unit: its bias reads as zero too
        if self.mask is None:
            return self.b
        return self.b * self.mask.any(axis=0)

    def forward(self, x, train_mode=False):
        w = self.effective_weights()
        self._cache = (x, w)
        return x @ w + self.effective_bias()

    def backward(self, grad):
        x, w = self._cache
        gw = x.T @ grad
        gb = grad.sum(axis=0)
        if self.mask is not None:
            gw *= self.mask
            gb *= self.mask.any(axis=0)
        self.grads = {"w": gw, "b": gb}
        return grad @ w.T

    def config(self):
        return {"kind": self.kind, "units": self.units}


class Conv2D(Layer):
    """2-D cross-correlation, stride and valid/same padding, channel-last."""

    kind = "conv2d"

    def __init__(self, filters, kernel, stride=1, padding="valid"):
        super().__init__()
        self.filters = int(filters)
        self.kernel = _pair(kernel)
        self.stride = _pair(stride)
        if padding not in ("valid", "same"):
            raise ValueError(f"unknown padding {padding!r}")
        self.padding = padding
        self.w = None  # (I, J, K, F)
        self.b = None  # (F,)
        self.mask = None  # optional (M, F) gate over the flattened view
        self._idx = None
        self._scatter = None

    def _resolve(self, input_shape, rng, init):
        if len(input_shape) != 3:
            raise ValueError(f"conv2d expects (H, W, C) input, got {input_shape}")
        k = input_shape[2]
        m = self.kernel[0] * self.kernel[1] * k
        if self.w is None:
            limit = _init_limit(init, m, self.filters)
            self.w = rng.uniform(-limit, limit, size=(*self.kernel, k, self.filters))
            self.b = _init_bias(init, self.filters)
        self._idx, (u, v) = im2col_indices(input_shape, self.kernel, self.stride, self.padding)
        self._scatter = scatter_matrix(self._idx, int(np.prod(input_shape)))
        return (u, v, self.filters)

    def param_arrays(self):
        return {"w": self.w, "b": self.b}

    def weight_matrix(self):
        """Flattened (M, F) view; row order is (I, J, K) row-major."""
        return self.w.reshape(-1, self.filters)

    def effective_weights(self):
        wm = self.weight_matrix()
        return wm if self.mask is None else wm * self.mask

    def effective_bias(self):
        if self.mask is None:
            return self.b
        return self.b * self.mask.any(axis=0)

    def forward(self, x, train_mode=False):
        n = x.shape[0]
        cols = im2col(x, self._idx).reshape(n * self._idx.shape[0], -1)  # (N*U*V, M)
        wm = self.effective_weights()
        self._cache = (cols, wm)
        out = cols @ wm + self.effective_bias()
        u, v, f = self.output_shape
        return out.reshape(n, u, v, f)

    def backward(self, grad):
        cols, wm = self._cache
        g = grad.reshape(-1, self.filters)  # (N*U*V, F)
        n = g.shape[0] // self._idx.shape[0]
        gw = cols.T @ g  # (M, F)
        gb = g.sum(axis=0)
        if self.mask is not None:
            gw *= self.mask
            gb *= self.mask.any(axis=0)
        self.grads = {"w": gw.reshape(self.w.shape), "b": gb}
        dcols = g @ wm.T  # (N*U*V, M)
        dx = dcols.reshape(n, -1) @ self._scatter
        return np.asarray(dx).reshape(n, *self.input_shape)

    def config(self):
        return {
            "kind": self.kind,
            "filters": self.filters,
            "kernel": list(self.kernel),
            "stride": list(self.stride),
            "padding": self.padding,
        }


class _Pool2D(Layer):
    def __init__(self, window, stride=None):
        super().__init__()
        self.window = _pair(window)
        self.stride = _pair(stride) if stride is not None else self.window
        self._idx = None

    def _resolve(self, input_shape, rng, init):
        self._idx, (u, v) = pool_indices(input_shape, self.window, self.stride)
        return (u, v, input_shape[2])

    def _windows(self, x):
        n, h, w, c = x.shape
        return x.reshape(n, h * w, c)[:, self._idx, :]  # (N, U*V, k, C)

    def config(self):
        return {"kind": self.kind, "window": list(self.window), "stride": list(self.stride)}


class MaxPool2D(_Pool2D):
    """Max pooling, valid windows only (no padding)."""

    kind = "maxpool2d"

    def forward(self, x, train_mode=False):
        win = self._windows(x)
        amax = win.argmax(axis=2)
        self._cache = (x.shape, amax)
        u, v, c = self.output_shape
        return win.max(axis=2).reshape(x.shape[0], u, v, c)

    def backward(self, grad):
        (n, h, w, c), amax = self._cache
        g = grad.reshape(n, -1, c)  # (N, U*V, C)
        pos = self._idx[np.arange(self._idx.shape[0])[None, :, None], amax]  # (N, U*V, C)
        big = (np.arange(n)[:, None, None] * (h * w) + pos) * c + np.arange(c)
        out = np.bincount(big.ravel(), weights=g.ravel(), minlength=n * h * w * c)
        return out.reshape(n, h, w, c)


class AvgPool2D(_Pool2D):
    """Average pooling, valid windows only (no padding)."""

    kind = "avgpool2d"

    def forward(self, x, train_mode=False):
        win = self._windows(x)
        self._cache = x.shape
        u, v, c = self.output_shape
        return win.mean(axis=2).reshape(x.shape[0], u, v, c)

    def backward(self, grad):
        n, h, w, c = self._cache
        k = self._idx.shape[1]
        g = grad.reshape(n, -1, c) / k
        gk = np.repeat(g[:, :, None, :], k, axis=2)  # (N, U*V, k, C)
        big = (np.arange(n)[:, None, None, None] * (h * w) + self._idx[None, :, :, None]) * c \
            + np.arange(c)
        out = np.bincount(big.ravel(), weights=gk.ravel(), minlength=n * h * w * c)
        return out.reshape(n, h, w, c)


class PolyAct(Layer):
    """Elementwise trainable polynomial sum(c_k * x^k, k=0..degree)."""

    kind = "polyact"

    def __init__(self, degree=2, coeffs=None, init_scale=0.01):
        super().__init__()
        self.degree = int(degree)
        if self.degree < 1:
            raise ValueError("polynomial degree must be >= 1")
        self.init_scale = float(init_scale)
        self.coeffs = None if coeffs is None else np.asarray(coeffs, dtype=float).copy()
        if self.coeffs is not None and self.coeffs.size != self.degree + 1:
            raise ValueError(f"need {self.degree + 1} coefficients, got {self.coeffs.size}")

    def _resolve(self, input_shape, rng, init):
        if self.coeffs is None:
            self.coeffs = rng.uniform(-self.init_scale, self.init_scale, self.degree + 1)
        return input_shape

    def param_arrays(self):
        return {"coeffs": self.coeffs}

    def forward(self, x, train_mode=False):
        powers = [np.ones_like(x)]
        for _ in range(self.degree):
            powers.append(powers[-1] * x)
        self._cache = (x, powers)
        out = np.zeros_like(x)
        for k in range(self.degree + 1):
            out += self.coeffs[k] * powers[k]
        return out

    def backward(self, grad):
        x, powers = self._cache
        gc = np.array([(grad * powers[k]).sum() for k in range(self.degree + 1)])
        self.grads = {"coeffs": gc}
        deriv = np.zeros_like(x)
        for k in range(1, self.degree + 1):
            deriv += k * self.coeffs[k] * powers[k - 1]
        return grad * deriv

    def config(self):
        return {"kind": self.kind, "degree": self.degree}


class SquareAct(Layer):
    """Elementwise x^2, the non-trainable HE-friendly activation."""

    kind = "squareact"

    def forward(self, x, train_mode=False):
        self._cache = x
        return x * x

    def backward(self, grad):
        return grad * 2.0 * self._cache


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train_mode=False):
        self._cache = x > 0
        return np.where(self._cache, x, 0.0)

    def backward(self, grad):
        return grad * self._cache


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, train_mode=False):
        out = 1.0 / (1.0 + np.exp(-x))
        self._cache = out
        return out

    def backward(self, grad):
        s = self._cache
        return grad * s * (1.0 - s)


class Softmax(Layer):
    """Softmax over the last axis; training-time output layer only."""

    kind = "softmax"

    def forward(self, x, train_mode=False):
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        out = e / e.sum(axis=-1, keepdims=True)
        self._cache = out
        return out

    def backward(self, grad):
        p = self._cache
        return p * (grad - (grad * p).sum(axis=-1, keepdims=True))


class Flatten(Layer):
    kind = "flatten"

    def _resolve(self, input_shape, rng, init):
        return (int(np.prod(input_shape)),)

    def forward(self, x, train_mode=False):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._cache)


class BatchNorm(Layer):
    """Batch normalization over the channel (last) axis.

    The default epsilon is tiny so that folding an identity-parameter BN into
    the preceding layer leaves its weights unchanged to within 1e-12.
    """

    kind = "batchnorm"

    def __init__(self, momentum=0.9, eps=1e-12):
        super().__init__()
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.gamma = None
        self.beta = None
        self.moving_mean = None
        self.moving_var = None

    def _resolve(self, input_shape, rng, init):
        c = input_shape[-1]
        if self.gamma is None:
            self.gamma = np.ones(c)
            self.beta = np.zeros(c)
            self.moving_mean = np.zeros(c)
            self.moving_var = np.ones(c)
        return input_shape

    def param_arrays(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def state_arrays(self):
        return {"moving_mean": self.moving_mean, "moving_var": self.moving_var}

    def forward(self, x, train_mode=False):
        axes = tuple(range(x.ndim - 1))
        if train_mode:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.moving_mean *= self.momentum
            self.moving_mean += (1 - self.momentum) * mean
            self.moving_var *= self.momentum
            self.moving_var += (1 - self.momentum) * var
        else:
            mean, var = self.moving_mean, self.moving_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv
        self._cache = (xhat, inv, axes, x.shape)
        return self.gamma * xhat + self.beta

    def backward(self, grad):
        xhat, inv, axes, shape = self._cache
        m = np.prod([shape[a] for a in axes])
        self.grads = {"gamma": (grad * xhat).sum(axis=axes), "beta": grad.sum(axis=axes)}
        gx = self.gamma * inv / m * (
            m * grad
            - grad.sum(axis=axes, keepdims=True)
            - xhat * (grad * xhat).sum(axis=axes, keepdims=True)
        )
        return gx

    def config(self):
        return {"kind": self.kind, "momentum": self.momentum, "eps": self.eps}


class Dropout(Layer):
    """Inverted dropout; identity at inference."""

    kind = "dropout"

    def __init__(self, rate):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)
        self._rng = None

    def _resolve(self, input_shape, rng, init):
        self._rng = np.random.default_rng(rng.integers(2**63))
        return input_shape

    def forward(self, x, train_mode=False):
        if not train_mode or self.rate == 0.0:
            self._cache = None
            return x
        keep = self._rng.random(x.shape) >= self.rate
        self._cache = keep / (1.0 - self.rate)
        return x * self._cache

    def backward(self, grad):
        return grad if self._cache is None else grad * self._cache

    def config(self):
        return {"kind": self.kind, "rate": self.rate}


LAYER_KINDS = {
    cls.kind: cls
    for cls in (
        Dense, Conv2D, MaxPool2D, AvgPool2D, PolyAct, SquareAct,
        ReLU, Sigmoid, Softmax, Flatten, BatchNorm, Dropout,
    )
}

ACTIVATION_KINDS = ("relu", "sigmoid")
PARAMETERIZED_KINDS = ("dense", "conv2d")
HE_FRIENDLY_KINDS = ("dense", "conv2d", "avgpool2d", "polyact", "squareact", "flatten")


def layer_from_config(cfg):
    kind = cfg.get("kind")
    if kind not in LAYER_KINDS:
        raise ValueError(f"unknown layer kind {kind!r}")
    cls = LAYER_KINDS[kind]
    kwargs = {k: v for k, v in cfg.items() if k != "kind"}
    if kind in ("conv2d", "maxpool2d", "avgpool2d"):
        for key in ("kernel", "stride", "window"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
    return cls(**kwargs)


def layer_forward(layer, x):
    """Run one built layer in inference mode with shape validation.

    Accepts a single instance (shape == layer.input_shape) or a batch with a
    leading axis. A trailing channel axis of size 1 may be omitted for image
    layers; the result is squeezed to match.
    """
    x = np.asarray(x, dtype=float)
    shape = layer.input_shape
    squeeze_channel = False
    if shape is None:
        raise ValueError("layer is not built; no declared input shape")
    if len(shape) == 3 and shape[-1] == 1 and x.shape[-2:] == tuple(shape[:-1])[-2:]:
        if x.shape == tuple(shape[:-1]) or (x.ndim == 3 and x.shape[1:] == tuple(shape[:-1])):
            x = x[..., None]
            squeeze_channel = True
    if x.shape == tuple(shape):
        out = layer.forward(x[None])[0]
    elif x.shape[1:] == tuple(shape):
        out = layer.forward(x)
    else:
        raise ShapeError(None, shape, x.shape)
    return out[..., 0] if squeeze_channel and out.shape[-1] == 1 else out
