"""Layer library: 2D/3D convolution, the mixed 2D/3D block, batch
normalization (standard and sequence-wise), LSTM, BiLSTM, fully connected,
and global average pooling.

Video activations are laid out ``[B, T, C, H, W]`` throughout; sequence
features are ``[B, T, D]``.  Weights are float64 and initialized uniformly
in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``, biases at zero (LSTM forget gate
at +1).
"""
from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, _node, concat, permute_time, stack, take_per_row

__all__ = [
    "Conv2DLayer",
    "Conv3DLayer",
    "MiCTBlock",
    "BatchNorm",
    "SeqBatchNorm",
    "LSTMLayer",
    "BiLSTMLayer",
    "Linear",
    "global_avg_pool",
    "uniform_init",
]


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _pad_amounts(size: int, kernel: int, stride: int, padding: str):
    if padding == "valid":
        return 0, 0, (size - kernel) // stride + 1
    out = -(-size // stride)  # ceil division
    total = max((out - 1) * stride + kernel - size, 0)
    lo = total // 2
    return lo, total - lo, out


def _window_indices(padded_dims, kernel_dims, strides):
    """Flat gather indices [P, Q] over a flattened N-d volume.

    P enumerates output positions in row-major order, Q the kernel taps
    (row-major over kernel dims, matching a reshaped kernel).
    """
    out_dims = [(d - k) // s + 1 for d, k, s in zip(padded_dims, kernel_dims, strides)]
    starts = np.meshgrid(*[np.arange(o) * s for o, s in zip(out_dims, strides)], indexing="ij")
    base = np.ravel_multi_index([g.reshape(-1) for g in starts], padded_dims)
    taps = np.meshgrid(*[np.arange(k) for k in kernel_dims], indexing="ij")
    offs = np.ravel_multi_index([g.reshape(-1) for g in taps], padded_dims)
    return out_dims, base, offs


def _conv_nd(x: Tensor, kernel: Tensor, bias: Tensor, strides, padding: str) -> Tensor:
    """Shared n-dimensional convolution: ``x`` [N, C, *dims] -> [N, K, *out_dims].

    Implemented as an indexed window gather followed by one matmul; the
    backward pass scatter-adds per kernel tap, which keeps every update
    collision-free and vectorized.
    """
    n, c = x.data.shape[:2]
    dims = x.data.shape[2:]
    k_out = kernel.data.shape[0]
    k_dims = kernel.data.shape[2:]
    pads = [_pad_amounts(d, k, s, padding) for d, k, s in zip(dims, k_dims, strides)]
    pad_width = [(0, 0), (0, 0)] + [(lo, hi) for lo, hi, _ in pads]
    xp = np.pad(x.data, pad_width)
    padded_dims = xp.shape[2:]
    out_dims, base, offs = _window_indices(padded_dims, k_dims, strides)
    idx = base[:, None] + offs[None, :]  # [P, Q]
    p, q = idx.shape

    xp_flat = xp.reshape(n, c, -1)
    cols = xp_flat[:, :, idx]                      # [N, C, P, Q]
    cols2 = cols.transpose(0, 2, 1, 3).reshape(n * p, c * q)
    w_mat = kernel.data.reshape(k_out, c * q).T    # [C*Q, K]
    out = cols2 @ w_mat + bias.data
    out = out.reshape(n, p, k_out)
    out = np.moveaxis(out, 2, 1).reshape(n, k_out, *out_dims)

    def backward(g):
        g_mat = np.moveaxis(g.reshape(n, k_out, p), 1, 2).reshape(n * p, k_out)
        if kernel.requires_grad:
            gw = (cols2.T @ g_mat).T.reshape(kernel.data.shape)
            kernel._accumulate(gw)
        if bias.requires_grad:
            bias._accumulate(g_mat.sum(axis=0))
        if x.requires_grad:
            g_cols = (g_mat @ w_mat.T).reshape(n, p, c, q).transpose(0, 2, 1, 3)
            gxp_flat = np.zeros((n, c, xp_flat.shape[2]))
            for tap in range(q):
                gxp_flat[:, :, idx[:, tap]] += g_cols[:, :, :, tap]
            gxp = gxp_flat.reshape(xp.shape)
            trim = tuple([slice(None), slice(None)]
                         + [slice(lo, lo + d) for (lo, _, _), d in zip(pads, dims)])
            x._accumulate(gxp[trim])

    return _node(out, (x, kernel, bias), backward)


class Conv2DLayer:
    """Per-sample per-frame spatial convolution over [B, T, C, H, W]."""

    def __init__(self, rng, in_channels, out_channels, kernel_size=3, stride=1,
                 padding="same"):
        if padding == "same" and kernel_size % 2 == 0:
            raise ShapeError("'same' padding requires an odd spatial kernel")
        self.in_channels = in_channels
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        self.kernel = uniform_init(rng, (out_channels, in_channels, kernel_size, kernel_size),
                                   fan_in)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        b, t, c = x.data.shape[:3]
        if c != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} input channels, got {c}")
        flat = x.reshape(b * t, *x.data.shape[2:])
        out = _conv_nd(flat, self.kernel, self.bias, (self.stride, self.stride), self.padding)
        return out.reshape(b, t, *out.data.shape[1:])

    def params(self):
        return {"kernel": self.kernel, "bias": self.bias}

    def buffers(self):
        return {}


class Conv3DLayer:
    """Spatio-temporal convolution over [B, T, C, H, W].

    The temporal stride is fixed at 1 and the temporal axis is zero-padded
    so the output sequence length always equals the input length.
    """

    def __init__(self, rng, in_channels, out_channels, kernel_size=3, temporal_size=3,
                 stride=1, padding="same"):
        if padding == "same" and kernel_size % 2 == 0:
            raise ShapeError("'same' padding requires an odd spatial kernel")
        if temporal_size % 2 == 0:
            raise ShapeError("temporal kernel extent must be odd")
        self.in_channels = in_channels
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * temporal_size * kernel_size * kernel_size
        self.kernel = uniform_init(
            rng, (out_channels, in_channels, temporal_size, kernel_size, kernel_size), fan_in)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        c = x.data.shape[2]
        if c != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} input channels, got {c}")
        xt = x.transpose((0, 2, 1, 3, 4))  # [B, C, T, H, W]
        out = _conv_nd_mixed_padding(xt, self.kernel, self.bias,
                                     (1, self.stride, self.stride), self.padding)
        return out.transpose((0, 2, 1, 3, 4))

    def params(self):
        return {"kernel": self.kernel, "bias": self.bias}

    def buffers(self):
        return {}


def _conv_nd_mixed_padding(x, kernel, bias, strides, spatial_padding):
    # temporal axis always 'same'; spatial axes follow the layer setting
    if spatial_padding == "same":
        return _conv_nd(x, kernel, bias, strides, "same")
    kt = kernel.data.shape[2]
    lo = (kt - 1) // 2
    padded = _pad_time(x, lo, kt - 1 - lo)
    return _conv_nd(padded, kernel, bias, strides, "valid")


def _pad_time(x: Tensor, lo: int, hi: int) -> Tensor:
    pad_width = [(0, 0), (0, 0), (lo, hi)] + [(0, 0)] * (x.data.ndim - 3)
    data = np.pad(x.data, pad_width)
    def backward(g):
        sl = tuple([slice(None), slice(None), slice(lo, lo + x.data.shape[2])]
                   + [slice(None)] * (x.data.ndim - 3))
        x._accumulate(g[sl])
    return _node(data, (x,), backward)


class BatchNorm:
    """Per-channel batch normalization for [B, T, C, H, W] activations.

    With a [B, T] mask, training statistics pool only the valid frames so
    that temporal padding cannot skew them.
    """

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.eps = eps
        self.momentum = momentum
        self.training = True

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        axes = (0, 1, 3, 4)
        shape = (1, 1, -1, 1, 1)
        if self.training:
            if mask is None:
                count = x.data.size // x.data.shape[2]
                mu = x.mean(axis=axes, keepdims=True)
                centered = x - mu
                var = (centered * centered).mean(axis=axes, keepdims=True)
            else:
                count = int(mask.sum()) * x.data.shape[3] * x.data.shape[4]
                if count == 0:
                    raise ShapeError("batch norm saw zero valid frames")
                m = Tensor(mask[:, :, None, None, None].astype(np.float64))
                mu = (x * m).sum(axis=axes, keepdims=True) * (1.0 / count)
                centered = x - mu
                var = (centered * centered * m).sum(axis=axes, keepdims=True) * (1.0 / count)
            correction = count / max(count - 1, 1)
            mom = self.momentum
            self.running_mean *= 1 - mom
            self.running_mean += mom * mu.data.reshape(-1)
            self.running_var *= 1 - mom
            self.running_var += mom * correction * var.data.reshape(-1)
            xhat = centered / (var + self.eps).sqrt()
        else:
            xhat = (x - self.running_mean.reshape(shape)) / np.sqrt(
                self.running_var.reshape(shape) + self.eps)
        return xhat * self.gamma.reshape(shape) + self.beta.reshape(shape)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def set_buffers(self, values):
        self.running_mean = values["running_mean"].copy()
        self.running_var = values["running_var"].copy()


class SeqBatchNorm:
    """Sequence-wise batch normalization for [B, T, D] features.

    Training statistics pool the batch and the *valid* time steps of every
    sample (padding excluded via the mask); evaluation applies the running
    affine map.
    """

    def __init__(self, features, eps=1e-5, momentum=0.1):
        self.gamma = Tensor(np.ones(features), requires_grad=True)
        self.beta = Tensor(np.zeros(features), requires_grad=True)
        self.running_mean = np.zeros(features)
        self.running_var = np.ones(features)
        self.eps = eps
        self.momentum = momentum
        self.training = True

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        if self.training:
            if mask is None:
                mask = np.ones(x.data.shape[:2], dtype=bool)
            count = int(mask.sum())
            if count == 0:
                raise ShapeError("sequence batch norm saw zero valid steps")
            m = Tensor(mask[:, :, None].astype(np.float64))
            mu = (x * m).sum(axis=(0, 1), keepdims=True) * (1.0 / count)
            centered = x - mu
            var = (centered * centered * m).sum(axis=(0, 1), keepdims=True) * (1.0 / count)
            mom = self.momentum
            correction = count / max(count - 1, 1)
            self.running_mean *= 1 - mom
            self.running_mean += mom * mu.data.reshape(-1)
            self.running_var *= 1 - mom
            self.running_var += mom * correction * var.data.reshape(-1)
            xhat = centered / (var + self.eps).sqrt()
        else:
            xhat = (x - self.running_mean[None, None, :]) / np.sqrt(
                self.running_var[None, None, :] + self.eps)
        return xhat * self.gamma.reshape(1, 1, -1) + self.beta.reshape(1, 1, -1)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def set_buffers(self, values):
        self.running_mean = values["running_mean"].copy()
        self.running_var = values["running_var"].copy()


class MiCTBlock:
    """A 2D-convolution branch and a 3D-convolution branch merged by
    element-wise summation, letting the 3D path learn residual temporal
    features on top of the per-frame ones.
    """

    def __init__(self, rng, in_channels, out_channels, stride=1, kernel_size=3,
                 temporal_size=3, use_3d=True):
        self.conv2d = Conv2DLayer(rng, in_channels, out_channels, kernel_size, stride)
        self.bn2d = BatchNorm(out_channels)
        self.use_3d = use_3d
        if use_3d:
            self.conv3d = Conv3DLayer(rng, in_channels, out_channels, kernel_size,
                                      temporal_size, stride)
            self.bn3d = BatchNorm(out_channels)
        self.bn_out = BatchNorm(out_channels)

    def branch2d(self, x: Tensor, mask=None) -> Tensor:
        return self.bn2d(self.conv2d(x), mask=mask).relu()

    def branch3d(self, x: Tensor, mask=None) -> Tensor:
        return self.bn3d(self.conv3d(x), mask=mask).relu()

    def merged(self, x: Tensor, mask=None) -> Tensor:
        """Cross-domain element-wise sum of the two branches."""
        if not self.use_3d:
            return self.branch2d(x, mask=mask)
        return self.branch3d(x, mask=mask) + self.branch2d(x, mask=mask)

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        return self.bn_out(self.merged(x, mask=mask), mask=mask).relu()

    def params(self):
        out = {f"conv2d.{k}": v for k, v in self.conv2d.params().items()}
        out.update({f"bn2d.{k}": v for k, v in self.bn2d.params().items()})
        if self.use_3d:
            out.update({f"conv3d.{k}": v for k, v in self.conv3d.params().items()})
            out.update({f"bn3d.{k}": v for k, v in self.bn3d.params().items()})
        out.update({f"bn_out.{k}": v for k, v in self.bn_out.params().items()})
        return out

    def buffers(self):
        out = {f"bn2d.{k}": v for k, v in self.bn2d.buffers().items()}
        if self.use_3d:
            out.update({f"bn3d.{k}": v for k, v in self.bn3d.buffers().items()})
        out.update({f"bn_out.{k}": v for k, v in self.bn_out.buffers().items()})
        return out

    def set_buffers(self, values):
        norms = {"bn2d": self.bn2d, "bn_out": self.bn_out}
        if self.use_3d:
            norms["bn3d"] = self.bn3d
        for prefix, bn in norms.items():
            bn.set_buffers({k.split(".", 1)[1]: v for k, v in values.items()
                            if k.startswith(prefix + ".")})


class Linear:
    def __init__(self, rng, in_features, out_features):
        self.in_features = in_features
        self.weight = uniform_init(rng, (in_features, out_features), in_features)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.data.shape[:-1]
        flat = x.reshape(-1, x.data.shape[-1]) if x.data.ndim != 2 else x
        out = flat @ self.weight + self.bias
        if x.data.ndim != 2:
            out = out.reshape(*lead, -1)
        return out

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def buffers(self):
        return {}


class LSTMLayer:
    """Single-direction LSTM; gate order (input, forget, candidate, output)."""

    def __init__(self, rng, input_size, hidden_size, forget_bias=1.0):
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.w_ih = uniform_init(rng, (input_size, 4 * hidden_size), input_size)
        self.w_hh = uniform_init(rng, (hidden_size, 4 * hidden_size), hidden_size)
        b = np.zeros(4 * hidden_size)
        b[hidden_size:2 * hidden_size] = forget_bias
        self.bias = Tensor(b, requires_grad=True)

    def __call__(self, seq: Tensor, lengths: np.ndarray | None = None, init_state=None):
        """Run the recurrence over [B, T, D].

        Returns (outputs [B, T, H], last_hidden [B, H]) where last_hidden is
        taken at each sample's final valid step, making it invariant to any
        padding appended beyond that step.
        """
        b, t, d = seq.data.shape
        if d != self.input_size:
            raise ShapeError(f"expected input size {self.input_size}, got {d}")
        hs = self.hidden_size
        if init_state is None:
            h = Tensor(np.zeros((b, hs)))
            c = Tensor(np.zeros((b, hs)))
        else:
            h, c = init_state
        outputs = []
        for step in range(t):
            x_t = seq[:, step, :]
            gates = x_t @ self.w_ih + h @ self.w_hh + self.bias
            i = gates[:, :hs].sigmoid()
            f = gates[:, hs:2 * hs].sigmoid()
            g = gates[:, 2 * hs:3 * hs].tanh()
            o = gates[:, 3 * hs:].sigmoid()
            c = f * c + i * g
            h = o * c.tanh()
            outputs.append(h)
        out = stack(outputs, axis=1)
        if lengths is None:
            last = outputs[-1]
        else:
            last = take_per_row(out, np.asarray(lengths) - 1)
        return out, last

    def params(self):
        return {"w_ih": self.w_ih, "w_hh": self.w_hh, "bias": self.bias}

    def buffers(self):
        return {}


def reversal_permutation(batch: int, steps: int, lengths: np.ndarray | None) -> np.ndarray:
    """Per-sample time reversal of the valid prefix; padding stays in place."""
    perm = np.tile(np.arange(steps), (batch, 1))
    if lengths is None:
        return perm[:, ::-1].copy()
    for row, n in enumerate(np.asarray(lengths)):
        perm[row, :n] = np.arange(n - 1, -1, -1)
    return perm


class BiLSTMLayer:
    """Two independent LSTMs over opposite directions, concatenated per step."""

    def __init__(self, rng, input_size, hidden_size, forget_bias=1.0):
        self.forward = LSTMLayer(rng, input_size, hidden_size, forget_bias)
        self.backward = LSTMLayer(rng, input_size, hidden_size, forget_bias)
        self.hidden_size = hidden_size

    def __call__(self, seq: Tensor, lengths: np.ndarray | None = None) -> Tensor:
        b, t, _ = seq.data.shape
        out_f, _ = self.forward(seq, lengths)
        perm = reversal_permutation(b, t, lengths)
        rev_in = permute_time(seq, perm)
        out_b_rev, _ = self.backward(rev_in, lengths)
        out_b = permute_time(out_b_rev, perm)
        return concat([out_f, out_b], axis=2)

    def params(self):
        out = {f"fwd.{k}": v for k, v in self.forward.params().items()}
        out.update({f"bwd.{k}": v for k, v in self.backward.params().items()})
        return out

    def buffers(self):
        return {}


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: [B, T, K, H, W] -> [B, T, K]."""
    return x.mean(axis=(3, 4))
