"""Structured receptive field network.

A block is a fixed Gaussian-derivative basis layer followed by a learnable
1x1 recombination.  Nothing nonlinear sits between the two, so the pair is
equivalent to a convolution with the effective filters
``sum_b alpha[j, i, b] * phi_b``, which are never formed during training.

All layers work on ``[N, C, H, W]`` float64 batches and cache what their
backward pass needs; caches belong to the most recent forward call.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor_ops as T
from .scalespace import BasisSpec, FilterBasis, Kernel2D, basis_2d, layer_scale_schedule


class StateError(RuntimeError):
    """Backward called without a matching forward."""


def _as_batch(x, channels=None):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ValueError(f"expected [C,H,W] or [N,C,H,W], got shape {x.shape}")
    if channels is not None and x.shape[1] != channels:
        raise ValueError(f"expected {channels} input channels, got {x.shape[1]}")
    return x, single


class Layer:
    params: tuple = ()

    def param_arrays(self):
        return [getattr(self, name) for name in self.params]

    def grad_arrays(self):
        return [getattr(self, "grad_" + name) for name in self.params]


class BasisLayer(Layer):
    """Correlates every input channel with every basis kernel (no parameters).

    Output channel ``i * B + b`` holds ``zeta[i, b] = correlate(x_i, phi_b)``.
    Separable kernels run as two 1D passes expressed as banded matrix products.
    """

    def __init__(self, basis: FilterBasis, in_channels: int | None = None):
        self.basis = basis
        self.in_channels = in_channels
        self.n_basis = len(basis)
        self.max_radius = max(k.radius for k in basis)
        self.separable = all(k.factors is not None for k in basis)
        self._ops = {}
        self._in_shape = None

    @property
    def out_channels(self):
        return None if self.in_channels is None else self.in_channels * self.n_basis

    def _groups(self):
        # kernels sharing an x-factor share the first pass
        groups = {}
        for b, k in enumerate(self.basis):
            groups.setdefault((k.sigma, k.order_x), []).append(b)
        return list(groups.values())

    def _operators(self, h, w):
        key = (h, w)
        if key in self._ops:
            return self._ops[key]
        groups = self._groups()
        fwd_x, bwd_x, fwd_y, bwd_y = [], [], [], []
        for members in groups:
            k0 = self.basis[members[0]]
            fwd_x.append(T.correlation_matrix(k0.factors[1], w))
            bwd_x.append(T.correlation_matrix(k0.flipped().factors[1], w))
            fy, by = [], []
            for b in members:
                k = self.basis[b]
                gain = k.factors[2]
                fy.append(gain * T.correlation_matrix(k.factors[0], h))
                by.append(gain * T.correlation_matrix(k.flipped().factors[0], h))
            fwd_y.append(np.concatenate(fy, axis=1))  # [H, P*H]
            bwd_y.append(np.concatenate(by, axis=0))  # [P*H, H]
        ops = dict(groups=groups,
                   fwd_x=np.concatenate(fwd_x, axis=1),  # [W, G*W]
                   bwd_x=np.concatenate(bwd_x, axis=0),  # [G*W, W]
                   fwd_y=fwd_y, bwd_y=bwd_y)
        self._ops[key] = ops
        return ops

    def _check(self, x):
        h, w = x.shape[-2:]
        if self.max_radius >= min(h, w):
            raise ValueError(f"basis radius {self.max_radius} does not fit a {h}x{w} input")

    def forward(self, x):
        x, single = _as_batch(x, self.in_channels)
        self._check(x)
        n, c, h, w = x.shape
        self._in_shape = x.shape
        zeta = np.empty((n, c, self.n_basis, h, w))
        if self.separable:
            ops = self._operators(h, w)
            xs = (x @ ops["fwd_x"]).reshape(n, c, h, len(ops["groups"]), w)
            for g, members in enumerate(ops["groups"]):
                xg = np.ascontiguousarray(xs[:, :, :, g, :].transpose(0, 1, 3, 2))
                yg = (xg @ ops["fwd_y"][g]).reshape(n, c, w, len(members), h)
                zeta[:, :, members] = yg.transpose(0, 1, 3, 4, 2)
        else:
            for b, k in enumerate(self.basis):
                zeta[:, :, b] = T.correlate2d(x, k)
        zeta = zeta.reshape(n, c * self.n_basis, h, w)
        return zeta[0] if single else zeta

    def backward(self, grad_zeta, need_input=True):
        """Gradient w.r.t. the input: correlate with the flipped basis kernels and sum."""
        if self._in_shape is None:
            raise StateError("BasisLayer.backward called before forward")
        if not need_input:
            return None
        g, single = _as_batch(grad_zeta)
        n, c, h, w = self._in_shape
        g = g.reshape(n, c, self.n_basis, h, w)
        if self.separable:
            ops = self._operators(h, w)
            per_group = []
            for gi, members in enumerate(ops["groups"]):
                gg = np.ascontiguousarray(g[:, :, members].transpose(0, 1, 4, 2, 3))
                gg = gg.reshape(n, c, w, len(members) * h)
                per_group.append((gg @ ops["bwd_y"][gi]).transpose(0, 1, 3, 2))  # [n,c,h,w]
            stacked = np.concatenate(per_group, axis=-1)  # [n,c,h,G*w]
            grad = stacked @ ops["bwd_x"]
        else:
            grad = np.zeros((n, c, h, w))
            for b, k in enumerate(self.basis):
                grad += T.correlate2d(g[:, :, b], k.flipped())
        return grad[0] if single else grad


class RecombineLayer(Layer):
    """Learnable 1x1 map: ``o_j = sum_{i,b} alpha[j,i,b] * zeta[i,b] + bias_j``."""

    def __init__(self, out_channels, in_channels, n_basis=1, bias=True, rng=None):
        self.out_channels = out_channels
        self.in_channels = in_channels
        self.n_basis = n_basis
        self.use_bias = bias
        fan_in = in_channels * n_basis
        limit = math.sqrt(3.0 / fan_in)
        rng = np.random.default_rng() if rng is None else rng
        self.alpha = rng.uniform(-limit, limit, size=(out_channels, in_channels, n_basis))
        self.bias = np.zeros(out_channels)
        self.grad_alpha = np.zeros_like(self.alpha)
        self.grad_bias = np.zeros_like(self.bias)
        self._zeta = None

    @property
    def params(self):
        return ("alpha", "bias") if self.use_bias else ("alpha",)

    def forward(self, zeta):
        z, single = _as_batch(zeta, self.in_channels * self.n_basis)
        n, cb, h, w = z.shape
        self._zeta = z
        a = self.alpha.reshape(self.out_channels, cb)
        out = (a @ z.reshape(n, cb, h * w)).reshape(n, self.out_channels, h, w)
        if self.use_bias:
            out += self.bias[:, None, None]
        return out[0] if single else out

    def backward(self, upstream, need_input=True):
        """Sets ``grad_alpha``/``grad_bias`` (summed over batch and pixels), returns grad_zeta."""
        if self._zeta is None:
            raise StateError("RecombineLayer.backward called before forward")
        g, single = _as_batch(upstream, self.out_channels)
        z = self._zeta
        n, cb, h, w = z.shape
        gf = g.reshape(n, self.out_channels, h * w)
        zf = z.reshape(n, cb, h * w)
        self.grad_alpha = (gf @ zf.transpose(0, 2, 1)).sum(axis=0).reshape(self.alpha.shape)
        self.grad_bias = gf.sum(axis=(0, 2)) if self.use_bias else np.zeros_like(self.bias)
        if not need_input:
            return None
        a = self.alpha.reshape(self.out_channels, cb)
        grad = (a.T @ gf).reshape(n, cb, h, w)
        return grad[0] if single else grad


class FreeConvLayer(Layer):
    """Plain convolution layer with learnable ``k x k`` kernels (the unstructured baseline).

    Computed as correlation with "same" zero padding, chunked over the batch
    so the patch matrix stays small.
    """

    chunk = 8

    def __init__(self, out_channels, in_channels, ksize, bias=True, rng=None):
        self.out_channels = out_channels
        self.in_channels = in_channels
        self.ksize = ksize
        self.use_bias = bias
        fan_in = in_channels * ksize * ksize
        limit = math.sqrt(3.0 / fan_in)
        rng = np.random.default_rng() if rng is None else rng
        self.weight = rng.uniform(-limit, limit, size=(out_channels, in_channels, ksize, ksize))
        self.bias = np.zeros(out_channels)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._cols = None
        self._in_shape = None

    @property
    def params(self):
        return ("weight", "bias") if self.use_bias else ("weight",)

    def _conv(self, x, wmat, out_channels):
        n, _, h, w = x.shape
        out = np.empty((n, out_channels, h * w))
        for s in range(0, n, self.chunk):
            out[s:s + self.chunk] = wmat @ T.im2col(x[s:s + self.chunk], self.ksize)
        return out.reshape(n, out_channels, h, w)

    def forward(self, x):
        x, single = _as_batch(x, self.in_channels)
        n, _, h, w = x.shape
        if self.ksize // 2 >= min(h, w):
            raise ValueError(f"kernel size {self.ksize} does not fit input {x.shape[-2:]}")
        # the patch matrix is reused by the weight gradient
        self._cols = T.im2col(x, self.ksize)
        out = (self.weight.reshape(self.out_channels, -1) @ self._cols)
        out = out.reshape(n, self.out_channels, h, w)
        if self.use_bias:
            out += self.bias[:, None, None]
        self._in_shape = x.shape
        return out[0] if single else out

    def backward(self, upstream, need_input=True):
        if self._cols is None:
            raise StateError("FreeConvLayer.backward called before forward")
        g, single = _as_batch(upstream, self.out_channels)
        n, _, h, w = self._in_shape
        gf = g.reshape(n, self.out_channels, h * w)
        gw = np.zeros((self.out_channels, self.in_channels * self.ksize ** 2))
        for i in range(n):
            gw += gf[i] @ self._cols[i].T
        self.grad_weight = gw.reshape(self.weight.shape)
        self.grad_bias = gf.sum(axis=(0, 2)) if self.use_bias else np.zeros_like(self.bias)
        if not need_input:
            return None
        # adjoint of same-padded correlation: correlate with flipped, transposed kernels
        wflip = self.weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        grad = self._conv(g, wflip.reshape(self.in_channels, -1), self.in_channels)
        return grad[0] if single else grad


class ReLU(Layer):
    def __init__(self):
        self._x = None

    def forward(self, x):
        out = T.relu(x)
        self._x = out  # positive exactly where the input was
        return out

    def backward(self, upstream, need_input=True):
        if self._x is None:
            raise StateError("ReLU.backward called before forward")
        return T.relu_backward(upstream, self._x)


class MaxPool2x2(Layer):
    def __init__(self):
        self._local = None
        self._shape = None

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if min(x.shape[-2:]) < 2:
            raise ValueError(f"maxpool2x2 needs H, W >= 2, got {x.shape[-2:]}")
        out, self._local = T._pool_local(x)
        self._shape = x.shape
        return out

    def backward(self, upstream, need_input=True):
        if self._local is None:
            raise StateError("MaxPool2x2.backward called before forward")
        return T.unpool_local(upstream, self._local, self._shape)


class GlobalAvgPool(Layer):
    def __init__(self):
        self._shape = None

    def forward(self, x):
        self._shape = np.shape(x)
        return T.global_avg_pool(x)

    def backward(self, upstream, need_input=True):
        if self._shape is None:
            raise StateError("GlobalAvgPool.backward called before forward")
        return T.global_avg_pool_backward(upstream, self._shape)


def basis_forward(layer: BasisLayer, x):
    return layer.forward(x)


def basis_backward(layer: BasisLayer, grad_zeta):
    return layer.backward(grad_zeta)


def recombine_forward(layer: RecombineLayer, zeta):
    return layer.forward(zeta)


def recombine_backward(layer: RecombineLayer, upstream):
    """Returns ``(grad_alpha, grad_bias, grad_zeta)``."""
    grad_zeta = layer.backward(upstream)
    return layer.grad_alpha, layer.grad_bias, grad_zeta


def effective_filter(basis_layer: BasisLayer, recombine: RecombineLayer, j: int, i: int) -> Kernel2D:
    """Explicit kernel ``sum_b alpha[j, i, b] * phi_b`` (diagnostics only).

    Kernels of smaller support are zero-padded to the largest one.
    """
    r = basis_layer.max_radius
    taps = np.zeros((2 * r + 1, 2 * r + 1))
    for b, k in enumerate(basis_layer.basis):
        o = r - k.radius
        taps[o:o + k.taps.shape[0], o:o + k.taps.shape[1]] += recombine.alpha[j, i, b] * k.taps
    sigma = max(k.sigma for k in basis_layer.basis)
    return Kernel2D(0, 0, sigma, taps, False)


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture of an RFNN (``variant="rfnn"``) or its free-filter twin (``"cnn"``).

    Each of ``len(widths)`` blocks is ``basis -> recombine(width) -> relu
    [-> recombine(width) -> relu ...] -> maxpool``; the head is a 1x1
    recombination to ``classes`` maps followed by global average pooling.
    In the ``cnn`` variant the basis and first recombination collapse into
    one learnable convolution with the same support as the basis.
    """

    variant: str = "rfnn"
    in_channels: int = 1
    order: int = 3
    scales: tuple = (1.0,)
    multiscale: bool = False
    widths: tuple = (64, 64, 64)
    recombine_per_block: int = 1
    pool: bool = True
    classes: int = 10
    truncation: float = 4.0
    normalize: bool = True
    bias: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.variant not in ("rfnn", "cnn"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if not self.widths:
            raise ValueError("need at least one block")
        if self.recombine_per_block < 1:
            raise ValueError("recombine_per_block must be >= 1")
        if self.classes < 2:
            raise ValueError("need at least two classes")
        BasisSpec(self.order, self.scales, self.truncation, self.normalize)

    def basis_spec(self) -> BasisSpec:
        return BasisSpec(self.order, self.scales, self.truncation, self.normalize)

    def layer_scales(self):
        return layer_scale_schedule(self.scales, len(self.widths), self.multiscale)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Network:
    def __init__(self, config: NetworkConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        spec = config.basis_spec()
        self.layers = []
        self.basis_layers = []
        channels = config.in_channels
        for width, scales in zip(config.widths, config.layer_scales()):
            basis = basis_2d(spec, scales)
            if config.variant == "rfnn":
                bl = BasisLayer(basis, channels)
                self.basis_layers.append(bl)
                self.layers += [bl, RecombineLayer(width, channels, len(basis), config.bias, rng)]
            else:
                ksize = 2 * max(k.radius for k in basis) + 1
                self.layers.append(FreeConvLayer(width, channels, ksize, config.bias, rng))
            self.layers.append(ReLU())
            for _ in range(config.recombine_per_block - 1):
                self.layers += [RecombineLayer(width, width, 1, config.bias, rng), ReLU()]
            if config.pool:
                self.layers.append(MaxPool2x2())
            channels = width
        self.layers += [RecombineLayer(config.classes, channels, 1, config.bias, rng),
                        GlobalAvgPool()]

    # -- parameters --------------------------------------------------------
    def parameters(self):
        """``(name, array, decays)`` for every learnable array, in declaration order."""
        out = []
        for li, layer in enumerate(self.layers):
            for name in layer.params:
                out.append((f"{li}.{name}", getattr(layer, name), name != "bias"))
        return out

    def gradients(self):
        return [g for layer in self.layers for g in layer.grad_arrays()]

    def param_count(self) -> int:
        return int(sum(p.size for _, p, _ in self.parameters()))

    def basis_checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for bl in self.basis_layers:
            h.update(bl.basis.checksum().encode())
        return h.hexdigest()

    # -- passes ------------------------------------------------------------
    def forward(self, batch):
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected [N,{self.config.in_channels},H,W] batch, got {x.shape}")
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad_logits, need_input=True):
        """Backpropagate ``dE/dlogits``; parameter gradients land on the layers.

        With ``need_input=False`` the first layer skips its input gradient
        and ``None`` is returned.
        """
        g = np.asarray(grad_logits, dtype=np.float64)
        last = len(self.layers) - 1
        for depth, layer in enumerate(reversed(self.layers)):
            g = layer.backward(g, need_input=need_input or depth < last)
        return g

    def loss_and_grad(self, batch, labels, need_input=True):
        """Mean cross-entropy over the batch and the matching (batch-mean) gradients."""
        logits = self.forward(batch)
        loss, grad = T.softmax_xent(logits, labels)
        n = logits.shape[0]
        grad_input = self.backward(grad / n, need_input)
        return float(np.mean(loss)), logits, grad_input

    def shape_chain(self, input_shape):
        """Output shape after every layer for a ``[N, C, H, W]`` input (no data needed)."""
        n, c, h, w = input_shape
        shapes = []
        for layer in self.layers:
            if isinstance(layer, BasisLayer):
                c = c * layer.n_basis
            elif isinstance(layer, (RecombineLayer, FreeConvLayer)):
                c = layer.out_channels
            elif isinstance(layer, MaxPool2x2):
                h, w = -(-h // 2), -(-w // 2)
            elif isinstance(layer, GlobalAvgPool):
                shapes.append((n, c))
                continue
            shapes.append((n, c, h, w))
        return shapes


def network_forward(net: Network, batch):
    return net.forward(batch)


def network_backward(net: Network, grad_logits):
    net.backward(grad_logits)
    return net.gradients()
