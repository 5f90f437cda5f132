"""Gaussian derivative filter bank.

Kernels are sampled at integer tap positions.  A 2D kernel is always the
separable product ``G^a(x) G^b(y)`` and keeps its 1D factors so that the
network can correlate with it as two 1D passes.

Array convention: ``taps[iy, ix]`` with ``y = iy - radius`` (rows) and
``x = ix - radius`` (columns); ``order_x`` differentiates along columns.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

MAX_ORDER = 4
MAX_HERMITE = 8
DEFAULT_TRUNCATION = 4.0


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def hermite_eval(m: int, x):
    """Physicists' Hermite polynomial ``H_m(x)`` by three-term recurrence."""
    if not isinstance(m, (int, np.integer)) or m < 0 or m > MAX_HERMITE:
        raise ValueError(f"Hermite order must be an integer in [0, {MAX_HERMITE}], got {m!r}")
    x = np.asarray(x, dtype=np.float64)
    h_prev = np.ones_like(x)
    if m == 0:
        return h_prev if h_prev.ndim else float(h_prev)
    h = 2.0 * x
    for k in range(1, m):
        h_prev, h = h, 2.0 * x * h - 2.0 * k * h_prev
    return h if h.ndim else float(h)


def gaussian(x, sigma: float):
    """Continuous unit-mass Gaussian density."""
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-0.5 * (x / sigma) ** 2) / (sigma * math.sqrt(2.0 * math.pi))


def gaussian_derivative(m: int, x, sigma: float):
    """Continuous m-th derivative of the Gaussian, via the Hermite form."""
    u = np.asarray(x, dtype=np.float64) / (sigma * math.sqrt(2.0))
    scale = (-1.0) ** m / (sigma * math.sqrt(2.0)) ** m
    return scale * hermite_eval(m, u) * gaussian(x, sigma)


def default_radius(sigma: float, truncation: float = DEFAULT_TRUNCATION) -> int:
    return max(1, int(math.ceil(truncation * sigma)))


@dataclass(frozen=True)
class Kernel1D:
    order: int
    sigma: float
    radius: int
    taps: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "taps", _frozen(self.taps))
        if self.taps.shape != (2 * self.radius + 1,):
            raise ValueError(f"expected {2 * self.radius + 1} taps, got {self.taps.shape}")

    @property
    def positions(self) -> np.ndarray:
        return np.arange(-self.radius, self.radius + 1, dtype=np.float64)


@dataclass(frozen=True)
class Kernel2D:
    """Separable 2D kernel. ``factors = (ky, kx, gain)`` with ``taps = gain * outer(ky, kx)``."""

    order_x: int
    order_y: int
    sigma: float
    taps: np.ndarray
    l2_normalized: bool = False
    factors: tuple | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "taps", _frozen(self.taps))
        h, w = self.taps.shape
        if h != w or h % 2 != 1:
            raise ValueError(f"kernel taps must be square with odd side, got {self.taps.shape}")
        if self.factors is not None:
            ky, kx, gain = self.factors
            object.__setattr__(self, "factors", (_frozen(ky), _frozen(kx), float(gain)))

    @property
    def radius(self) -> int:
        return self.taps.shape[0] // 2

    @property
    def order(self) -> int:
        return self.order_x + self.order_y

    def flipped(self) -> "Kernel2D":
        """180 degree rotation of the taps."""
        factors = None
        if self.factors is not None:
            ky, kx, gain = self.factors
            factors = (ky[::-1], kx[::-1], gain)
        return Kernel2D(self.order_x, self.order_y, self.sigma, self.taps[::-1, ::-1],
                        self.l2_normalized, factors)


def gauss_1d(sigma: float, radius: int | None = None) -> Kernel1D:
    """Sampled Gaussian, normalized to unit sum."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma!r}")
    if radius is None:
        radius = default_radius(sigma)
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return Kernel1D(0, float(sigma), radius, g / g.sum())


def gauss_deriv_1d(m: int, sigma: float, radius: int | None = None) -> Kernel1D:
    """Sampled m-th order Gaussian derivative.

    Hermite polynomial times the discrete Gaussian envelope, scaled by
    ``(-1)^m / (sigma*sqrt(2))^m`` so the taps approximate the true
    derivative: convolving the unit ramp with the first-order kernel gives 1.

    Truncation and sampling perturb the low moments slightly, so orders >= 1
    receive a small correction (envelope times an even/odd polynomial, which
    keeps the parity) making the kernel differentiate polynomials of degree
    <= 4 exactly relative to the discrete zero-order kernel.
    """
    if not isinstance(m, (int, np.integer)) or not 0 <= m <= MAX_ORDER:
        raise ValueError(f"derivative order must be in [0, {MAX_ORDER}], got {m!r}")
    env = gauss_1d(sigma, radius)
    if m == 0:
        return env
    g = env.taps
    k = env.positions
    u = k / (sigma * math.sqrt(2.0))
    taps = (-1.0) ** m / (sigma * math.sqrt(2.0)) ** m * hermite_eval(m, u) * g
    return Kernel1D(m, float(sigma), env.radius, _match_moments(taps, m, g, k, sigma))


def _match_moments(taps, m, g, k, sigma):
    # convolution moments nu_j = sum taps(k) (-k)^j must equal j!/(j-m)! mu_{j-m},
    # mu being the moments of the zero-order kernel g
    js = [j for j in range(MAX_ORDER + 1) if j % 2 == m % 2]
    mu = [np.sum(g * (-k) ** i) for i in range(MAX_ORDER + 1)]
    target = np.array([0.0 if j < m else math.factorial(j) / math.factorial(j - m) * mu[j - m]
                       for j in js])
    current = np.array([np.sum(taps * (-k) ** j) for j in js])
    funcs = np.stack([g * (k / sigma) ** i for i in js], axis=1)
    lhs = np.stack([(-k) ** j for j in js]) @ funcs
    coef = np.linalg.lstsq(lhs, target - current, rcond=None)[0]
    return taps + funcs @ coef


def kernel_2d(order_x: int, order_y: int, sigma: float, radius: int | None = None,
              normalize: bool = False) -> Kernel2D:
    ky = gauss_deriv_1d(order_y, sigma, radius).taps
    kx = gauss_deriv_1d(order_x, sigma, radius).taps
    gain = 1.0
    if normalize:
        gain = 1.0 / (np.linalg.norm(ky) * np.linalg.norm(kx))
    taps = np.outer(ky, kx)
    if normalize:
        taps = taps * gain
    return Kernel2D(order_x, order_y, float(sigma), taps, normalize, (ky, kx, gain))


@dataclass(frozen=True)
class BasisSpec:
    max_order: int = 3
    scales: tuple = (1.0,)
    truncation_factor: float = DEFAULT_TRUNCATION
    normalize: bool = True

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        if not 0 <= self.max_order <= MAX_ORDER:
            raise ValueError(f"max_order must be in [0, {MAX_ORDER}], got {self.max_order}")
        if not self.scales:
            raise ValueError("at least one scale is required")
        if any(s <= 0 for s in self.scales):
            raise ValueError(f"scales must be positive: {self.scales}")
        if any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise ValueError(f"scales must be strictly increasing: {self.scales}")
        if not self.truncation_factor > 0:
            raise ValueError("truncation_factor must be positive")

    def radius(self, sigma: float) -> int:
        return default_radius(sigma, self.truncation_factor)


def _orders(max_order: int, include_zero: bool):
    for total in range(0 if include_zero else 1, max_order + 1):
        for oy in range(total + 1):
            yield total - oy, oy


@dataclass(frozen=True)
class FilterBasis:
    spec: BasisSpec
    kernels: tuple
    index: dict = field(compare=False, repr=False)

    def __len__(self):
        return len(self.kernels)

    def __iter__(self):
        return iter(self.kernels)

    def __getitem__(self, i):
        return self.kernels[i]

    @property
    def scales(self):
        return tuple(sorted({k.sigma for k in self.kernels}))

    def kernel(self, order_x: int, order_y: int, sigma: float | None = None) -> Kernel2D:
        if sigma is None:
            hits = [k for k in self.kernels if (k.order_x, k.order_y) == (order_x, order_y)]
            if not hits:
                raise KeyError((order_x, order_y))
            return hits[0]
        return self.kernels[self.index[(order_x, order_y, float(sigma))]]

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k in self.kernels:
            h.update(np.ascontiguousarray(k.taps).tobytes())
        return h.hexdigest()


def basis_2d(spec: BasisSpec, layer_scales=None) -> FilterBasis:
    """All separable kernels ``G^a(x) G^b(y)``, ``a + b <= M``, for one layer.

    Derivative kernels appear at every layer scale; the zero-order kernel only
    at the smallest.  Order: ascending scale, total order, then order_y.
    """
    scales = spec.scales if layer_scales is None else tuple(float(s) for s in layer_scales)
    if not scales:
        raise ValueError("layer needs at least one scale")
    unknown = set(scales) - set(spec.scales)
    if unknown:
        raise ValueError(f"layer scales {sorted(unknown)} not present in spec {spec.scales}")
    scales = tuple(sorted(scales))
    kernels = []
    for s_idx, sigma in enumerate(scales):
        r = spec.radius(sigma)
        for ox, oy in _orders(spec.max_order, include_zero=(s_idx == 0)):
            kernels.append(kernel_2d(ox, oy, sigma, r, spec.normalize))
    index = {(k.order_x, k.order_y, k.sigma): i for i, k in enumerate(kernels)}
    return FilterBasis(spec, tuple(kernels), index)


def basis_count(max_order: int, scales_per_layer) -> int:
    """Number of 2D basis filters over a network whose layers use the given scale counts."""
    per_scale = (max_order + 1) * (max_order + 2) // 2 - 1
    return sum(per_scale * s + 1 for s in scales_per_layer)


def layer_scale_schedule(scales, n_layers: int, multiscale: bool = True):
    """Per-layer scale lists; each subsequent layer drops the lowest scale."""
    scales = tuple(float(s) for s in scales)
    if not multiscale:
        return [scales[:1]] * n_layers
    out = []
    for layer in range(n_layers):
        out.append(scales[min(layer, len(scales) - 1):])
    return out


def dilate(kernel: Kernel2D, n: float) -> Kernel2D:
    """Blur ``kernel`` with a zero-order Gaussian of scale ``n``.

    The support grows by the blur radius; the result's sigma is
    ``sqrt(sigma**2 + n**2)``.  The output is never flagged as L2-normalized.
    """
    if n < 0:
        raise ValueError(f"dilation scale must be non-negative, got {n}")
    if n == 0:
        return kernel
    g = gauss_1d(n).taps
    sigma = math.hypot(kernel.sigma, n)
    if kernel.factors is not None:
        ky, kx, gain = kernel.factors
        ky, kx = np.convolve(ky, g), np.convolve(kx, g)
        return Kernel2D(kernel.order_x, kernel.order_y, sigma, gain * np.outer(ky, kx),
                        False, (ky, kx, gain))
    from scipy.signal import convolve2d

    return Kernel2D(kernel.order_x, kernel.order_y, sigma,
                    convolve2d(kernel.taps, np.outer(g, g)), False)


def _cos_sin(theta: float):
    # exact values at multiples of pi/2 so axis-aligned steering selects taps
    q = theta / (math.pi / 2)
    k = round(q)
    if abs(q - k) <= 4 * np.finfo(float).eps * max(1.0, abs(q)):
        return ((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0))[k % 4]
    return math.cos(theta), math.sin(theta)


def steer_second_order(theta: float):
    """Coefficients over ``(G^xx, G^xy, G^yy)`` for the second derivative at angle theta."""
    c, s = _cos_sin(theta)
    return (c * c, -2.0 * c * s, s * s)


def steer_third_order(theta: float):
    """Coefficients over ``(G^xxx, G^xxy, G^xyy, G^yyy)``."""
    c, s = _cos_sin(theta)
    return (c ** 3, -3.0 * c * c * s, 3.0 * c * s * s, -(s ** 3))


STEERING = {2: steer_second_order, 3: steer_third_order}


def steering_orders(order: int):
    """``(order_x, order_y)`` pairs matching the steering coefficient layout."""
    return [(order - b, b) for b in range(order + 1)]


def combine(kernels, coeffs, order_x: int = 0, order_y: int = 0) -> Kernel2D:
    """Linear combination of same-size kernels.

    A coefficient vector with a single nonzero entry of +-1 selects that
    kernel's taps without arithmetic.
    """
    coeffs = [float(c) for c in coeffs]
    if len(coeffs) != len(kernels):
        raise ValueError("need one coefficient per kernel")
    nonzero = [i for i, c in enumerate(coeffs) if c != 0.0]
    if len(nonzero) == 1 and abs(coeffs[nonzero[0]]) == 1.0:
        k = kernels[nonzero[0]]
        taps = k.taps if coeffs[nonzero[0]] > 0 else -k.taps
    else:
        taps = np.zeros_like(kernels[0].taps)
        for c, k in zip(coeffs, kernels):
            if k.taps.shape != taps.shape:
                raise ValueError("kernels must share a support size")
            taps = taps + c * k.taps
    return Kernel2D(order_x, order_y, kernels[0].sigma, taps, False)


def steer(basis: FilterBasis, order: int, theta: float, sigma: float | None = None):
    """Steered order-2 or order-3 derivative kernel from an unnormalized basis.

    Returns ``(kernel, coefficients)``.
    """
    if order not in STEERING:
        raise ValueError(f"steering is only defined for orders 2 and 3, got {order}")
    if basis.spec.normalize:
        raise ValueError("steering needs an unnormalized basis (per-kernel gains break it)")
    coeffs = STEERING[order](theta)
    kernels = [basis.kernel(ox, oy, sigma) for ox, oy in steering_orders(order)]
    return combine(kernels, coeffs, order, 0), coeffs


def rotated_grid_kernel(order: int, theta: float, sigma: float, radius: int) -> np.ndarray:
    """Analytic ``G^{order,0}`` sampled on the grid rotated so it matches the steering convention."""
    c, s = math.cos(theta), math.sin(theta)
    y, x = np.mgrid[-radius:radius + 1, -radius:radius + 1].astype(np.float64)
    along = c * x - s * y
    across = s * x + c * y
    return gaussian_derivative(order, along, sigma) * gaussian(across, sigma)


@dataclass(frozen=True)
class NJet:
    center: tuple
    sigma: float
    max_order: int
    responses: dict


def njet(image, center, spec: BasisSpec) -> NJet:
    """Gaussian derivative responses up to ``spec.max_order`` at one pixel.

    ``center`` is ``(x, y)``, i.e. column then row.  Responses are values of
    ``G^{a,b} * image`` (convolution), so the first-order response to the
    ramp ``f = x`` is +1.  Kernels are never L2-normalized here.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[0] != 1:
            raise ValueError("njet takes a single-channel image")
        img = img[0]
    if len(spec.scales) != 1:
        raise ValueError("njet needs a single-scale spec")
    sigma = spec.scales[0]
    r = spec.radius(sigma)
    cx, cy = center
    h, w = img.shape
    if not (r <= cx < w - r and r <= cy < h - r):
        raise ValueError(f"center {center} lies within {r} px of the border of a {h}x{w} image")
    # convolution = correlation with the flipped kernel
    patch = img[cy - r:cy + r + 1, cx - r:cx + r + 1][::-1, ::-1]
    responses = {}
    for ox, oy in _orders(spec.max_order, include_zero=True):
        k = kernel_2d(ox, oy, sigma, r, normalize=False)
        responses[(ox, oy)] = float(np.sum(patch * k.taps))
    return NJet((cx, cy), sigma, spec.max_order, responses)


def taylor_reconstruct(jet: NJet, offsets) -> np.ndarray:
    """Evaluate the truncated Taylor series of the smoothed image at ``(dx, dy)`` offsets."""
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 2)
    dx, dy = offsets[:, 0], offsets[:, 1]
    out = np.zeros(len(offsets))
    for (a, b), val in jet.responses.items():
        if a + b > jet.max_order:
            continue
        out += val / (math.factorial(a) * math.factorial(b)) * dx ** a * dy ** b
    return out


# -- RFK1 text format --------------------------------------------------------

def format_kernel(kernel: Kernel2D) -> str:
    r = kernel.radius
    lines = [f"RFK1 {kernel.order_x} {kernel.order_y} {kernel.sigma:.17g} {r} "
             f"{int(kernel.l2_normalized)}"]
    for row in kernel.taps:
        lines.append(" ".join(f"{v:.17g}" for v in row))
    return "\n".join(lines) + "\n"


def write_kernel(path, kernel: Kernel2D) -> None:
    with open(path, "w") as fh:
        fh.write(format_kernel(kernel))


def parse_kernel(text: str) -> Kernel2D:
    lines = text.strip().splitlines()
    head = lines[0].split()
    if len(head) != 6 or head[0] != "RFK1":
        raise ValueError(f"not an RFK1 kernel header: {lines[0]!r}")
    ox, oy, sigma, r, normed = int(head[1]), int(head[2]), float(head[3]), int(head[4]), head[5]
    taps = np.array([[float(v) for v in ln.split()] for ln in lines[1:]])
    if taps.shape != (2 * r + 1, 2 * r + 1):
        raise ValueError(f"expected {2 * r + 1}x{2 * r + 1} taps, got {taps.shape}")
    return Kernel2D(ox, oy, sigma, taps, normed == "1")


def read_kernel(path) -> Kernel2D:
    with open(path) as fh:
        return parse_kernel(fh.read())
