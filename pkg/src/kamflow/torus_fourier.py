"""Truncated Fourier series on the torus T^n = [0, 1)^n.

Coefficient tables are stored densely with shape ``(2K+1,)*n + (m,)``; the
entry at index ``k + K`` holds the vector coefficient of e^{2 pi i k.theta}.
Batched helpers accept extra leading axes so that whole time families can be
pushed through the same code paths.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * np.pi


class AliasingError(ValueError):
    """Raised when a collocation grid cannot resolve the requested modes."""


class ShiftTooLargeError(ValueError):
    """Raised when a composition shift leaves the single-chart budget."""


def mode_indices(K: int) -> np.ndarray:
    return np.arange(-K, K + 1)


def wave_vectors(n: int, K: int) -> np.ndarray:
    """All k with |k|_inf <= K, shape (2K+1,)*n + (n,), matching coefficient layout."""
    axes = np.meshgrid(*([mode_indices(K)] * n), indexing="ij")
    return np.stack(axes, axis=-1)


@dataclass(frozen=True)
class CollocationGrid:
    N: int
    n: int = 1

    def __post_init__(self):
        if self.N < 1 or self.n < 1:
            raise ValueError("grid needs N >= 1 and n >= 1")

    @classmethod
    def for_order(cls, K: int, n: int = 1, oversample: bool = True) -> "CollocationGrid":
        """Smallest even grid with N >= 2K+2, or N >= 3K when oversampling for products."""
        N = 2 * K + 2
        if oversample:
            N = max(N, 3 * K)
        N += N % 2
        return cls(N, n)

    def supports(self, K: int) -> bool:
        return self.N >= 2 * K + 2

    def points(self) -> np.ndarray:
        """Nodes theta_j = j/N, shape (N**n, n), C order over the axes."""
        axis = np.arange(self.N) / self.N
        mesh = np.meshgrid(*([axis] * self.n), indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=-1)


class TorusFun:
    """Real R^m-valued trigonometric polynomial on T^n."""

    __slots__ = ("_coeffs",)

    def __init__(self, coeffs):
        c = np.array(coeffs, dtype=complex)
        if c.ndim < 2:
            raise ValueError("coefficient table needs at least one torus axis and a range axis")
        K2 = c.shape[0]
        if K2 % 2 == 0 or any(s != K2 for s in c.shape[:-1]):
            raise ValueError(f"coefficient axes must all have odd length 2K+1, got {c.shape[:-1]}")
        c.setflags(write=False)
        self._coeffs = c

    @property
    def coeffs(self) -> np.ndarray:
        return self._coeffs

    @property
    def n(self) -> int:
        return self._coeffs.ndim - 1

    @property
    def m(self) -> int:
        return self._coeffs.shape[-1]

    @property
    def K(self) -> int:
        return (self._coeffs.shape[0] - 1) // 2

    @classmethod
    def zeros(cls, n: int = 1, m: int = 1, K: int = 0) -> "TorusFun":
        return cls(np.zeros((2 * K + 1,) * n + (m,), dtype=complex))

    @classmethod
    def constant(cls, value, n: int = 1, K: int = 0) -> "TorusFun":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        c = np.zeros((2 * K + 1,) * n + (value.size,), dtype=complex)
        c[(K,) * n] = value
        return cls(c)

    @classmethod
    def from_trig(cls, terms, n: int = 1, K: int | None = None) -> "TorusFun":
        """Scalar function sum_j (a_j cos(2 pi k_j.theta) + b_j sin(2 pi k_j.theta)).

        ``terms`` is an iterable of (k, a, b) with k an integer n-vector.
        """
        terms = [(np.atleast_1d(np.asarray(k, dtype=int)), float(a), float(b)) for k, a, b in terms]
        order = max((int(np.abs(k).max()) for k, _, _ in terms), default=0)
        K = order if K is None else K
        if K < order:
            raise ValueError(f"order K={K} cannot hold mode of size {order}")
        c = np.zeros((2 * K + 1,) * n + (1,), dtype=complex)
        for k, a, b in terms:
            if k.size != n:
                raise ValueError(f"mode {k} does not match torus dimension {n}")
            plus = tuple(k + K)
            minus = tuple(-k + K)
            if not k.any():
                c[plus + (0,)] += a
                continue
            # a cos x + b sin x = (a - ib)/2 e^{ix} + (a + ib)/2 e^{-ix}
            c[plus + (0,)] += 0.5 * (a - 1j * b)
            c[minus + (0,)] += 0.5 * (a + 1j * b)
        return cls(c)

    def resized(self, K: int) -> "TorusFun":
        return TorusFun(resize_coeffs(self._coeffs, K, self.n))

    def component(self, i: int) -> "TorusFun":
        return TorusFun(self._coeffs[..., i : i + 1])

    def __call__(self, theta) -> np.ndarray:
        """Evaluate at points theta of shape (..., n); returns (..., m)."""
        return evaluate_coeffs(self._coeffs, theta, self.n)

    def __add__(self, other: "TorusFun") -> "TorusFun":
        K = max(self.K, other.K)
        return TorusFun(resize_coeffs(self._coeffs, K, self.n) + resize_coeffs(other._coeffs, K, self.n))

    def __sub__(self, other: "TorusFun") -> "TorusFun":
        return self + (-other)

    def __neg__(self) -> "TorusFun":
        return TorusFun(-self._coeffs)

    def __mul__(self, scalar: float) -> "TorusFun":
        return TorusFun(self._coeffs * float(scalar))

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"TorusFun(n={self.n}, m={self.m}, K={self.K})"


def resize_coeffs(coeffs: np.ndarray, K: int, n: int) -> np.ndarray:
    """Truncate or zero-pad the n torus axes (located just before the range axis)."""
    K_old = (coeffs.shape[-2] - 1) // 2
    if K == K_old:
        return coeffs
    lead = coeffs.shape[: coeffs.ndim - n - 1]
    out = np.zeros(lead + (2 * K + 1,) * n + (coeffs.shape[-1],), dtype=complex)
    keep = min(K, K_old)
    src = (Ellipsis,) + (slice(K_old - keep, K_old + keep + 1),) * n + (slice(None),)
    dst = (Ellipsis,) + (slice(K - keep, K + keep + 1),) * n + (slice(None),)
    out[dst] = coeffs[src]
    return out


def evaluate_coeffs(coeffs: np.ndarray, theta, n: int) -> np.ndarray:
    """Direct evaluation of an unbatched coefficient table at arbitrary points."""
    theta = np.asarray(theta, dtype=float)
    if n == 1 and (theta.ndim == 0 or theta.shape[-1] != 1):
        theta = theta[..., None]
    K = (coeffs.shape[0] - 1) // 2
    k = mode_indices(K)
    out = coeffs
    # contract the torus axes one at a time against e^{2 pi i k theta_a}
    pts = theta.reshape(-1, n)
    result = None
    for a in range(n):
        phase = np.exp(1j * TWO_PI * np.outer(pts[:, a], k))  # (P, 2K+1)
        if a == 0:
            result = np.einsum("pk,k...->p...", phase, out)
        else:
            result = np.einsum("pk,pk...->p...", phase, result)
    return result.real.reshape(theta.shape[:-1] + (coeffs.shape[-1],))


def _check_resolution(N: int, K: int) -> None:
    if N < 2 * K + 1:
        raise AliasingError(f"grid with N={N} nodes aliases modes up to K={K}; need N >= {2 * K + 1}")


def _fft_positions(K: int, N: int) -> np.ndarray:
    return mode_indices(K) % N


def synthesize_coeffs(coeffs: np.ndarray, N: int, n: int) -> np.ndarray:
    """Batched synthesis: (..., (2K+1)^n, m) -> (..., N^n, m) real samples, C order."""
    K = (coeffs.shape[-2] - 1) // 2
    _check_resolution(N, K)
    lead = coeffs.shape[: coeffs.ndim - n - 1]
    m = coeffs.shape[-1]
    full = np.zeros(lead + (N,) * n + (m,), dtype=complex)
    idx = np.ix_(*([_fft_positions(K, N)] * n))
    full[(Ellipsis,) + idx + (slice(None),)] = coeffs
    axes = tuple(range(-n - 1, -1))
    values = np.fft.ifftn(full, axes=axes).real * N**n
    return values.reshape(lead + (N**n, m))


def analyze_samples(samples: np.ndarray, K: int, N: int, n: int) -> np.ndarray:
    """Batched analysis: (..., N^n, m) real samples -> (..., (2K+1)^n, m) coefficients."""
    _check_resolution(N, K)
    samples = np.asarray(samples, dtype=float)
    lead = samples.shape[:-2]
    m = samples.shape[-1]
    grid = samples.reshape(lead + (N,) * n + (m,))
    axes = tuple(range(-n - 1, -1))
    spec = np.fft.fftn(grid, axes=axes) / N**n
    idx = np.ix_(*([_fft_positions(K, N)] * n))
    out = spec[(Ellipsis,) + idx + (slice(None),)]
    return symmetrize_coeffs(out, n)


def symmetrize_coeffs(coeffs: np.ndarray, n: int) -> np.ndarray:
    """Project onto the real-valued subspace: c(k) <- (c(k) + conj c(-k))/2."""
    flipped = coeffs[(Ellipsis,) + (slice(None, None, -1),) * n + (slice(None),)]
    return 0.5 * (coeffs + np.conj(flipped))


def conjugate_symmetry_error(f: TorusFun) -> float:
    c = f.coeffs
    flipped = c[(slice(None, None, -1),) * f.n + (slice(None),)]
    return float(np.max(np.abs(c - np.conj(flipped)), initial=0.0))


def synthesize(f: TorusFun, grid: CollocationGrid) -> np.ndarray:
    """Samples of f at the grid nodes, shape (N,)*n + (m,)."""
    if grid.n != f.n:
        raise ValueError(f"grid dimension {grid.n} does not match function dimension {f.n}")
    flat = synthesize_coeffs(f.coeffs, grid.N, f.n)
    return flat.reshape((grid.N,) * f.n + (f.m,))


def analyze(samples, K: int, grid: CollocationGrid) -> TorusFun:
    samples = np.asarray(samples, dtype=float)
    n = grid.n
    if samples.ndim == n:
        samples = samples[..., None]
    flat = samples.reshape((grid.N**n, samples.shape[-1]))
    return TorusFun(analyze_samples(flat, K, grid.N, n))


def derivative_factor(K: int, n: int, axis: int) -> np.ndarray:
    """2 pi i k_axis broadcast over the coefficient layout (without range axis)."""
    k = mode_indices(K)
    shape = [1] * n
    shape[axis] = 2 * K + 1
    return (1j * TWO_PI * k).reshape(shape)


def differentiate_coeffs(coeffs: np.ndarray, n: int, axis: int) -> np.ndarray:
    K = (coeffs.shape[-2] - 1) // 2
    return coeffs * derivative_factor(K, n, axis)[..., None]


def differentiate(f: TorusFun, axis: int = 0) -> TorusFun:
    if not 0 <= axis < f.n:
        raise ValueError(f"axis {axis} outside torus dimension {f.n}")
    return TorusFun(differentiate_coeffs(f.coeffs, f.n, axis))


def multiply(f: TorusFun, g: TorusFun, K: int | None = None) -> TorusFun:
    """Pointwise product (componentwise, or scalar times vector) de-aliased on a 3K grid."""
    K = max(f.K, g.K) if K is None else K
    N = CollocationGrid.for_order(max(K, f.K, g.K), f.n).N
    fs = synthesize_coeffs(f.coeffs, N, f.n)
    gs = synthesize_coeffs(g.coeffs, N, g.n)
    return TorusFun(analyze_samples(fs * gs, K, N, f.n))


def shift_samples_bound(u_coeffs: np.ndarray, N: int, n: int) -> np.ndarray:
    return np.abs(synthesize_coeffs(u_coeffs, N, n)).max(axis=(-2, -1))


def compose_shift(f: TorusFun, u: TorusFun, K: int | None = None) -> TorusFun:
    """Fourier series of theta -> f(theta + u(theta)), truncated to order K."""
    if u.n != f.n or u.m != f.n:
        raise ValueError("shift u must map T^n to R^n")
    K = max(f.K, u.K) if K is None else K
    N = CollocationGrid.for_order(max(K, f.K, u.K), f.n).N
    grid = CollocationGrid(N, f.n)
    shift = synthesize_coeffs(u.coeffs, N, f.n)
    size = float(np.abs(shift).max(initial=0.0))
    if size >= 0.5:
        raise ShiftTooLargeError(f"|u|_C0 = {size:.3g} >= 1/2")
    values = f(grid.points() + shift)
    return TorusFun(analyze_samples(values, K, N, f.n))


def _multi_indices(order: int, n: int):
    return [a for a in itertools.product(range(order + 1), repeat=n) if sum(a) == order]


def _direct_matrix(K: int, N: int) -> np.ndarray:
    # e^{2 pi i k j/N} evaluated with j/N rounded once, so shared nodes match across N
    nodes = np.arange(N) / N
    return np.exp(1j * TWO_PI * np.outer(nodes, mode_indices(K)))


def _direct_samples(coeffs: np.ndarray, N: int, n: int) -> np.ndarray:
    """(..., (2K+1)^n, m) -> (..., N^n, m) by explicit sums (no FFT)."""
    K = (coeffs.shape[-2] - 1) // 2
    E = _direct_matrix(K, N)
    out = coeffs
    for a in range(n):
        # contract torus axis a (always at position -n-1 after previous moves)
        out = np.moveaxis(np.tensordot(out, E, axes=([out.ndim - n - 1], [1])), -1, -2)
    lead = coeffs.shape[: coeffs.ndim - n - 1]
    return out.real.reshape(lead + (N**n, coeffs.shape[-1]))


def holder_parts(coeffs: np.ndarray, sigma: float, N: int, n: int) -> np.ndarray:
    """Batched Hölder surrogate of coefficient tables with shape (..., (2K+1)^n, m).

    For sigma = k + mu the value is the largest of
      - sup over grid nodes of |d^alpha f| for |alpha| <= k,
      - the grid Hölder quotient of order mu for |alpha| = k (when mu > 0),
      - the grid Lipschitz quotients of d^alpha f for |alpha| < k.
    Quotients use axis-aligned node pairs at separations 2^i/N <= 1/2.
    Each term is bounded by the continuum C^sigma norm, so the result is a lower
    bound; it is nondecreasing in sigma and under N -> 2N.
    """
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    K = (coeffs.shape[-2] - 1) // 2
    _check_resolution(N, K)
    k_int = int(np.floor(sigma + 1e-12))
    mu = sigma - k_int if sigma - k_int > 1e-12 else 0.0
    lead = coeffs.shape[: coeffs.ndim - n - 1]
    best = np.zeros(lead)
    separations = []
    s = 1
    while s <= N // 2:
        separations.append(s)
        s *= 2
    for order in range(k_int + 1):
        for alpha in _multi_indices(order, n):
            c = coeffs
            for axis, times in enumerate(alpha):
                for _ in range(times):
                    c = differentiate_coeffs(c, n, axis)
            values = _direct_samples(c, N, n)
            best = np.maximum(best, np.abs(values).max(axis=(-2, -1)))
            exponent = mu if order == k_int else 1.0
            if order == k_int and mu == 0.0:
                continue
            grid_vals = values.reshape(lead + (N,) * n + (values.shape[-1],))
            for axis in range(n):
                ax = grid_vals.ndim - n - 1 + axis
                for s in separations:
                    diff = np.abs(np.roll(grid_vals, -s, axis=ax) - grid_vals)
                    red = tuple(range(len(lead), grid_vals.ndim))
                    quotient = diff.max(axis=red) / (s / N) ** exponent
                    best = np.maximum(best, quotient)
    return best


def holder_surrogate(f: TorusFun, sigma: float, grid: CollocationGrid) -> float:
    """Computable lower bound for the C^sigma norm of f (see ``holder_parts``)."""
    if grid.n != f.n:
        raise ValueError(f"grid dimension {grid.n} does not match function dimension {f.n}")
    return float(holder_parts(f.coeffs, sigma, grid.N, f.n))
