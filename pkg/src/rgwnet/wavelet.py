"""Rational Gaussian wavelet kernels and their closed-form parameter derivatives.

The mother wavelet is the odd function

    psi(t) = C * P(t) * v(t) * exp(-t^2 / 2)

with an odd polynomial P(t) = t * prod_k (t - t_k)(t + t_k) defined by real
zeros t_k, and a rational term

    v(t) = 1 / prod_j (t - z_j)(t + z_j)(t - z~_j)(t + z~_j),
    z~ = -Re(z) + i Im(z),

defined by complex poles z_j = a_j + i b_j.  For real t each pole contributes
the strictly positive real quartic

    q_j(t) = (t^2 - a_j^2 + b_j^2)^2 + 4 a_j^2 b_j^2,

so the whole evaluation stays in real arithmetic and everything exported from
this module (kernel taps and their derivatives) is real.  The amplitude
constant C is fixed per sampled kernel so that the taps have unit L2 norm;
``eval_mother`` evaluates the shape with C = 1.

A dilated kernel at scale lambda = exp(l) samples lambda^(-1/2) psi(t/lambda)
on a centered unit-spaced grid and renormalizes.  Dilations are learned
through l = log(lambda), which keeps them positive under unconstrained
updates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError, ShapeError

# Poles with |Im(z)| below this sit on the real axis for practical purposes
# and make the wavelet non-integrable.
POLE_IMAG_GUARD = 1e-3


def check_pole_guard(poles: np.ndarray) -> None:
    imag = np.asarray(poles, dtype=float).reshape(-1, 2)[:, 1]
    if np.any(np.abs(imag) < POLE_IMAG_GUARD):
        worst = float(np.min(np.abs(imag)))
        raise InvalidParameterError(
            f"pole too close to the real axis: min |Im(z)| = {worst:g} "
            f"< {POLE_IMAG_GUARD:g}"
        )


def apply_pole_guard(poles: np.ndarray) -> np.ndarray:
    """Clamp |Im(z_j)| up to the guard, preserving sign (zero counts as +)."""
    out = np.array(poles, dtype=float).reshape(-1, 2)
    imag = out[:, 1]
    sign = np.where(imag < 0.0, -1.0, 1.0)
    out[:, 1] = sign * np.maximum(np.abs(imag), POLE_IMAG_GUARD)
    return out


@dataclass
class WaveletParams:
    """Learnable state of the wavelet layer.

    Attributes
    ----------
    poly_zeros : ndarray, shape (p,)
        Real zeros of the polynomial factor; p = 0 means P(t) = t.
    poles : ndarray, shape (n, 2)
        Complex poles as (real, imag) rows, n >= 1.
    log_dilations : ndarray, shape (m,)
        Per-filter log-dilations; dilation_k = exp(log_dilations[k]).
    """

    poly_zeros: np.ndarray
    poles: np.ndarray
    log_dilations: np.ndarray

    def __post_init__(self):
        self.poly_zeros = np.asarray(self.poly_zeros, dtype=float).reshape(-1)
        self.poles = np.asarray(self.poles, dtype=float).reshape(-1, 2)
        self.log_dilations = np.asarray(self.log_dilations, dtype=float).reshape(-1)
        if self.poles.shape[0] < 1:
            raise InvalidParameterError("at least one pole is required")
        if self.log_dilations.shape[0] < 1:
            raise InvalidParameterError("at least one dilation is required")
        check_pole_guard(self.poles)

    @property
    def p(self) -> int:
        return self.poly_zeros.shape[0]

    @property
    def n(self) -> int:
        return self.poles.shape[0]

    @property
    def m(self) -> int:
        return self.log_dilations.shape[0]

    @property
    def dilations(self) -> np.ndarray:
        return np.exp(self.log_dilations)

    @property
    def n_learnable(self) -> int:
        return self.p + 2 * self.n + self.m

    def to_vector(self) -> np.ndarray:
        """Flatten to [t_1..t_p, Re z_1, Im z_1, ..., Re z_n, Im z_n, l_1..l_m]."""
        return np.concatenate(
            [self.poly_zeros, self.poles.reshape(-1), self.log_dilations]
        )

    @classmethod
    def from_vector(cls, vec, p: int, n: int, m: int) -> "WaveletParams":
        vec = np.asarray(vec, dtype=float).reshape(-1)
        if vec.size != p + 2 * n + m:
            raise ShapeError(
                f"expected parameter vector of length {p + 2 * n + m}, got {vec.size}"
            )
        return cls(vec[:p], vec[p:p + 2 * n].reshape(n, 2), vec[p + 2 * n:])

    def copy(self) -> "WaveletParams":
        return WaveletParams(
            self.poly_zeros.copy(), self.poles.copy(), self.log_dilations.copy()
        )


@dataclass
class SampledKernel:
    """A dilated wavelet sampled on a centered unit grid with unit L2 norm."""

    values: np.ndarray
    grid: np.ndarray
    dilation: float
    norm_constant: float


def kernel_grid(kernel_length: int) -> np.ndarray:
    """Centered sample positions j - (M-1)/2 for j = 0..M-1."""
    if kernel_length < 2:
        raise ShapeError(f"kernel_length must be >= 2, got {kernel_length}")
    return np.arange(kernel_length, dtype=float) - (kernel_length - 1) / 2.0


def _shape_pieces(t, zeros, poles):
    """Evaluate the unnormalized shape at points t, keeping factor tables.

    Returns (values, pieces) where pieces holds the per-factor arrays reused
    by the derivative formulas.
    """
    t = np.asarray(t, dtype=float)
    t2 = t * t
    gauss = np.exp(-0.5 * t2)

    p = zeros.shape[0]
    if p:
        poly_factors = t2[None, :] - (zeros ** 2)[:, None]  # (p, M)
        poly_even = np.prod(poly_factors, axis=0)
    else:
        poly_factors = np.ones((0, t.size))
        poly_even = np.ones_like(t)
    poly = t * poly_even

    a = poles[:, 0][:, None]
    b = poles[:, 1][:, None]
    u = t2[None, :] - a * a + b * b        # (n, M)
    quartic = u * u + 4.0 * (a * a) * (b * b)
    denom = np.prod(quartic, axis=0)

    values = gauss * poly / denom
    pieces = {
        "t": t, "t2": t2, "gauss": gauss,
        "poly_factors": poly_factors, "poly_even": poly_even, "poly": poly,
        "a": a, "b": b, "u": u, "quartic": quartic, "denom": denom,
    }
    return values, pieces


def _leave_one_out(poly_factors):
    """prod_{i != k} poly_factors[i] for each k; cheap since p is small."""
    p, width = poly_factors.shape
    loo = np.empty((p, width))
    for k in range(p):
        mask = np.ones(p, dtype=bool)
        mask[k] = False
        loo[k] = np.prod(poly_factors[mask], axis=0)
    return loo


def _shape_param_derivs(values, zeros, poles, pieces):
    """Columns d(shape)/d(theta), theta = [t_1..t_p, a_1, b_1, ..., a_n, b_n]."""
    t, gauss, denom = pieces["t"], pieces["gauss"], pieces["denom"]
    u, quartic = pieces["u"], pieces["quartic"]
    a, b = pieces["a"], pieces["b"]
    p, n = zeros.shape[0], poles.shape[0]

    cols = np.empty((t.size, p + 2 * n))
    if p:
        loo = _leave_one_out(pieces["poly_factors"])
        # dP/dt_k = -2 t_k * t * prod_{i != k} (t^2 - t_i^2)
        for k in range(p):
            cols[:, k] = gauss * (-2.0 * zeros[k] * t * loo[k]) / denom
    # dq/da = -4a u + 8 a b^2, dq/db = 4b u + 8 a^2 b; d(shape)/d. = -shape dq/(. q)
    dq_da = -4.0 * a * u + 8.0 * a * b * b
    dq_db = 4.0 * b * u + 8.0 * a * a * b
    for j in range(n):
        cols[:, p + 2 * j] = -values * dq_da[j] / quartic[j]
        cols[:, p + 2 * j + 1] = -values * dq_db[j] / quartic[j]
    return cols


def _shape_time_deriv(values, zeros, pieces):
    """d(shape)/dt = gauss/denom * (P' - P sum_j q_j'/q_j - t P)."""
    t, gauss, denom = pieces["t"], pieces["gauss"], pieces["denom"]
    poly, poly_even = pieces["poly"], pieces["poly_even"]
    u, quartic = pieces["u"], pieces["quartic"]

    p = zeros.shape[0]
    if p:
        loo = _leave_one_out(pieces["poly_factors"])
        even_deriv = np.sum(2.0 * t[None, :] * loo, axis=0)
    else:
        even_deriv = np.zeros_like(t)
    poly_deriv = poly_even + t * even_deriv
    quartic_logderiv = np.sum(4.0 * t[None, :] * u / quartic, axis=0)
    return gauss * (poly_deriv - poly * quartic_logderiv - t * poly) / denom


def eval_mother(params: WaveletParams, t):
    """Evaluate the mother wavelet shape at time t (amplitude constant C = 1).

    Accepts a scalar or an ndarray of times; the result matches the input
    shape.  The shape is odd in t and real-valued; the rational denominator
    prod_j q_j(t) is strictly positive whenever the pole guard holds.
    """
    check_pole_guard(params.poles)
    arr = np.asarray(t, dtype=float)
    values, _ = _shape_pieces(arr.reshape(-1), params.poly_zeros, params.poles)
    values = values.reshape(arr.shape)
    if arr.ndim == 0:
        return float(values)
    return values


def _raw_sampled(params, scale_index, kernel_length):
    if not 0 <= scale_index < params.m:
        raise IndexError(
            f"scale_index {scale_index} out of range for m={params.m} dilations"
        )
    check_pole_guard(params.poles)
    grid = kernel_grid(kernel_length)
    lam = float(np.exp(params.log_dilations[scale_index]))
    values, pieces = _shape_pieces(grid / lam, params.poly_zeros, params.poles)
    raw = lam ** -0.5 * values
    return grid, lam, raw, values, pieces


def sample_kernel(params: WaveletParams, scale_index: int, kernel_length: int) -> SampledKernel:
    """Sample the dilated wavelet for one scale, normalized to unit L2 norm.

    grid[j] = j - (M-1)/2 and values[j] = C * lambda^(-1/2) * psi(grid[j]/lambda)
    with C chosen so that sum(values^2) = 1.
    """
    grid, lam, raw, _, _ = _raw_sampled(params, scale_index, kernel_length)
    norm = float(np.linalg.norm(raw))
    if not np.isfinite(norm) or norm == 0.0:
        raise InvalidParameterError(
            f"sampled kernel vanished or overflowed at dilation {lam:g} "
            f"(kernel_length={kernel_length}); dilation is out of usable range"
        )
    return SampledKernel(raw / norm, grid, lam, 1.0 / norm)


def sample_all_kernels(params: WaveletParams, kernel_length: int) -> np.ndarray:
    """Tap values for every scale, stacked as an (m, M) matrix."""
    return np.stack(
        [sample_kernel(params, k, kernel_length).values for k in range(params.m)]
    )


def kernel_jacobian(params: WaveletParams, scale_index: int, kernel_length: int) -> np.ndarray:
    """Derivatives of the normalized taps w.r.t. every learnable scalar.

    Returns an (M, p + 2n + 1) matrix; column order is the polynomial zeros,
    then (Re, Im) of each pole, then the log-dilation of this scale.  The
    normalization constant is differentiated along with the raw taps: with
    K = w / |w| and any parameter theta,

        dK/dtheta = (w_theta - K (K . w_theta)) / |w|.

    The log-dilation column applies the chain rule through lambda = exp(l):
    d/dl [lambda^(-1/2) psi(x/lambda)] = -w/2 - lambda^(-1/2) (x/lambda) psi'(x/lambda).
    """
    grid, lam, raw, values, pieces = _raw_sampled(params, scale_index, kernel_length)
    norm = float(np.linalg.norm(raw))
    if not np.isfinite(norm) or norm == 0.0:
        raise InvalidParameterError(
            f"sampled kernel vanished or overflowed at dilation {lam:g}"
        )
    taps = raw / norm

    scale_amp = lam ** -0.5
    d_raw = np.empty((kernel_length, params.p + 2 * params.n + 1))
    d_raw[:, :-1] = scale_amp * _shape_param_derivs(
        values, params.poly_zeros, params.poles, pieces
    )
    t = grid / lam
    d_raw[:, -1] = -0.5 * raw - scale_amp * t * _shape_time_deriv(
        values, params.poly_zeros, pieces
    )
    return (d_raw - np.outer(taps, taps @ d_raw)) / norm


def all_kernel_jacobians(params: WaveletParams, kernel_length: int) -> np.ndarray:
    """kernel_jacobian for every scale, stacked as (m, M, p + 2n + 1)."""
    return np.stack(
        [kernel_jacobian(params, k, kernel_length) for k in range(params.m)]
    )
