"""Explicit feature maps for additive homogeneous kernels (chi2, intersection).

The map samples the kernel's spectrum at frequencies ``j * period`` so that
``<psi(x), psi(y)>`` approximates ``sum_i k(x_i, y_i)``.  Linear models on
mapped features then stand in for kernel machines.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array

from .exceptions import ConfigError, DataError

KERNELS = ("chi2", "intersection")
ZERO_THRESHOLD = 1e-12


@dataclass(frozen=True)
class HomogeneousMapConfig:
    kernel: str = "chi2"
    order: int = 1
    period: float = 0.5

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise ConfigError(f"unknown kernel {self.kernel!r}; expected one of {KERNELS}")
        if int(self.order) < 0:
            raise ConfigError("order must be >= 0")
        if not self.period > 0:
            raise ConfigError("period must be > 0")

    @property
    def expansion(self) -> int:
        return 2 * int(self.order) + 1


def kernel_spectrum(kernel: str, omega):
    omega = np.asarray(omega, dtype=np.float64)
    if kernel == "chi2":
        # sech written with exp(-|x|) so large frequencies underflow instead of overflowing
        e = np.exp(-np.pi * np.abs(omega))
        return 2.0 * e / (1.0 + e * e)
    if kernel == "intersection":
        return (2.0 / np.pi) / (1.0 + 4.0 * omega ** 2)
    raise ConfigError(f"unknown kernel {kernel!r}")


def _check_nonnegative(*arrays):
    for a in arrays:
        if np.any(a < 0):
            raise DataError("additive kernels require nonnegative inputs")


def exact_kernel(x, y, kernel="chi2") -> float:
    """Exact additive kernel value; chi2 terms with x_i + y_i = 0 contribute 0."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DataError("kernel inputs differ in dimension")
    _check_nonnegative(x, y)
    if kernel == "chi2":
        s = x + y
        nz = s > 0
        return float(np.sum(2.0 * x[nz] * y[nz] / s[nz]))
    if kernel == "intersection":
        return float(np.minimum(x, y).sum())
    raise ConfigError(f"unknown kernel {kernel!r}")


@njit(cache=True, fastmath=True)
def _chi2_gram(A, B, out):
    for i in range(A.shape[0]):
        for j in range(B.shape[0]):
            acc = 0.0
            for k in range(A.shape[1]):
                s = A[i, k] + B[j, k]
                if s > 0.0:
                    acc += 2.0 * A[i, k] * B[j, k] / s
            out[i, j] = acc


def chi2_kernel_matrix(A, B) -> np.ndarray:
    """Exact chi2 Gram matrix between the rows of ``A`` and ``B``."""
    A = np.ascontiguousarray(A, dtype=np.float64)
    B = np.ascontiguousarray(B, dtype=np.float64)
    _check_nonnegative(A, B)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise DataError("kernel inputs differ in dimension")
    out = np.empty((A.shape[0], B.shape[0]))
    _chi2_gram(A, B, out)
    return out


def efm_map(x, config: HomogeneousMapConfig = HomogeneousMapConfig()) -> np.ndarray:
    """Map nonnegative vector(s) to ``d * (2n + 1)`` dimensions.

    Works on a single vector or on the rows of a matrix.  The 2n+1 outputs of
    each input component are contiguous: the DC term, then cos/sin pairs for
    j = 1..n.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_nonnegative(x)
    n, L = int(config.order), float(config.period)
    active = x > ZERO_THRESHOLD
    safe = np.where(active, x, 1.0)
    log_c = np.log(safe)
    out = np.zeros(x.shape + (2 * n + 1,))
    out[..., 0] = np.sqrt(safe * L * kernel_spectrum(config.kernel, 0.0))
    for j in range(1, n + 1):
        amp = np.sqrt(2.0 * safe * L * kernel_spectrum(config.kernel, j * L))
        out[..., 2 * j - 1] = amp * np.cos(j * L * log_c)
        out[..., 2 * j] = amp * np.sin(j * L * log_c)
    out[~active] = 0.0
    return out.reshape(x.shape[:-1] + (x.shape[-1] * (2 * n + 1),))


class HomogeneousKernelMap(TransformerMixin, BaseEstimator):
    """Stateless transformer wrapper around :func:`efm_map`.

    With ``l1_normalize`` (the default) each row is scaled to unit L1 mass
    before mapping, which is how histogram features are fed in.
    """

    def __init__(self, kernel="chi2", order=1, period=0.5, l1_normalize=True):
        self.kernel = kernel
        self.order = order
        self.period = period
        self.l1_normalize = l1_normalize

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        _check_nonnegative(X)
        self.config_ = HomogeneousMapConfig(self.kernel, self.order, self.period)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        X = check_array(X, dtype=np.float64)
        if self.l1_normalize:
            mass = X.sum(axis=1, keepdims=True)
            X = np.divide(X, mass, out=np.zeros_like(X), where=mass > 0)
        return efm_map(X, HomogeneousMapConfig(self.kernel, self.order, self.period))
