"""Kernel functions and their one-sided moment matrices."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate

FAMILIES = ("triangular", "uniform", "epanechnikov")


@dataclass(frozen=True)
class KernelSpec:
    """Symmetric kernel with support ``[-support, support]`` integrating to one."""

    family: str = "triangular"
    support: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}; choose from {FAMILIES}")
        if not self.support > 0:
            raise ValueError("kernel support must be positive")

    def __call__(self, u):
        return kernel_weight(u, self)


def _unit_kernel(family: str, u: np.ndarray) -> np.ndarray:
    a = np.abs(u)
    inside = a <= 1.0
    if family == "triangular":
        return np.where(inside, 1.0 - a, 0.0)
    if family == "uniform":
        return np.where(inside, 0.5, 0.0)
    return np.where(inside, 0.75 * (1.0 - a * a), 0.0)


def kernel_weight(u, k: KernelSpec = KernelSpec()):
    """Evaluate K(u); vectorised over ``u``. Returns a float for scalar input."""
    u_arr = np.asarray(u, dtype=float)
    w = _unit_kernel(k.family, u_arr / k.support) / k.support
    return float(w) if w.ndim == 0 else w


@dataclass(frozen=True)
class KernelMoments:
    """One-sided kernel moment matrices for a local polynomial of order ``p``.

    Attributes
    ----------
    gamma : ndarray, shape (p+1, p+1)
        ``int_0^kappa K(u) u^(j+k) du``.
    vartheta : dict
        Maps q to the vector ``int_0^kappa K(u) u^(j+q) du``.
    psi : ndarray, shape (p+1, p+1)
        ``int_0^kappa K(u)^2 u^(j+k) du``.
    """

    p: int
    gamma: np.ndarray
    vartheta: dict
    psi: np.ndarray

    @property
    def gamma_inv(self) -> np.ndarray:
        return np.linalg.inv(self.gamma)


def _moment(k: KernelSpec, power: int, squared: bool) -> float:
    def f(u):
        w = kernel_weight(u, k)
        return (w * w if squared else w) * u**power

    val, _ = integrate.quad(f, 0.0, k.support, epsabs=1e-13, epsrel=1e-13, limit=200)
    return val


@lru_cache(maxsize=256)
def _moments_cached(k: KernelSpec, p: int, q_list: tuple[int, ...]) -> KernelMoments:
    m = [_moment(k, j, False) for j in range(2 * p + 1)]
    m2 = [_moment(k, j, True) for j in range(2 * p + 1)]
    idx = np.add.outer(np.arange(p + 1), np.arange(p + 1))
    gamma = np.asarray(m)[idx]
    psi = np.asarray(m2)[idx]
    vartheta = {q: np.array([_moment(k, j + q, False) for j in range(p + 1)]) for q in q_list}
    for a in (gamma, psi, *vartheta.values()):
        a.setflags(write=False)
    return KernelMoments(p, gamma, vartheta, psi)


def kernel_moments(k: KernelSpec, p: int, q_list=()) -> KernelMoments:
    """Kernel constants for order ``p`` and each requested ``q``; cached per input."""
    if p < 0:
        raise ValueError("p must be nonnegative")
    return _moments_cached(k, int(p), tuple(sorted(set(int(q) for q in q_list))))
