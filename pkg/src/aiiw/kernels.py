"""Smoothing kernels shared by the intensity and outcome models."""
from __future__ import annotations

import numpy as np

_SQRT_2PI = np.sqrt(2.0 * np.pi)

ALIASES = {
    "epanechnikov": "epanechnikov",
    "epan": "epanechnikov",
    "gaussian": "gaussian",
    "normal": "gaussian",
    "dnorm": "gaussian",
    "uniform": "uniform",
    "rectangular": "uniform",
    "biweight": "biweight",
    "quartic": "biweight",
}


def canonical_kernel(name: str) -> str:
    try:
        return ALIASES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown kernel {name!r}; choose from {sorted(set(ALIASES.values()))}") from None


def is_compact(name: str) -> bool:
    return canonical_kernel(name) != "gaussian"


def evaluate(name: str, u):
    """Kernel density ``K(u)``; every kernel integrates to one."""
    u = np.asarray(u, dtype=float)
    kind = canonical_kernel(name)
    if kind == "gaussian":
        return np.exp(-0.5 * u * u) / _SQRT_2PI
    inside = np.abs(u) <= 1.0
    if kind == "epanechnikov":
        return np.where(inside, 0.75 * (1.0 - u * u), 0.0)
    if kind == "uniform":
        return np.where(inside, 0.5, 0.0)
    return np.where(inside, 0.9375 * (1.0 - u * u) ** 2, 0.0)


def weights(name: str, u):
    """Unnormalised kernel weights for ratio estimators.

    Constant factors cancel in Nadaraya-Watson ratios, so the Gaussian
    weight skips the ``1/sqrt(2 pi)`` multiply.
    """
    u = np.asarray(u, dtype=float)
    kind = canonical_kernel(name)
    if kind == "gaussian":
        return np.exp(-0.5 * u * u)
    return evaluate(kind, u)


def support_radius(name: str) -> float:
    return np.inf if canonical_kernel(name) == "gaussian" else 1.0
