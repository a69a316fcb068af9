"""Parametric level-set absorption fields.

The level set is a sum of Wendland C2 bumps,

    phi(x; p) = sum_j alpha_j psi(|beta_j| * ||x - chi_j||_s) - c,
    psi(r) = (1 - r)_+^4 (4 r + 1),

with the smoothed norm ``||v||_s = sqrt(||v||^2 + s^2)``, evaluated in
coordinates normalized to the unit square. The absorption field is
``mu = mu_out + (mu_in - mu_out) H(phi)`` for a smoothed Heaviside ``H``.

Parameters are stored bump-major: ``p.reshape(n_bumps, 4)`` has columns
``(alpha, beta, chi_x, chi_y)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "PalsModel",
    "wendland",
    "wendland_derivative",
    "heaviside",
    "heaviside_derivative",
    "level_set",
    "level_set_jacobian",
    "absorption_field",
    "absorption_gradient",
    "absorption_jacobian",
    "initial_parameters",
]

PARAMS_PER_BUMP = 4


def wendland(r):
    r = np.asarray(r, dtype=float)
    t = np.clip(1.0 - r, 0.0, None)
    return t**4 * (4.0 * r + 1.0)


def wendland_derivative(r):
    r = np.asarray(r, dtype=float)
    t = np.clip(1.0 - r, 0.0, None)
    return -20.0 * r * t**3


def heaviside(t, eps, kind="sine"):
    """Smoothed Heaviside.

    ``"sine"`` is exactly 0 below ``-eps`` and 1 above ``eps`` (C2 overall);
    ``"atan"`` is the globally supported ``0.5 (1 + (2/pi) atan(t/eps))``.
    """
    t = np.asarray(t, dtype=float)
    if kind == "atan":
        return 0.5 * (1.0 + (2.0 / np.pi) * np.arctan(t / eps))
    u = np.clip(t / eps, -1.0, 1.0)
    H = 0.5 * (1.0 + u + np.sin(np.pi * u) / np.pi)
    # sin(pi) is not exactly zero in floating point; pin the flat tails
    return np.where(u <= -1.0, 0.0, np.where(u >= 1.0, 1.0, np.clip(H, 0.0, 1.0)))


def heaviside_derivative(t, eps, kind="sine"):
    t = np.asarray(t, dtype=float)
    if kind == "atan":
        return (1.0 / (np.pi * eps)) / (1.0 + (t / eps) ** 2)
    inside = np.abs(t) < eps
    u = np.clip(t / eps, -1.0, 1.0)
    return np.where(inside, (1.0 + np.cos(np.pi * u)) / (2.0 * eps), 0.0)


@dataclass(frozen=True)
class PalsModel:
    """Level-set representation settings.

    ``extent`` maps physical coordinates onto the unit square, so centers live
    in [0, 1]^2 and dilations are in inverse normalized length.
    """

    n_bumps: int = 9
    level: float = 0.2
    eps_heaviside: float = 0.1
    mu_in: float = 0.15
    mu_out: float = 0.005
    smoothing: float = 0.002
    extent: tuple[float, float] = (10.0, 10.0)
    heaviside: str = "sine"

    def __post_init__(self):
        if self.n_bumps < 1:
            raise ValueError("need at least one bump")
        if self.eps_heaviside <= 0:
            raise ValueError("eps_heaviside must be positive")
        if self.heaviside not in ("sine", "atan"):
            raise ValueError(f"unknown Heaviside kind {self.heaviside!r}")

    @property
    def n_params(self) -> int:
        return PARAMS_PER_BUMP * self.n_bumps

    def unpack(self, p):
        p = np.asarray(p, dtype=float)
        if p.shape != (self.n_params,):
            raise ValueError(f"parameter vector must have length {self.n_params}, got {p.shape}")
        q = p.reshape(self.n_bumps, PARAMS_PER_BUMP)
        return q[:, 0], q[:, 1], q[:, 2:4]

    def normalize(self, x):
        return np.atleast_2d(np.asarray(x, dtype=float)) / np.asarray(self.extent)


def _geometry(model, p, x):
    alpha, beta, chi = model.unpack(p)
    xn = model.normalize(x)
    diff = xn[:, None, :] - chi[None, :, :]  # (npts, nb, 2)
    rho = np.sqrt(np.sum(diff**2, axis=-1) + model.smoothing**2)
    r = np.abs(beta)[None, :] * rho
    return alpha, beta, diff, rho, r


def level_set(model: PalsModel, p, x) -> np.ndarray:
    """``phi(x; p)`` at physical points ``x`` of shape ``(npts, 2)`` (or a single point)."""
    alpha, _, _, _, r = _geometry(model, p, x)
    phi = wendland(r) @ alpha - model.level
    return phi[0] if np.ndim(x) == 1 else phi


def level_set_jacobian(model: PalsModel, p, x):
    """Return ``(phi, dphi)`` with ``dphi`` of shape ``(npts, n_params)``."""
    alpha, beta, diff, rho, r = _geometry(model, p, x)
    psi = wendland(r)
    dpsi = wendland_derivative(r)
    phi = psi @ alpha - model.level
    npts = r.shape[0]
    d = np.empty((npts, model.n_bumps, PARAMS_PER_BUMP))
    d[:, :, 0] = psi
    d[:, :, 1] = alpha * dpsi * np.sign(beta) * rho
    # d rho / d chi = -(x - chi) / rho
    scale = -(alpha * dpsi * np.abs(beta))[:, :, None] / rho[:, :, None]
    d[:, :, 2:4] = scale * diff
    return phi, d.reshape(npts, model.n_params)


def absorption_field(model: PalsModel, p, points) -> np.ndarray:
    """Nodal absorption ``mu_out + (mu_in - mu_out) H(phi)``."""
    phi = np.atleast_1d(level_set(model, p, np.atleast_2d(points)))
    return model.mu_out + (model.mu_in - model.mu_out) * heaviside(phi, model.eps_heaviside, model.heaviside)


def absorption_jacobian(model: PalsModel, p, points):
    """Return ``(mu, dmu)``; ``dmu`` has shape ``(npts, n_params)``."""
    phi, dphi = level_set_jacobian(model, p, np.atleast_2d(points))
    contrast = model.mu_in - model.mu_out
    mu = model.mu_out + contrast * heaviside(phi, model.eps_heaviside, model.heaviside)
    dH = heaviside_derivative(phi, model.eps_heaviside, model.heaviside)
    return mu, contrast * dH[:, None] * dphi


def absorption_gradient(model: PalsModel, p, points, ell: int) -> np.ndarray:
    """Derivative of the nodal absorption with respect to ``p[ell]``."""
    if not 0 <= ell < model.n_params:
        raise IndexError(f"parameter index {ell} out of range for {model.n_params} parameters")
    return absorption_jacobian(model, p, points)[1][:, ell]


def initial_parameters(model: PalsModel, center=(0.5, 0.5), spacing=0.08, radius=0.15,
                       alpha=1.0) -> np.ndarray:
    """Bumps on a square grid around ``center`` with equal weights.

    For a perfect square number of bumps the centers form a ``k x k`` grid;
    otherwise they are placed on the smallest enclosing grid in row order.
    """
    k = int(np.ceil(np.sqrt(model.n_bumps)))
    offsets = (np.arange(k) - (k - 1) / 2.0) * spacing
    gx, gy = np.meshgrid(center[0] + offsets, center[1] + offsets)
    chi = np.column_stack([gx.ravel(), gy.ravel()])[: model.n_bumps]
    q = np.empty((model.n_bumps, PARAMS_PER_BUMP))
    q[:, 0] = alpha
    q[:, 1] = 1.0 / radius
    q[:, 2:4] = chi
    return q.ravel()
