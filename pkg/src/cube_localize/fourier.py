"""Walsh-Fourier expansion and the multilinear (harmonic) extension to [-1, 1]^n.

Coefficients are indexed by subset bitmask, ``fhat[S] = 2^-n sum_x f(x) prod_{i in S} x_i``,
so ``f(x) = sum_S fhat[S] prod_{i in S} x_i`` both on the cube and, read as a
polynomial, on the solid cube.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .log_laplace import Condition, SearchConfig, certify, log_laplace
from .measure_core import DiscreteMeasure, TestFunction
from .report import AuditReport

__all__ = [
    "FourierTable",
    "walsh_fourier",
    "inverse_walsh",
    "multilinear_eval",
    "multilinear_gradient",
    "multilinear_hessian",
    "density_table",
    "log_cosh",
    "g_identity_check",
    "log_density_hessian",
    "fact_harmonic_audit",
]


@dataclass(frozen=True, eq=False)
class FourierTable:
    n: int
    coefficients: np.ndarray

    def __getitem__(self, subset) -> float:
        if isinstance(subset, (int, np.integer)):
            return float(self.coefficients[subset])
        mask = 0
        for i in subset:
            mask |= 1 << i
        return float(self.coefficients[mask])


def _butterfly_forward(values: np.ndarray, n: int) -> np.ndarray:
    c = np.array(values, dtype=np.float64).reshape(-1)
    for i in range(n):
        c = c.reshape(-1, 2, 2**i)
        lo, hi = c[:, 0, :].copy(), c[:, 1, :].copy()
        c[:, 0, :] = lo + hi  # i not in S
        c[:, 1, :] = hi - lo  # i in S: weight x_i = +1 at bit 1
        c = c.reshape(-1)
    return c / 2.0**n


def _butterfly_inverse(coeffs: np.ndarray, n: int) -> np.ndarray:
    c = np.array(coeffs, dtype=np.float64).reshape(-1)
    for i in range(n):
        c = c.reshape(-1, 2, 2**i)
        c0, c1 = c[:, 0, :].copy(), c[:, 1, :].copy()
        c[:, 0, :] = c0 - c1
        c[:, 1, :] = c0 + c1
        c = c.reshape(-1)
    return c


def walsh_fourier(f: TestFunction | np.ndarray, n: int | None = None) -> FourierTable:
    """Fast Walsh-Fourier transform, ``O(n 2^n)``."""
    if isinstance(f, TestFunction):
        n, values = f.n, f.values
    else:
        values = np.asarray(f, dtype=np.float64)
        n = int(np.log2(values.size)) if n is None else n
    if values.size != 2**n:
        raise ValueError(f"expected {2**n} values, got {values.size}")
    return FourierTable(n, _butterfly_forward(values, n))


def inverse_walsh(fhat: FourierTable) -> TestFunction:
    return TestFunction(fhat.n, _butterfly_inverse(fhat.coefficients, fhat.n))


def _check_solid_cube(y: np.ndarray) -> None:
    if np.any(np.abs(y) > 1.0 + 1e-15):
        raise ValueError("evaluation point lies outside [-1, 1]^n")


def _contract(coeffs: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Evaluate ``sum_S c[S] prod_{i in S} y_i`` for a batch ``y`` of shape (k, n)."""
    k, n = y.shape
    c = np.broadcast_to(coeffs, (k, coeffs.size))
    for i in range(n):
        c = c.reshape(k, -1, 2)
        c = c[:, :, 0] + y[:, i, None] * c[:, :, 1]
    return c.reshape(k)


def multilinear_eval(fhat: FourierTable, x) -> np.ndarray | float:
    """Value of the multilinear extension at ``x`` (single point or batch)."""
    y = np.asarray(x, dtype=np.float64)
    single = y.ndim == 1
    y = np.atleast_2d(y)
    if y.shape[1] != fhat.n:
        raise ValueError(f"point has {y.shape[1]} coordinates, expected {fhat.n}")
    _check_solid_cube(y)
    out = _contract(fhat.coefficients, y)
    return float(out[0]) if single else out


def _derivative_coeffs(coeffs: np.ndarray, n: int, i: int) -> np.ndarray:
    """Coefficients of the partial derivative in coordinate ``i``."""
    c = coeffs.reshape(-1, 2, 2**i)
    d = np.zeros_like(c)
    d[:, 0, :] = c[:, 1, :]
    return d.reshape(-1)


def multilinear_gradient(fhat: FourierTable, x) -> np.ndarray:
    y = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _check_solid_cube(y)
    n = fhat.n
    g = np.stack([_contract(_derivative_coeffs(fhat.coefficients, n, i), y) for i in range(n)], axis=1)
    return g[0] if np.ndim(x) == 1 else g


def multilinear_hessian(fhat: FourierTable, x) -> np.ndarray:
    """Hessian of the extension; the diagonal vanishes by multilinearity."""
    y = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _check_solid_cube(y)
    n = fhat.n
    H = np.zeros((y.shape[0], n, n))
    for i in range(n):
        di = _derivative_coeffs(fhat.coefficients, n, i)
        for j in range(i + 1, n):
            H[:, i, j] = H[:, j, i] = _contract(_derivative_coeffs(di, n, j), y)
    return H[0] if np.ndim(x) == 1 else H


def density_table(nu: DiscreteMeasure) -> FourierTable:
    """Fourier table of the density of ``nu`` relative to the uniform measure."""
    return walsh_fourier(nu.weights * 2.0**nu.n, nu.n)


def log_cosh(w) -> np.ndarray:
    a = np.abs(np.asarray(w, dtype=np.float64))
    return a + np.log1p(np.exp(-2.0 * a)) - np.log(2.0)


def g_identity_check(nu: DiscreteMeasure, w, rho_hat: FourierTable | None = None) -> np.ndarray | float:
    """``|log rho(tanh w) + sum log cosh(w_i) - L(w)|`` with rho from the Fourier table.

    Raises ``ValueError`` where the extension is not positive.
    """
    rho_hat = density_table(nu) if rho_hat is None else rho_hat
    w = np.asarray(w, dtype=np.float64)
    rho = multilinear_eval(rho_hat, np.tanh(w))
    if np.any(np.asarray(rho) <= 0):
        raise ValueError("density extension is not positive at the evaluation point")
    lhs = np.log(rho) + log_cosh(w).sum(axis=-1)
    return np.abs(lhs - log_laplace(nu, w))


def log_density_hessian(nu: DiscreteMeasure, x, rho_hat: FourierTable | None = None) -> np.ndarray:
    """Hessian of ``log rho`` at interior points: ``H rho / rho - grad rho grad rho^T / rho^2``."""
    rho_hat = density_table(nu) if rho_hat is None else rho_hat
    y = np.atleast_2d(np.asarray(x, dtype=np.float64))
    rho = multilinear_eval(rho_hat, y)
    if np.any(rho <= 0):
        raise ValueError("density extension is not positive at an evaluation point")
    g = multilinear_gradient(rho_hat, y)
    H = multilinear_hessian(rho_hat, y)
    out = H / rho[:, None, None] - g[:, :, None] * g[:, None, :] / (rho**2)[:, None, None]
    return out[0] if np.ndim(x) == 1 else out


def _audit_points(n: int, per_axis: int, w_radius: float, mc_points: int, seed: int) -> np.ndarray:
    if n <= 4:
        axis = np.tanh(np.linspace(-w_radius, w_radius, per_axis))
        return np.array(list(itertools.product(axis, repeat=n)))
    rng = np.random.default_rng(seed)
    return np.tanh(rng.uniform(-w_radius, w_radius, size=(mc_points, n)))


def fact_harmonic_audit(
    nu: DiscreteMeasure,
    per_axis: int = 7,
    w_radius: float = 3.0,
    mc_points: int = 2000,
    seed: int = 0,
    search: SearchConfig | None = None,
) -> AuditReport:
    """Compare the certified curvature constant against ``beta_grid + 3``.

    ``beta_grid`` is the largest eigenvalue of the Hessian of ``log rho`` over
    the grid, a lower bound on its supremum over the open cube.
    """
    rho_hat = density_table(nu)
    y = _audit_points(nu.n, per_axis, w_radius, mc_points, seed)
    rho = multilinear_eval(rho_hat, y)
    ok = rho > 0
    report = AuditReport(
        "fact-harmonic",
        nu.describe(),
        {"per_axis": per_axis, "w_radius": w_radius, "mc_points": mc_points, "seed": seed},
    )
    report.diagnostics["nonpositive_density_points"] = int((~ok).sum())
    y = y[ok]
    Hlog = log_density_hessian(nu, y, rho_hat)
    eig_log = np.linalg.eigvalsh(Hlog)
    beta_grid = float(eig_log[:, -1].max())
    Hrho = multilinear_hessian(rho_hat, y)
    eig_rho = np.linalg.eigvalsh(np.atleast_3d(Hrho).reshape(len(y), nu.n, nu.n))
    grad_log = multilinear_gradient(rho_hat, y) / rho[ok][:, None]
    # affine-in-each-coordinate positivity gives 1/(y_i - 1) <= d_i log rho <= 1/(y_i + 1)
    with np.errstate(divide="ignore"):
        upper = 1.0 / (y + 1.0)
        lower = 1.0 / (y - 1.0)
    worst_upper = float(np.max(grad_log - upper))
    worst_lower = float(np.max(lower - grad_log))
    cert = certify(nu, Condition.SEMI_LC, search or SearchConfig(seed=seed))
    report.check("beta_cert <= beta_grid + 3", cert.certified_value, beta_grid + 3.0, 1e-9)
    report.check("grad log rho <= 1/(y+1)", worst_upper, 0.0, 1e-9)
    report.check("grad log rho >= 1/(y-1)", worst_lower, 0.0, 1e-9, relation="<=")
    report.diagnostics.update(
        {
            "beta_grid": beta_grid,
            "beta_cert": cert.certified_value,
            "beta_cert_witness": cert.witness.tolist(),
            "grid_points": int(len(y)),
            "max_positive_eigs_hess_rho": int((eig_rho > 1e-12).sum(axis=1).max()),
            "max_positive_eigs_hess_log_rho": int((eig_log > 1e-12).sum(axis=1).max()),
        }
    )
    return report
