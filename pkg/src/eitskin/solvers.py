"""Classical time-difference reconstructors: Tikhonov, l1 (FISTA) and
pattern-coupled sparse Bayesian learning.

Each solver exists twice: as a plain function operating on a raw system
matrix (the literal math), and as a scikit-learn style estimator that is
``fit`` to a sensitivity operator and then maps measurement differences
to conductivity-change maps with ``predict``.

Fitting to a :class:`~eitskin.forward.Jacobian` applies the EIT
normalization: the operator becomes S = -J / v_ref (so a conductivity
increase produces positive normalized differences) and is rescaled to
unit spectral norm, which makes regularization factors comparable across
meshes and units; the predicted map is scaled back.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .forward import Jacobian, MeasurementFrame, normalized_difference
from .validation import as_float_array, require

__all__ = [
    "ReconParams",
    "TactileMap",
    "tikhonov",
    "l1_solve",
    "sbl_solve",
    "reconstruct",
    "TikhonovReconstructor",
    "L1Reconstructor",
    "SblReconstructor",
    "save_map_csv",
    "load_map_csv",
]


@dataclass(frozen=True)
class ReconParams:
    """Solver selection and knobs; defaults follow the comparison setup
    (Tikhonov/l1 factor 0.001, l1 400 iterations, SBL 5 iterations with
    cluster size 4, tolerance 1e-4, coupling 0.3)."""

    method: str = "tikhonov"
    reg_factor: float = 0.001
    max_iters: int = 400
    cluster_size: int = 4
    tolerance: float = 1e-4
    coupling: float = 0.3

    def __post_init__(self):
        require(self.method in ("tikhonov", "l1", "sbl"), f"unknown method {self.method!r}")
        require(self.reg_factor > 0, "regularization factor must be > 0")
        require(self.max_iters >= 1, "max_iters must be >= 1")
        if self.method == "sbl":
            require(self.cluster_size >= 1, "cluster size must be >= 1")
            require(0.0 <= self.coupling < 1.0, "coupling must lie in [0, 1)")
            require(self.tolerance > 0, "tolerance must be > 0")


@dataclass(frozen=True)
class TactileMap:
    """Reconstructed conductivity-change vector on the 1350-point grid."""

    delta_sigma: np.ndarray
    grid_id: str = ""
    method: str = ""

    def __post_init__(self):
        v = as_float_array(self.delta_sigma, "delta sigma")
        v.setflags(write=False)
        object.__setattr__(self, "delta_sigma", v)


def _power_norm(a, iters=20, seed=0):
    """Spectral norm estimate of ``a`` by power iteration on a^T a."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(a.shape[1])
    v /= np.linalg.norm(v)
    for _ in range(iters):
        w = a.T @ (a @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
    return float(np.sqrt(nw))


def tikhonov(J, dv, tau):
    """Minimizer of ||J x - dv||^2 + tau ||x||^2.

    Computed through the dual form x = J^T (J J^T + tau I)^{-1} dv, which
    is the same minimizer with an m x m solve.
    """
    require(tau > 0, "tau must be > 0")
    a = as_float_array(J, "system matrix")
    dv = as_float_array(dv, "dv", shape=(a.shape[0],))
    gram = a @ a.T
    gram[np.diag_indices_from(gram)] += tau
    try:
        coef = la.solve(gram, dv, assume_a="pos")
    except la.LinAlgError as err:
        raise np.linalg.LinAlgError(f"tikhonov solve failed: {err}") from None
    return a.T @ coef


def _soft(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def l1_solve(J, dv, tau, max_iters=400, tol=1e-8):
    """FISTA for 0.5 ||J x - dv||^2 + tau ||x||_1.

    Step size 1/L with L from 20 power iterations on J^T J; the momentum
    restarts whenever the objective would increase, so the objective is
    non-increasing across the whole run.  Stops at ``max_iters`` or when
    the relative objective change drops below ``tol``.
    """
    require(tau > 0, "tau must be > 0")
    require(max_iters >= 1, "max_iters must be >= 1")
    a = as_float_array(J, "system matrix")
    dv = as_float_array(dv, "dv", shape=(a.shape[0],))
    lip = _power_norm(a) ** 2
    if lip == 0.0:
        return np.zeros(a.shape[1])
    step = 1.0 / lip

    def objective(x):
        r = a @ x - dv
        return 0.5 * r @ r + tau * np.abs(x).sum()

    x = np.zeros(a.shape[1])
    y = x
    t = 1.0
    f_x = objective(x)
    for it in range(1, max_iters + 1):
        grad = a.T @ (a @ y - dv)
        x_new = _soft(y - step * grad, tau * step)
        f_new = objective(x_new)
        if not np.isfinite(f_new):
            raise FloatingPointError(f"l1 objective diverged at iteration {it}")
        if f_new > f_x:
            # restart momentum; a plain ISTA step from x cannot increase
            y = x
            t = 1.0
            grad = a.T @ (a @ y - dv)
            x_new = _soft(y - step * grad, tau * step)
            f_new = objective(x_new)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = x_new + ((t - 1.0) / t_new) * (x_new - x)
        converged = abs(f_x - f_new) <= tol * max(f_x, 1e-300)
        x, f_x, t = x_new, f_new, t_new
        if converged:
            break
    return x


def _cluster_mean(values, cluster_size):
    """Mean of each contiguous block of ``cluster_size``, broadcast back."""
    n = len(values)
    ids = np.arange(n) // cluster_size
    sums = np.bincount(ids, weights=values)
    counts = np.bincount(ids)
    return (sums / counts)[ids]


def sbl_solve(
    J,
    dv,
    params: ReconParams,
    noise_var=None,
):
    """Pattern-coupled sparse Bayesian learning (evidence maximization).

    Gaussian model dv = J x + n with per-coefficient prior variances
    gamma_q.  Before each posterior update, every gamma is blended with
    the mean of its contiguous cluster: gamma_eff = (1 - c) gamma +
    c cluster_mean(gamma).  The noise variance is re-estimated from the
    residual each iteration (floored at 1e-12) unless ``noise_var`` pins
    it.  Returns the posterior mean after ``params.max_iters`` iterations
    or once the largest hyperparameter change drops below
    ``params.tolerance``.
    """
    a = as_float_array(J, "system matrix")
    dv = as_float_array(dv, "dv", shape=(a.shape[0],))
    m, n = a.shape
    gamma = np.ones(n)
    learn_noise = noise_var is None
    sig2 = max(0.01 * float(dv @ dv) / m, 1e-12) if learn_noise else float(noise_var)
    require(sig2 > 0, "noise variance must be positive")

    mu = np.zeros(n)
    for _ in range(params.max_iters):
        g_eff = (1.0 - params.coupling) * gamma + params.coupling * _cluster_mean(
            gamma, params.cluster_size
        )
        ag = a * g_eff  # = A Gamma
        c = sig2 * np.eye(m) + ag @ a.T
        try:
            cho = la.cho_factor(c, lower=True)
        except la.LinAlgError as err:
            raise FloatingPointError(f"SBL covariance factorization failed: {err}") from None
        mu = ag.T @ la.cho_solve(cho, dv)
        w = la.cho_solve(cho, a)
        post_var = g_eff - g_eff**2 * np.einsum("mq,mq->q", a, w)
        post_var = np.maximum(post_var, 0.0)
        gamma_new = mu**2 + post_var
        if learn_noise:
            resid = dv - a @ mu
            shrink = np.sum(1.0 - post_var / np.maximum(g_eff, 1e-300))
            sig2_new = (resid @ resid + sig2 * shrink) / m
            if not np.isfinite(sig2_new) or sig2_new < 0.0:
                raise FloatingPointError("SBL noise-variance estimate collapsed")
            sig2 = max(sig2_new, 1e-12)
        delta = np.max(np.abs(gamma_new - gamma))
        gamma = gamma_new
        if delta < params.tolerance:
            break
    return mu


def _normalized_system(jac: Jacobian):
    """EIT operator for normalized differences, noise-whitened and rescaled.

    S = -J / v_ref maps conductivity change to normalized differences;
    rows are then re-weighted by |v_ref| (unit RMS) because measurement
    noise is additive in volts, so the weakest channels would otherwise
    dominate the fit with pure noise.  Finally S is scaled to unit
    spectral norm so regularization factors are comparable across meshes.
    Returns ``(S_hat, row_weights, scale)``; a solution x of
    ``S_hat x ~ w * dv`` corresponds to delta-sigma = x / scale.
    """
    s = -jac.matrix / jac.ref_voltages[:, None]
    w = np.abs(jac.ref_voltages)
    w = w / np.sqrt(np.mean(w**2))
    s = s * w[:, None]
    scale = _power_norm(s)
    require(scale > 0, "degenerate (all-zero) sensitivity matrix")
    return s / scale, w, scale


_SOLVER_DISPATCH = {
    "tikhonov": lambda s, dv, p: tikhonov(s, dv, p.reg_factor),
    "l1": lambda s, dv, p: l1_solve(s, dv, p.reg_factor, p.max_iters),
    "sbl": lambda s, dv, p: sbl_solve(s, dv, p),
}


def reconstruct(
    touched: MeasurementFrame,
    reference: MeasurementFrame,
    jacobian: Jacobian,
    params: ReconParams,
) -> TactileMap:
    """Normalized-difference reconstruction with the selected solver.

    The touched frame must come from the same mesh the Jacobian was
    computed on; the reference may be either the matching deformed
    reference or the flat one (reference-mismatch experiments).
    """
    require(
        touched.mesh_id == jacobian.mesh_id,
        "provenance mismatch: touched frame and Jacobian come from different meshes",
    )
    dv = normalized_difference(touched, reference)
    s_hat, w, scale = _normalized_system(jacobian)
    x = _SOLVER_DISPATCH[params.method](s_hat, w * dv, params)
    return TactileMap(delta_sigma=x / scale, grid_id=jacobian.grid_id, method=params.method)


class _FittedMixin:
    def _check_fitted(self):
        if getattr(self, "operator_", None) is None:
            raise NotFittedError("call fit() with a Jacobian or system matrix first")

    def _ingest(self, X):
        """Accept a Jacobian (EIT normalization applied) or a raw operator."""
        if isinstance(X, Jacobian):
            self.operator_, self.row_weights_, self.scale_ = _normalized_system(X)
            self.grid_id_ = X.grid_id
            self.mesh_id_ = X.mesh_id
        else:
            self.operator_ = as_float_array(X, "system matrix")
            require(self.operator_.ndim == 2, "system matrix must be 2-D")
            self.row_weights_ = np.ones(self.operator_.shape[0])
            self.scale_ = 1.0
            self.grid_id_ = ""
            self.mesh_id_ = ""

    def _predict_batch(self, dv, solve_one):
        self._check_fitted()
        dv = as_float_array(dv, "dv")
        single = dv.ndim == 1
        rows = np.atleast_2d(dv)
        require(rows.shape[1] == self.operator_.shape[0], "dv length does not match operator")
        out = np.vstack([solve_one(self.row_weights_ * r) / self.scale_ for r in rows])
        return out[0] if single else out


class TikhonovReconstructor(BaseEstimator, _FittedMixin):
    """Ridge-regularized linear reconstruction, factorized once in fit()."""

    def __init__(self, tau=0.001):
        self.tau = tau

    def fit(self, X, y=None):
        require(self.tau > 0, "tau must be > 0")
        self._ingest(X)
        gram = self.operator_ @ self.operator_.T
        gram[np.diag_indices_from(gram)] += self.tau
        self.cho_ = la.cho_factor(gram, lower=True)
        return self

    def predict(self, dv):
        def solve_one(r):
            return self.operator_.T @ la.cho_solve(self.cho_, r)

        return self._predict_batch(dv, solve_one)


class L1Reconstructor(BaseEstimator, _FittedMixin):
    """Sparsity-promoting reconstruction via monotone FISTA.

    The default threshold is calibrated for the unit-spectral-norm
    operator produced by fitting a Jacobian."""

    def __init__(self, tau=3e-4, max_iters=400, tol=1e-8):
        self.tau = tau
        self.max_iters = max_iters
        self.tol = tol

    def fit(self, X, y=None):
        self._ingest(X)
        return self

    def predict(self, dv):
        return self._predict_batch(
            dv, lambda r: l1_solve(self.operator_, r, self.tau, self.max_iters, self.tol)
        )


class SblReconstructor(BaseEstimator, _FittedMixin):
    """Pattern-coupled sparse Bayesian learning reconstruction."""

    def __init__(self, max_iters=5, cluster_size=4, tolerance=1e-4, coupling=0.3):
        self.max_iters = max_iters
        self.cluster_size = cluster_size
        self.tolerance = tolerance
        self.coupling = coupling

    def _params(self):
        return ReconParams(
            method="sbl",
            max_iters=self.max_iters,
            cluster_size=self.cluster_size,
            tolerance=self.tolerance,
            coupling=self.coupling,
        )

    def fit(self, X, y=None):
        self._params()  # validate
        self._ingest(X)
        return self

    def predict(self, dv):
        return self._predict_batch(
            dv, lambda r: sbl_solve(self.operator_, r, self._params())
        )


def save_map_csv(path, tmap: TactileMap):
    with open(path, "w") as fh:
        fh.write(f"# method={tmap.method} grid={tmap.grid_id}\n")
        for v in tmap.delta_sigma:
            fh.write(f"{v:.17g}\n")


def load_map_csv(path) -> TactileMap:
    method, grid_id = "", ""
    vals = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line.startswith("#"):
                for tok in line[1:].split():
                    if tok.startswith("method="):
                        method = tok[7:]
                    elif tok.startswith("grid="):
                        grid_id = tok[5:]
                continue
            if line:
                vals.append(float(line))
    return TactileMap(np.asarray(vals), grid_id=grid_id, method=method)
