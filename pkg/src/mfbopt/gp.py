"""Multi-source Gaussian-process emulator.

A single GP fuses observations from every data source: the source label is
one-hot encoded and embedded into a learned latent space that enters the
kernel (see :mod:`mfbopt.kernel`), so cross-source correlations are learned
from data rather than assumed.  Training minimizes the negative log marginal
likelihood augmented with a scaled interval score that rewards calibrated
prediction intervals at the training points.

Continuous inputs are scaled to the unit cube from the problem bounds and
responses are standardized per fit; predictions are returned in original
units.  The training objective exposes an analytic gradient (verified
against finite differences in the test suite) so the multi-start L-BFGS
fits stay cheap even for the larger benchmark datasets.
"""

from __future__ import annotations

import dataclasses
import json
from typing import Sequence

import numpy as np
import scipy.linalg

from . import kernel as kn
from .errors import InvalidInputError, NumericalFailureError, TrainingFailureError
from .numopt import BoxBounds, lbfgs_minimize, sobol_sample
from .types import MfDataset, MixedPoint

__all__ = [
    "MeanSpec",
    "TrainConfig",
    "GpModel",
    "mean_value",
    "interval_score_values",
    "nll_from_covariance",
    "neg_log_marginal_likelihood",
    "interval_score",
    "training_loss",
    "training_loss_gradient",
    "profile_mean",
    "model_from_params",
    "fit",
]

_LN10 = np.log(10.0)

# Optimization box for the packed hyperparameter vector.
_OMEGA_LO, _OMEGA_HI = -10.0, 6.0
_THETA_LO, _THETA_HI = -3.0, 3.0
_LOG_SIG2_LO, _LOG_SIG2_HI = -3.0, 2.0
_LOG_DELTA_LO, _LOG_DELTA_HI = -8.0, 0.0


@dataclasses.dataclass(frozen=True)
class MeanSpec:
    """GP mean function: one shared constant, or one constant per source."""

    kind: str  # "constant" | "per_source"
    beta: np.ndarray

    def __post_init__(self):
        if self.kind not in ("constant", "per_source"):
            raise InvalidInputError(f"unknown mean kind {self.kind!r}")
        b = np.atleast_1d(np.asarray(self.beta, dtype=float))
        if self.kind == "constant" and b.size != 1:
            raise InvalidInputError("constant mean takes exactly one coefficient")
        object.__setattr__(self, "beta", b)


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """Knobs for :func:`fit`.

    ``restarts`` multi-start count for the first fit, ``refit_restarts`` the
    reduced count used by the optimization driver once a warm start is
    available.  ``is_weight`` scales the interval-score term in the training
    loss and ``interval_level`` is the two-sided miss level of the scored
    prediction interval.  ``max_evals`` caps objective evaluations per
    restart.
    """

    restarts: int = 8
    is_weight: float = 0.08
    interval_level: float = 0.05
    max_evals: int = 120
    refit_restarts: int = 4
    latent_dim: int = 2
    mean_kind: str = "per_source"
    tol: float = 1e-5

    def __post_init__(self):
        if self.restarts < 1:
            raise InvalidInputError("restarts must be >= 1")
        if self.is_weight < 0:
            raise InvalidInputError("is_weight must be >= 0")
        if not 0.0 < self.interval_level < 1.0:
            raise InvalidInputError("interval_level must be in (0, 1)")


def mean_value(point: MixedPoint, mean: MeanSpec) -> float:
    """Mean-function value at a point (source-dependent for per-source means)."""
    if mean.kind == "constant":
        return float(mean.beta[0])
    if point.source >= mean.beta.size:
        raise InvalidInputError(f"source {point.source} has no mean coefficient")
    return float(mean.beta[point.source])


def _interval_halfwidth_factor(nu: float) -> float:
    # The conventional 1.96 is used verbatim at the default 95% level.
    if abs(nu - 0.05) < 1e-12:
        return 1.96
    from scipy.stats import norm

    return float(norm.ppf(1.0 - nu / 2.0))


def interval_score_values(y, mu, tau, nu: float = 0.05) -> float:
    """Negatively oriented interval score of central prediction intervals.

    For each observation the interval is ``mu +- z*tau`` (z = 1.96 at the
    default ``nu`` = 0.05); the score is the mean of interval width plus
    ``2/nu`` times the distance by which the observation escapes the
    interval.  Smaller is better.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    z = _interval_halfwidth_factor(nu)
    lo = mu - z * tau
    hi = mu + z * tau
    width = hi - lo
    pen = (2.0 / nu) * (np.maximum(lo - y, 0.0) + np.maximum(y - hi, 0.0))
    return float(np.mean(width + pen))


def nll_from_covariance(y, m, cov) -> float:
    """Dense-formula negative log marginal likelihood (constant term dropped).

    ``0.5 log|C| + 0.5 (y-m)^T C^{-1} (y-m)`` for a given covariance matrix.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    m = np.broadcast_to(np.asarray(m, dtype=float), y.shape)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailureError("covariance not positive definite") from exc
    r = y - m
    w = scipy.linalg.solve_triangular(L, r, lower=True)
    return float(np.sum(np.log(np.diag(L))) + 0.5 * np.dot(w, w))


# ---------------------------------------------------------------------------
# Training workspace: everything that depends only on the data.
# ---------------------------------------------------------------------------


class _Workspace:
    def __init__(self, data: MfDataset, spec: kn.CategoricalSpec,
                 x_bounds: BoxBounds, config: TrainConfig,
                 standardize: bool = True):
        self.spec = spec
        self.config = config
        self.x_bounds = x_bounds
        self.n = data.n
        self.S = data.source.copy()
        self.T = data.t.copy()
        self.Xs = x_bounds.to_unit(data.x)
        self.y_raw = data.y.copy()
        if standardize:
            self.y_mean = float(np.mean(data.y))
            std = float(np.std(data.y))
            self.y_std = std if std > 1e-12 else 1.0
        else:
            self.y_mean, self.y_std = 0.0, 1.0
        self.ys = (data.y - self.y_mean) / self.y_std

        d = self.Xs.T[:, :, None] - self.Xs.T[:, None, :]
        self.D2 = np.ascontiguousarray(d * d)  # (dx, n, n)
        self.PI_t = kn._t_onehot(self.T, spec) if spec.dt > 0 else np.zeros((self.n, 0))
        self.PI_s = np.zeros((self.n, spec.sources))
        self.PI_s[np.arange(self.n), self.S] = 1.0

        if config.mean_kind == "per_source" and spec.sources > 1:
            self.F = self.PI_s.copy()
            self.mean_kind = "per_source"
        else:
            self.F = np.ones((self.n, 1))
            self.mean_kind = "constant"

        # packed parameter layout
        self.dx = self.Xs.shape[1]
        self.dh = config.latent_dim if spec.dt > 0 else 0
        self.dz = config.latent_dim if spec.sources > 1 else 0
        self.n_th = spec.d_pi_t * self.dh
        self.n_tz = spec.sources * self.dz
        self.dim = self.dx + self.n_th + self.n_tz + 1 + spec.sources

    def unpack(self, vec: np.ndarray):
        i = 0
        omega = vec[i:i + self.dx]; i += self.dx
        th = vec[i:i + self.n_th].reshape(self.spec.d_pi_t, self.dh) if self.n_th \
            else np.zeros((self.spec.d_pi_t, 0))
        i += self.n_th
        tz = vec[i:i + self.n_tz].reshape(self.spec.sources, self.dz) if self.n_tz \
            else np.zeros((self.spec.sources, 0))
        i += self.n_tz
        log_sig2 = vec[i]; i += 1
        log_delta = vec[i:i + self.spec.sources]
        return omega, th, tz, float(log_sig2), log_delta

    def pack(self, omega, theta_h, theta_z, log_sig2, log_delta) -> np.ndarray:
        parts = [np.asarray(omega, dtype=float).ravel()]
        if self.n_th:
            parts.append(np.asarray(theta_h, dtype=float).ravel())
        if self.n_tz:
            parts.append(np.asarray(theta_z, dtype=float).ravel())
        parts.append(np.asarray([log_sig2], dtype=float))
        parts.append(np.asarray(log_delta, dtype=float).ravel())
        return np.concatenate(parts)

    def opt_bounds(self) -> BoxBounds:
        lo = np.concatenate([
            np.full(self.dx, _OMEGA_LO),
            np.full(self.n_th + self.n_tz, _THETA_LO),
            [_LOG_SIG2_LO],
            np.full(self.spec.sources, _LOG_DELTA_LO),
        ])
        hi = np.concatenate([
            np.full(self.dx, _OMEGA_HI),
            np.full(self.n_th + self.n_tz, _THETA_HI),
            [_LOG_SIG2_HI],
            np.full(self.spec.sources, _LOG_DELTA_HI),
        ])
        return BoxBounds(lo, hi)

    def correlation(self, omega, theta_h, theta_z):
        # weighted squared distances via the quadratic expansion (one dgemm)
        xw = self.Xs * np.sqrt(10.0 ** omega)
        sq = np.einsum("ij,ij->i", xw, xw)
        expo = np.clip(sq[:, None] + sq[None, :] - 2.0 * (xw @ xw.T), 0.0, None)
        if self.n_th:
            H = self.PI_t @ theta_h
            dh = H[:, None, :] - H[None, :, :]
            expo += np.einsum("ijk,ijk->ij", dh, dh)
        if self.n_tz:
            m = kn._sqdist(theta_z, theta_z)  # (ds, ds) then row/col gather
            expo += m[np.ix_(self.S, self.S)]
        R = np.exp(-expo)
        np.fill_diagonal(R, 1.0)
        return R


def _gls_mean(F, L, ys):
    """Generalized-least-squares mean coefficients given the Cholesky factor."""
    PF = scipy.linalg.cho_solve((L, True), F)
    Py = scipy.linalg.cho_solve((L, True), ys)
    A = F.T @ PF
    beta = np.linalg.solve(A, F.T @ Py)
    return beta, PF, A


@dataclasses.dataclass
class _Evaluation:
    """Everything computed at one hyperparameter vector."""

    loss: float
    nll: float
    iscore: float
    R: np.ndarray
    L: np.ndarray
    invL: np.ndarray
    beta: np.ndarray
    alpha: np.ndarray
    PF: np.ndarray
    A: np.ndarray
    r: np.ndarray
    diagP: np.ndarray
    n_vec: np.ndarray
    mu: np.ndarray
    tau: np.ndarray
    sigma2: float
    delta: np.ndarray
    floor_used: float


class _Objective:
    """Training loss and its analytic gradient over the packed vector."""

    def __init__(self, ws: _Workspace):
        self.ws = ws
        self._cache_key: bytes | None = None
        self._cache: _Evaluation | None = None

    def evaluate(self, vec: np.ndarray) -> _Evaluation:
        key = vec.tobytes()
        if self._cache_key == key and self._cache is not None:
            return self._cache
        ws = self.ws
        cfg = ws.config
        omega, th, tz, log_sig2, log_delta = ws.unpack(vec)
        sigma2 = 10.0 ** log_sig2
        delta = 10.0 ** log_delta
        R = ws.correlation(omega, th, tz)
        L, n_vec, floor = kn.cholesky_covariance(R, sigma2, delta[ws.S])
        beta, PF, A = _gls_mean(ws.F, L, ws.ys)
        r = ws.ys - ws.F @ beta
        alpha = scipy.linalg.cho_solve((L, True), r)
        nll = float(np.sum(np.log(np.diag(L))) + 0.5 * np.dot(r, alpha))

        invL = scipy.linalg.solve_triangular(L, np.eye(ws.n), lower=True)
        diagP = np.einsum("ji,ji->i", invL, invL)
        mu = ws.ys - n_vec * alpha
        tau = np.sqrt(np.clip(n_vec * (1.0 - n_vec * diagP), 0.0, None))
        iscore = interval_score_values(ws.ys, mu, tau, cfg.interval_level)
        loss = nll + cfg.is_weight * abs(nll) * iscore

        ev = _Evaluation(
            loss=loss, nll=nll, iscore=iscore, R=R, L=L, invL=invL, beta=beta,
            alpha=alpha, PF=PF, A=A, r=r, diagP=diagP, n_vec=n_vec, mu=mu,
            tau=tau, sigma2=sigma2, delta=delta, floor_used=floor,
        )
        self._cache_key, self._cache = key, ev
        return ev

    def value(self, vec: np.ndarray) -> float:
        try:
            return self.evaluate(vec).loss
        except NumericalFailureError:
            return np.inf

    def gradient(self, vec: np.ndarray) -> np.ndarray:
        ws = self.ws
        cfg = ws.config
        ev = self.evaluate(vec)
        omega, th, tz, _, _ = ws.unpack(vec)
        z = _interval_halfwidth_factor(cfg.interval_level)
        two_over_nu = 2.0 / cfg.interval_level

        P = ev.invL.T @ ev.invL
        alpha = ev.alpha
        n_vec = ev.n_vec
        A_inv = np.linalg.inv(ev.A)
        # H maps v -> (P - P F A^-1 F^T P) v, the profiled-mean projection of P.
        PFA = ev.PF @ A_inv  # (n, p)

        lo = ev.mu - z * ev.tau
        hi = ev.mu + z * ev.tau
        below = (ws.ys < lo).astype(float)
        above = (ws.ys > hi).astype(float)
        w_mu = two_over_nu * (below - above) / ws.n
        w_tau = (2.0 * z - two_over_nu * z * (below + above)) / ws.n
        tau_safe = np.where(ev.tau > 1e-12, ev.tau, np.inf)

        # Per parameter k we collect: tr_k = tr(P dC), quad_k = a' dC a,
        # v_k = dC a, pcp_k = diag(P dC P), ndot_k = d(nugget)/dtheta_k,
        # all stacked over the packed layout, then combine in one sweep.
        n_par = ws.dim
        TR = np.empty(n_par)
        QUAD = np.empty(n_par)
        V = np.empty((n_par, ws.n))
        PCP = np.empty((n_par, ws.n))
        NDOT = np.zeros((n_par, ws.n))

        # --- kernel-structure parameters: dC = sigma2 * (R o G_k) ------------
        K = ev.sigma2 * ev.R
        c_ln = -_LN10 * (10.0 ** omega)
        G_list = list(c_ln[:, None, None] * ws.D2)
        if ws.n_th:
            H = ws.PI_t @ th
            for p in range(ws.spec.d_pi_t):
                dpi = ws.PI_t[:, p][:, None] - ws.PI_t[:, p][None, :]
                for m in range(ws.dh):
                    dm = H[:, m][:, None] - H[:, m][None, :]
                    G_list.append(-2.0 * dm * dpi)
        if ws.n_tz:
            Z = tz[ws.S]
            for p in range(ws.spec.sources):
                dpi = ws.PI_s[:, p][:, None] - ws.PI_s[:, p][None, :]
                for m in range(ws.dz):
                    dm = Z[:, m][:, None] - Z[:, m][None, :]
                    G_list.append(-2.0 * dm * dpi)

        n_struct = len(G_list)
        if n_struct:
            Cdot = K[None, :, :] * np.stack(G_list)
            sl = slice(0, n_struct)
            V[sl] = Cdot @ alpha
            TR[sl] = np.einsum("kij,ij->k", Cdot, P)
            QUAD[sl] = V[sl] @ alpha
            PC = np.matmul(P[None, :, :], Cdot)                # (m, n, n)
            PCP[sl] = np.einsum("kij,ji->ki", PC, P)

        # --- process variance (log10 sigma2) ---------------------------------
        i_s = n_struct
        TR[i_s] = _LN10 * (ws.n - np.sum(n_vec * ev.diagP))
        QUAD[i_s] = _LN10 * (np.dot(ev.r, alpha) - np.sum(n_vec * alpha * alpha))
        V[i_s] = _LN10 * (ev.r - n_vec * alpha)
        PCP[i_s] = _LN10 * (ev.diagP - np.einsum("ij,j,ij->i", P, n_vec, P))

        # --- per-source nuggets (log10 delta_j) ------------------------------
        P2 = P * P
        for j in range(ws.spec.sources):
            i_d = i_s + 1 + j
            mask = (ws.S == j).astype(float)
            active = ev.delta[j] >= ev.floor_used
            c = _LN10 * ev.delta[j] if active else 0.0
            TR[i_d] = c * np.sum(mask * ev.diagP)
            QUAD[i_d] = c * np.sum(mask * alpha * alpha)
            V[i_d] = c * (mask * alpha)
            PCP[i_d] = c * (P2 @ mask)
            NDOT[i_d] = c * mask

        # --- combine ----------------------------------------------------------
        dnll = 0.5 * TR - 0.5 * QUAD
        PV = scipy.linalg.cho_solve((ev.L, True), V.T)          # (n, p)
        dalpha = -(PV - PFA @ (ev.PF.T @ V.T))                  # (n, p)
        dmu = -(NDOT.T * alpha[:, None]) - n_vec[:, None] * dalpha
        dtau2 = NDOT.T * (1.0 - 2.0 * n_vec * ev.diagP)[:, None] \
            + (n_vec * n_vec)[:, None] * PCP.T
        dtau = dtau2 / (2.0 * tau_safe[:, None])
        dis = w_mu @ dmu + w_tau @ dtau
        scale_nll = 1.0 + cfg.is_weight * np.sign(ev.nll) * ev.iscore
        scale_is = cfg.is_weight * abs(ev.nll)
        return dnll * scale_nll + scale_is * dis


# ---------------------------------------------------------------------------
# Public operations on explicit parameters.
# ---------------------------------------------------------------------------


def _workspace_for(data: MfDataset, spec, config, x_bounds=None, standardize=False):
    if spec is None:
        spec = kn.CategoricalSpec(sources=int(data.source.max()) + 1 if data.n else 1)
    if x_bounds is None:
        x_bounds = BoxBounds(np.zeros(data.dx), np.ones(data.dx))
    return _Workspace(data, spec, x_bounds, config, standardize=standardize)


def neg_log_marginal_likelihood(
    data: MfDataset, params: kn.KernelParams, nugget: kn.NuggetVector,
    mean: MeanSpec, spec: kn.CategoricalSpec | None = None,
) -> float:
    """Training-data NLL at explicit parameters (coordinates used as given)."""
    if spec is None:
        spec = kn.CategoricalSpec(sources=nugget.n_sources)
    cov = kn.covariance_matrix(data.x, data.t, data.source, params, nugget, spec)
    m = np.array([mean_value(data.point(i), mean) for i in range(data.n)])
    return nll_from_covariance(data.y, m, cov)


def profile_mean(
    data: MfDataset, params: kn.KernelParams, nugget: kn.NuggetVector,
    mean_kind: str, spec: kn.CategoricalSpec | None = None,
) -> MeanSpec:
    """Closed-form (generalized least squares) mean coefficients."""
    if spec is None:
        spec = kn.CategoricalSpec(sources=nugget.n_sources)
    R = kn.correlation_matrix(data.x, data.t, data.source, params, spec)
    L, _, _ = kn.cholesky_covariance(R, params.sigma2, nugget.per_point(data.source))
    if mean_kind == "per_source" and spec.sources > 1:
        F = np.zeros((data.n, spec.sources))
        F[np.arange(data.n), data.source] = 1.0
    else:
        F = np.ones((data.n, 1))
        mean_kind = "constant"
    beta, _, _ = _gls_mean(F, L, data.y)
    return MeanSpec(kind=mean_kind, beta=beta)


def interval_score(
    data: MfDataset, params: kn.KernelParams, nugget: kn.NuggetVector,
    mean: MeanSpec, nu: float = 0.05, spec: kn.CategoricalSpec | None = None,
) -> float:
    """Interval score of the model's own predictions at its training points.

    Predictions are the regular posterior at each training input from its
    own source; the nugget is excluded from the predictive deviation at the
    query (the interval covers the latent function value plus the residual
    implied by the nugget at the training side).
    """
    if spec is None:
        spec = kn.CategoricalSpec(sources=nugget.n_sources)
    R = kn.correlation_matrix(data.x, data.t, data.source, params, spec)
    L, n_vec, _ = kn.cholesky_covariance(R, params.sigma2, nugget.per_point(data.source))
    m = np.array([mean_value(data.point(i), mean) for i in range(data.n)])
    r = data.y - m
    alpha = scipy.linalg.cho_solve((L, True), r)
    invL = scipy.linalg.solve_triangular(L, np.eye(data.n), lower=True)
    diagP = np.einsum("ji,ji->i", invL, invL)
    mu = data.y - n_vec * alpha
    tau = np.sqrt(np.clip(n_vec * (1.0 - n_vec * diagP), 0.0, None))
    return interval_score_values(data.y, mu, tau, nu)


def training_loss(
    data: MfDataset, params: kn.KernelParams, nugget: kn.NuggetVector,
    config: TrainConfig | None = None, spec: kn.CategoricalSpec | None = None,
) -> float:
    """Fit objective at explicit parameters: NLL + is_weight*|NLL|*IS.

    The mean coefficients are profiled out in closed form, exactly as during
    :func:`fit`.
    """
    config = config or TrainConfig()
    ws = _workspace_for(data, spec, config)
    obj = _Objective(ws)
    vec = ws.pack(params.omega, params.theta_h, params.theta_z,
                  np.log10(params.sigma2), np.log10(nugget.delta))
    val = obj.value(vec)
    if not np.isfinite(val):
        raise NumericalFailureError("training loss not finite at given parameters")
    return float(val)


def training_loss_gradient(
    data: MfDataset, params: kn.KernelParams, nugget: kn.NuggetVector,
    config: TrainConfig | None = None, spec: kn.CategoricalSpec | None = None,
) -> np.ndarray:
    """Analytic gradient of :func:`training_loss` in the packed layout.

    Layout: omega, theta_h (row-major), theta_z (row-major), log10 sigma2,
    log10 delta.
    """
    config = config or TrainConfig()
    ws = _workspace_for(data, spec, config)
    obj = _Objective(ws)
    vec = ws.pack(params.omega, params.theta_h, params.theta_z,
                  np.log10(params.sigma2), np.log10(nugget.delta))
    return obj.gradient(vec)


# ---------------------------------------------------------------------------
# Trained model.
# ---------------------------------------------------------------------------


class GpModel:
    """A trained emulator with cached factorization for fast prediction."""

    def __init__(self, ws: _Workspace, vec: np.ndarray, ev: _Evaluation):
        self._ws = ws
        self.spec = ws.spec
        self.x_bounds = ws.x_bounds
        omega, th, tz, log_sig2, log_delta = ws.unpack(vec)
        self.params = kn.KernelParams(
            omega=omega.copy(), theta_h=th.copy(), theta_z=tz.copy(),
            sigma2=10.0 ** log_sig2,
        )
        self.nugget = kn.NuggetVector(delta=10.0 ** log_delta)
        self.mean = MeanSpec(kind=ws.mean_kind, beta=ev.beta.copy())
        self.y_mean = ws.y_mean
        self.y_std = ws.y_std
        self.loss = ev.loss
        self.nll = ev.nll
        self.iscore = ev.iscore
        self.floor_used = ev.floor_used
        self._vec = vec.copy()
        self._L = ev.L
        self._invL = ev.invL
        self._alpha = ev.alpha
        self._delta_eff = ev.n_vec
        # prediction caches: distance weights and per-source latent distances
        self._w10 = 10.0 ** self.params.omega
        self._sqrt_w = np.sqrt(self._w10)
        self._xw_train = ws.Xs * self._sqrt_w
        self._xw_train_sq = np.einsum("ij,ij->i", self._xw_train, self._xw_train)
        if ws.spec.sources > 1:
            z_train = self.params.theta_z[ws.S]  # (n, dz)
            diff = self.params.theta_z[:, None, :] - z_train[None, :, :]
            self._zdist2 = np.einsum("snk,snk->sn", diff, diff)  # (ds, n)
        else:
            self._zdist2 = np.zeros((1, ws.n))

    @property
    def n(self) -> int:
        return self._ws.n

    @property
    def dt(self) -> int:
        """Number of ordinary categorical variables in the input."""
        return self._ws.T.shape[1]

    @property
    def data_digest(self) -> str:
        return self._digest

    def predict(self, point: MixedPoint, clip: bool = True) -> tuple[float, float]:
        """Posterior mean and variance at a mixed point (original units)."""
        mu, var = self.predict_batch(
            point.x[None, :],
            t=np.asarray([point.t], dtype=int).reshape(1, -1),
            source=point.source, clip=clip,
        )
        return float(mu[0]), float(var[0])

    def predict_batch(self, x, t=None, source=0, clip: bool = True,
                      unit: bool = False):
        """Vectorized posterior over rows of ``x`` for a single source label.

        ``source`` may also be an array with one label per row.  With
        ``unit=True`` the rows are taken as already scaled to the unit cube
        (the coordinate system of the inner optimizers).
        """
        ws = self._ws
        x = np.atleast_2d(np.asarray(x, dtype=float))
        m = x.shape[0]
        xs = x if unit else ws.x_bounds.to_unit(x)
        scalar_src = np.ndim(source) == 0
        if scalar_src and ws.T.shape[1] == 0:
            # cached fast path: expanded weighted distances, one dgemm
            xw = xs * self._sqrt_w
            sq = np.einsum("ij,ij->i", xw, xw)
            expo = np.clip(sq[:, None] + self._xw_train_sq[None, :]
                           - 2.0 * (xw @ self._xw_train.T), 0.0, None)
            if ws.spec.sources > 1:
                expo += self._zdist2[int(source)][None, :]
            k = self.params.sigma2 * np.exp(-expo)
            src = np.full(m, source, dtype=int)
        else:
            if t is None:
                t = np.zeros((m, ws.T.shape[1]), dtype=int)
            src = np.full(m, source, dtype=int) if scalar_src else np.asarray(source, dtype=int)
            rc = kn.cross_correlation(xs, t, src, ws.Xs, ws.T, ws.S, self.params, ws.spec)
            k = self.params.sigma2 * rc
        if self.mean.kind == "per_source":
            prior = self.mean.beta[src]
        else:
            prior = np.full(m, self.mean.beta[0])
        mu_s = prior + k @ self._alpha
        w = self._invL @ k.T
        var_s = self.params.sigma2 - np.einsum("ij,ij->j", w, w)
        mu = self.y_mean + self.y_std * mu_s
        var = (self.y_std ** 2) * var_s
        if clip:
            var = np.clip(var, 0.0, None)
        return mu, var

    # -- persistence --------------------------------------------------------

    def export(self, path) -> None:
        """Write hyperparameters, scaling constants and a data digest as JSON."""
        payload = {
            "model": "mf-gp",
            "spec": {
                "variables": [list(v) for v in self.spec.variables],
                "sources": self.spec.sources,
            },
            "x_bounds": {
                "lower": self.x_bounds.lower.tolist(),
                "upper": self.x_bounds.upper.tolist(),
            },
            "omega": self.params.omega.tolist(),
            "theta_h": self.params.theta_h.tolist(),
            "theta_z": self.params.theta_z.tolist(),
            "sigma2": self.params.sigma2,
            "delta": self.nugget.delta.tolist(),
            "floor_used": self.floor_used,
            "mean_kind": self.mean.kind,
            "beta": self.mean.beta.tolist(),
            "y_mean": self.y_mean,
            "y_std": self.y_std,
            "latent_dim": self._ws.config.latent_dim,
            "n": self.n,
            "digest": self._digest,
            "loss": self.loss,
            "nll": self.nll,
            "interval_score": self.iscore,
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1)

    _digest: str = ""

    @staticmethod
    def load(path, data: MfDataset) -> "GpModel":
        """Rebuild an exported model against its original training data.

        The stored digest must match the data; caches are recomputed from the
        stored hyperparameters without re-optimizing.
        """
        with open(path) as fh:
            payload = json.load(fh)
        if payload.get("model") != "mf-gp":
            raise InvalidInputError("not a model export file")
        if payload["digest"] != data.digest():
            raise InvalidInputError("data digest does not match the exported model")
        spec = kn.CategoricalSpec(
            variables=tuple((n, c) for n, c in payload["spec"]["variables"]),
            sources=payload["spec"]["sources"],
        )
        bounds = BoxBounds(np.asarray(payload["x_bounds"]["lower"]),
                           np.asarray(payload["x_bounds"]["upper"]))
        cfg = TrainConfig(latent_dim=payload["latent_dim"],
                          mean_kind=payload["mean_kind"])
        ws = _Workspace(data, spec, bounds, cfg)
        th = np.asarray(payload["theta_h"], dtype=float)
        th = th.reshape(spec.d_pi_t, -1) if th.size else np.zeros((spec.d_pi_t, cfg.latent_dim))
        tz = np.asarray(payload["theta_z"], dtype=float)
        tz = tz.reshape(spec.sources, -1) if tz.size else np.zeros((spec.sources, cfg.latent_dim))
        vec = ws.pack(
            np.asarray(payload["omega"]), th, tz,
            np.log10(payload["sigma2"]),
            np.log10(np.asarray(payload["delta"])),
        )
        ev = _Objective(ws).evaluate(vec)
        model = GpModel(ws, vec, ev)
        model._digest = payload["digest"]
        # the profiled mean is recomputed; keep the stored one for exactness
        model.mean = MeanSpec(kind=payload["mean_kind"], beta=np.asarray(payload["beta"]))
        return model


def model_from_params(
    data: MfDataset,
    params: kn.KernelParams,
    nugget: kn.NuggetVector,
    x_bounds: BoxBounds | None = None,
    spec: kn.CategoricalSpec | None = None,
    config: TrainConfig | None = None,
    standardize: bool = False,
) -> GpModel:
    """Build a queryable model at explicit hyperparameters (no optimization).

    Coordinates are used as given unless ``x_bounds`` is supplied, and the
    response is left unstandardized by default, so predictions follow the
    closed-form posterior formulas verbatim.  The mean coefficients are the
    generalized-least-squares solution at the given covariance.
    """
    config = config or TrainConfig()
    if spec is None:
        spec = kn.CategoricalSpec(sources=nugget.n_sources)
    if x_bounds is None:
        x_bounds = BoxBounds(np.zeros(data.dx), np.ones(data.dx))
    ws = _Workspace(data, spec, x_bounds, config, standardize=standardize)
    vec = ws.pack(params.omega, params.theta_h, params.theta_z,
                  np.log10(params.sigma2), np.log10(nugget.delta))
    ev = _Objective(ws).evaluate(vec)
    model = GpModel(ws, vec, ev)
    model._digest = data.digest()
    return model


def _canonical_start(ws: _Workspace) -> np.ndarray:
    """A deterministic, well-behaved start added to the Sobol restarts."""
    omega = np.full(ws.dx, -1.0)
    th = np.zeros((ws.spec.d_pi_t, ws.dh))
    if ws.n_th:
        th[:, 0] = 0.3 * np.arange(ws.spec.d_pi_t)
    tz = np.zeros((ws.spec.sources, ws.dz))
    if ws.n_tz:
        tz[:, 0] = 0.5 * np.arange(ws.spec.sources)
    log_delta = np.full(ws.spec.sources, -4.0)
    return ws.pack(omega, th, tz, 0.0, log_delta)


def fit(
    data: MfDataset,
    x_bounds: BoxBounds | None = None,
    spec: kn.CategoricalSpec | None = None,
    config: TrainConfig | None = None,
    seed: int = 0,
    restarts: int | None = None,
    extra_starts: Sequence[np.ndarray] | None = None,
) -> GpModel:
    """Train the emulator by multi-start L-BFGS on the augmented likelihood.

    Starts are Sobol-sampled over the hyperparameter box (scrambled by
    ``seed``) plus one canonical start; ``extra_starts`` (e.g. the previous
    fit's solution) are appended verbatim.  The best restart by final loss
    wins, with index order breaking ties, so refits with identical inputs
    are bit-reproducible.
    """
    if data.n < 2:
        raise InvalidInputError("fit requires at least two observations")
    config = config or TrainConfig()
    if spec is None:
        spec = kn.CategoricalSpec(sources=int(data.source.max()) + 1)
    counts = data.counts_by_source(spec.sources)
    if np.any(counts == 0):
        raise InvalidInputError("every declared source needs at least one sample")
    if x_bounds is None:
        lo, hi = data.x.min(axis=0), data.x.max(axis=0)
        width = np.where(hi - lo > 1e-12, hi - lo, 1.0)
        x_bounds = BoxBounds(lo, lo + width)

    ws = _Workspace(data, spec, x_bounds, config)
    box = ws.opt_bounds()
    n_starts = restarts if restarts is not None else config.restarts
    unit = sobol_sample(n_starts, ws.dim, seed)
    starts = [box.from_unit(u) for u in unit]
    starts.append(_canonical_start(ws))
    if extra_starts is not None:
        starts.extend(box.clip(np.asarray(s, dtype=float)) for s in extra_starts)

    obj = _Objective(ws)
    max_iter = max(10, config.max_evals // 2)
    # optimize the per-sample loss so one tolerance works across dataset sizes
    inv_n = 1.0 / ws.n

    def value(v):
        return obj.value(v) * inv_n

    def gradient(v):
        return obj.gradient(v) * inv_n

    results = []
    for idx, s in enumerate(starts):
        if not np.isfinite(obj.value(s)):
            continue
        try:
            res = lbfgs_minimize(value, gradient, s, bounds=box,
                                 tol=config.tol, max_iter=max_iter)
        except NumericalFailureError:
            continue
        results.append((res.fun, idx, res))
    if not results:
        raise TrainingFailureError("all fit restarts failed")
    results.sort(key=lambda t: (t[0], t[1]))
    best_vec = results[0][2].x
    ev = _Objective(ws).evaluate(best_vec)
    model = GpModel(ws, best_vec, ev)
    model._digest = data.digest()
    return model
