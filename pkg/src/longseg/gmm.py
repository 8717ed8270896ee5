"""Gaussian intensity model with an additive bias field.

All quantities live in log-intensity space. Classes are indexed ``0..K`` where
``K`` (the last index) is the lesion class. Voxel arrays are ``(I, N)`` in the
x-fastest order used by :meth:`longseg.volume.Volume.voxels`.
"""
from __future__ import annotations

import functools
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .errors import ConfigError, EmptyClassError, InvalidPriorError, NumericError
from .volume import Volume

LOG_2PI = np.log(2.0 * np.pi)
EMPTY_WEIGHT = 1e-6


def _voxels(v):
    return v.voxels() if isinstance(v, Volume) else np.asarray(v, dtype=np.float64)


def make_spd(cov):
    """Symmetrize and add ``1e-10 * trace / N`` to the diagonal if needed."""
    cov = 0.5 * (cov + cov.T)
    n = cov.shape[0]
    if np.linalg.eigvalsh(cov)[0] < 1e-12:
        cov = cov + (1e-10 * max(np.trace(cov), 1e-300) / n) * np.eye(n)
    return cov


@dataclass
class GaussianParams:
    """Class means ``(K + 1, N)`` and covariances ``(K + 1, N, N)``."""

    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        self.means = np.array(self.means, dtype=np.float64, ndmin=2)
        self.covs = np.array(self.covs, dtype=np.float64)
        if self.covs.ndim == 1:
            self.covs = self.covs[:, None, None]
        k, n = self.means.shape
        if self.covs.shape != (k, n, n):
            raise ValueError(f"covariance shape {self.covs.shape} does not match means {self.means.shape}")

    @property
    def n_classes(self):
        return self.means.shape[0]

    @property
    def n_channels(self):
        return self.means.shape[1]

    def copy(self):
        return GaussianParams(self.means.copy(), self.covs.copy())

    def to_dict(self):
        return {"means": self.means.tolist(),
                "covs": [c.ravel().tolist() for c in self.covs]}

    @classmethod
    def from_dict(cls, d):
        means = np.asarray(d["means"], float)
        n = means.shape[1]
        covs = np.asarray(d["covs"], float).reshape(-1, n, n)
        return cls(means, covs)


# ----------------------------------------------------------------------- bias field


@functools.lru_cache(maxsize=8)
def _basis_cached(dims, degree):
    axes = []
    for n in dims:
        pos = np.arange(n) + 0.5
        axes.append(np.stack([np.cos(np.pi * g * pos / n) for g in range(degree + 1)], axis=1))
    bx, by, bz = axes
    # basis index p = gx + (G+1) * (gy + (G+1) * gz); voxel index x-fastest
    full = np.einsum("xa,yb,zc->xyzabc", bx, by, bz)
    nx, ny, nz = dims
    p = (degree + 1) ** 3
    phi = full.reshape(nx, ny, nz, p, order="F").reshape(nx * ny * nz, p, order="F")
    phi = np.ascontiguousarray(phi)
    phi.setflags(write=False)
    return phi


def bias_basis(dims, degree):
    """Separable cosine basis evaluated at every voxel, ``(I, (G+1)^3)``.

    Column 0 is the constant function; every other column sums to zero over
    the grid.
    """
    return _basis_cached(tuple(int(n) for n in dims), int(degree))


@dataclass
class BiasField:
    """Additive log-domain bias ``C^T phi_i`` with ``C`` of shape ``(P, N)``."""

    degree: int
    coeffs: np.ndarray
    regularized: bool = False

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.coeffs.ndim == 1:
            self.coeffs = self.coeffs[:, None]
        if self.coeffs.shape[0] != (self.degree + 1) ** 3:
            raise ValueError("bias coefficient count must be (degree + 1)^3")

    @classmethod
    def zeros(cls, degree, n_channels):
        return cls(degree, np.zeros(((degree + 1) ** 3, n_channels)))

    def evaluate(self, dims):
        """Bias values ``(I, N)`` on a grid."""
        return bias_basis(dims, self.degree) @ self.coeffs

    def to_dict(self):
        return {"degree": self.degree, "coeffs": self.coeffs.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["degree"]), np.asarray(d["coeffs"], float))


# ------------------------------------------------------------------------ NIW prior


@dataclass
class NIWPrior:
    """Per-class normal-inverse-Wishart pseudo-observation prior.

    A class with ``strength == 0`` is unconstrained (flat prior).
    """

    means: np.ndarray
    covs: np.ndarray
    strength: np.ndarray

    def __post_init__(self):
        self.means = np.array(self.means, dtype=np.float64, ndmin=2)
        self.covs = np.array(self.covs, dtype=np.float64)
        self.strength = np.array(self.strength, dtype=np.float64, ndmin=1)
        n = self.means.shape[1]
        for k, p0 in enumerate(self.strength):
            if p0 < 0 or (0 < p0 <= n + 2):
                raise InvalidPriorError(f"class {k}: strength {p0} must be 0 or exceed N + 2 = {n + 2}")

    @classmethod
    def flat(cls, n_classes, n_channels):
        return cls(np.zeros((n_classes, n_channels)),
                   np.tile(np.eye(n_channels), (n_classes, 1, 1)), np.zeros(n_classes))

    def merged(self, other):
        """Copy of ``self`` with every class that ``other`` constrains taken from ``other``."""
        take = other.strength > 0
        means, covs, strength = self.means.copy(), self.covs.copy(), self.strength.copy()
        means[take], covs[take], strength[take] = other.means[take], other.covs[take], other.strength[take]
        return NIWPrior(means, covs, strength)

    def log_density(self, params: GaussianParams):
        """Sum over constrained classes of ``niw_logpdf``."""
        return sum(niw_logpdf(params.means[k], params.covs[k], self.means[k], self.covs[k], p0)
                   for k, p0 in enumerate(self.strength) if p0 > 0)


def niw_logpdf(mu, cov, mu0, cov0, p0):
    """``ln N(mu | mu0, cov / p0) + ln IW(cov | p0 * cov0, p0 - N - 2)``.

    Constants depending only on ``p0`` and ``N`` (the multivariate gamma and
    powers of 2 and pi) are dropped. Returns 0 when ``p0 == 0``.
    """
    if p0 == 0:
        return 0.0
    n = len(mu)
    nu = p0 - n - 2
    _, logdet = np.linalg.slogdet(cov)
    _, logdet0 = np.linalg.slogdet(p0 * cov0)
    inv = np.linalg.inv(cov)
    diff = np.asarray(mu) - np.asarray(mu0)
    log_normal = -0.5 * (logdet - n * np.log(p0) + p0 * diff @ inv @ diff)
    log_iw = 0.5 * nu * logdet0 - 0.5 * (nu + n + 1) * logdet - 0.5 * p0 * np.trace(cov0 @ inv)
    return float(log_normal + log_iw)


@dataclass
class LesionPriorConfig:
    """Weak conditional prior of lesion intensities given white matter.

    Mean ``mu_wm + offset``, scale ``cov_scale * cov_wm``, weight ``strength``
    pseudo-voxels.
    """

    wm_class: int | None
    offset: list = field(default_factory=lambda: [0.0])
    cov_scale: float = 1.0
    strength: float = 50.0


def lesion_conditional_prior(params: GaussianParams, config: LesionPriorConfig) -> NIWPrior:
    """NIW prior constraining only the lesion class (the last one)."""
    if config.wm_class is None:
        raise ConfigError("lesion prior needs a white-matter class index")
    k_all, n = params.n_classes, params.n_channels
    wm = int(config.wm_class)
    if not 0 <= wm < k_all - 1:
        raise ConfigError(f"white-matter class {wm} is not an anatomical class")
    offset = np.asarray(config.offset, float).ravel()
    if offset.size not in (1, n):
        raise ConfigError(f"lesion offset has {offset.size} entries for {n} channels")
    offset = np.broadcast_to(offset, (n,))
    prior = NIWPrior.flat(k_all, n)
    means, covs, strength = prior.means, prior.covs, prior.strength
    means[-1] = params.means[wm] + offset
    covs[-1] = config.cov_scale * params.covs[wm]
    strength[-1] = config.strength
    return NIWPrior(means, covs, strength)


# ----------------------------------------------------------------------- E-step


def log_likelihoods(y, params: GaussianParams, bias_values=None):
    """``ln N(d_i | mu_k + b_i, Sigma_k)`` as an ``(I, K + 1)`` array."""
    y = _voxels(y)
    if bias_values is not None:
        y = y - bias_values
    out = np.empty((y.shape[0], params.n_classes))
    n = params.n_channels
    for k in range(params.n_classes):
        try:
            chol = np.linalg.cholesky(params.covs[k])
        except np.linalg.LinAlgError:
            raise NumericError(f"covariance of class {k} is not positive definite", class_id=k) from None
        z = solve_triangular(chol, (y - params.means[k]).T, lower=True, check_finite=False)
        half_logdet = np.sum(np.log(np.diag(chol)))
        out[:, k] = -0.5 * (n * LOG_2PI + np.sum(z * z, axis=0)) - half_logdet
    return out


def e_step(D, priors, params: GaussianParams, bias: BiasField | None = None, dims=None):
    """Responsibilities and log evidence.

    ``D`` and ``priors`` are Volumes or ``(I, .)`` arrays; ``dims`` is needed
    with arrays when a bias field is given.
    """
    if isinstance(D, Volume):
        dims = D.dims
    p = _voxels(priors)
    bias_values = bias.evaluate(dims) if bias is not None else None
    ll = log_likelihoods(D, params, bias_values)
    with np.errstate(divide="ignore"):
        joint = np.log(p) + ll
    norm = logsumexp(joint, axis=1)
    resp = np.exp(joint - norm[:, None])
    return resp, float(np.sum(norm))


# ----------------------------------------------------------------------- M-steps


def class_statistics(y, resp):
    """Per-class weight, weighted mean and weighted scatter of ``y``."""
    w = resp.sum(axis=0)
    safe = np.where(w > 0, w, 1.0)
    means = (resp.T @ y) / safe[:, None]
    scatter = np.empty((resp.shape[1], y.shape[1], y.shape[1]))
    for k in range(resp.shape[1]):
        c = y - means[k]
        scatter[k] = (c * resp[:, k:k + 1]).T @ c
    return w, means, scatter


def _corrected(D, bias, dims):
    y = _voxels(D)
    if isinstance(D, Volume):
        dims = D.dims
    if bias is not None:
        y = y - bias.evaluate(dims)
    return y


def m_step_flat(D, resp, bias: BiasField | None = None, previous: GaussianParams | None = None, dims=None):
    """Maximum-likelihood means and covariances of bias-corrected data.

    Classes whose total responsibility is below ``EMPTY_WEIGHT`` raise
    EmptyClassError, unless ``previous`` is given, in which case they keep the
    previous parameters.
    """
    params, empty = niw_update(_corrected(D, bias, dims), resp, None, previous)
    return params


def m_step_niw(D, resp, bias: BiasField | None, prior: NIWPrior, previous: GaussianParams | None = None,
               dims=None):
    """MAP update under a per-class NIW prior (flat where strength is 0)."""
    params, empty = niw_update(_corrected(D, bias, dims), resp, prior, previous)
    return params


def niw_update(y, resp, prior: NIWPrior | None, previous: GaussianParams | None = None):
    """Shared M-step on bias-corrected voxels ``y``; returns ``(params, empty_classes)``.

    With ``P = strength`` and class weight ``w`` the joint mode of
    ``prod_i N(y_i | mu, S)^r_i * N(mu | mu0, S / P) * IW(S | P S0, P - N - 2)`` is

        mu = (w ybar + P mu0) / (w + P)
        S  = [P S0 + scatter + (w P / (w + P)) (ybar - mu0)(ybar - mu0)^T] / (w + P)

    The IW exponent contributes ``(P - N - 2) + N + 1`` and the mean prior one
    more factor of ``|S|^(-1/2)``, so the denominator is exactly ``w + P`` and
    ``w = 0`` returns ``(mu0, S0)``.
    """
    return update_from_statistics(class_statistics(y, resp), prior, previous)


def update_from_statistics(stats, prior: NIWPrior | None, previous: GaussianParams | None = None,
                           classes=None):
    """M-step from precomputed ``class_statistics``; see :func:`niw_update`.

    Only ``classes`` (default: all) are updated; others keep ``previous``.
    """
    w, ybar, scatter = stats
    k_all, n = ybar.shape
    means = np.empty((k_all, n))
    covs = np.empty((k_all, n, n))
    empty = []
    todo = range(k_all) if classes is None else classes
    for k in range(k_all):
        if k not in todo:
            means[k] = previous.means[k]
            covs[k] = previous.covs[k]
            continue
        p0 = 0.0 if prior is None else float(prior.strength[k])
        if p0 == 0:
            if w[k] < EMPTY_WEIGHT:
                empty.append(k)
                continue
            means[k] = ybar[k]
            covs[k] = make_spd(scatter[k] / w[k])
        else:
            mu0, s0 = prior.means[k], prior.covs[k]
            if w[k] > 0:
                diff = ybar[k] - mu0
                means[k] = (w[k] * ybar[k] + p0 * mu0) / (w[k] + p0)
                s = p0 * s0 + scatter[k] + (w[k] * p0 / (w[k] + p0)) * np.outer(diff, diff)
            else:
                means[k] = mu0
                s = p0 * s0
            covs[k] = make_spd(s / (w[k] + p0))
    if empty:
        if previous is None:
            raise EmptyClassError(f"classes {empty} have no responsibility mass", empty)
        for k in empty:
            means[k] = previous.means[k]
            covs[k] = previous.covs[k]
    return GaussianParams(means, covs), empty


# ----------------------------------------------------------------------- bias update


def update_bias(D, resp, params: GaussianParams, degree=2, fit_constant=True, dims=None) -> BiasField:
    """Weighted least-squares bias coefficients.

    Minimizes ``sum_i sum_k r_ik (d_i - mu_k - C^T phi_i)^T Sigma_k^-1 (...)``
    through the normal equations coupling all channels. With
    ``fit_constant=False`` the constant basis function is held at zero so that
    global offsets stay in the class means.
    """
    if isinstance(D, Volume):
        dims = D.dims
    y = _voxels(D)
    phi = bias_basis(dims, degree)
    active = np.ones(phi.shape[1], dtype=bool)
    if not fit_constant:
        active[0] = False
    phi_a = phi[:, active]
    n = params.n_channels
    prec = np.linalg.inv(params.covs)  # (K, N, N)
    w_vox = np.einsum("ik,kab->iab", resp, prec)  # (I, N, N)
    target = np.einsum("ik,kab,ikb->ia", resp, prec, y[:, None, :] - params.means[None, :, :])
    p = phi_a.shape[1]
    lhs = np.empty((n * p, n * p))
    rhs = np.empty(n * p)
    for a in range(n):
        rhs[a * p:(a + 1) * p] = phi_a.T @ target[:, a]
        for b in range(a, n):
            block = (phi_a * w_vox[:, a, b][:, None]).T @ phi_a
            lhs[a * p:(a + 1) * p, b * p:(b + 1) * p] = block
            lhs[b * p:(b + 1) * p, a * p:(a + 1) * p] = block.T
    regularized = False
    eig = np.linalg.eigvalsh(lhs)
    if eig[0] <= 1e-12 * max(eig[-1], 1e-300):
        lhs = lhs + 1e-8 * max(np.mean(np.diag(lhs)), 1.0) * np.eye(n * p)
        regularized = True
        warnings.warn("bias normal equations are rank deficient; ridge-regularized", RuntimeWarning)
    sol = np.linalg.solve(lhs, rhs)
    coeffs = np.zeros((phi.shape[1], n))
    coeffs[active] = sol.reshape(n, p).T
    return BiasField(degree, coeffs, regularized)


def with_lesion_prior(prior: NIWPrior | None, params: GaussianParams, config: LesionPriorConfig | None):
    """Combine an anatomical prior with the lesion conditional prior for ``params``."""
    base = prior if prior is not None else NIWPrior.flat(params.n_classes, params.n_channels)
    if config is None or config.strength == 0:
        return base
    return base.merged(lesion_conditional_prior(params, config))


__all__ = [
    "BiasField", "GaussianParams", "LesionPriorConfig", "NIWPrior", "bias_basis", "class_statistics",
    "e_step", "lesion_conditional_prior", "log_likelihoods", "m_step_flat", "m_step_niw", "make_spd",
    "niw_logpdf", "niw_update", "update_bias", "with_lesion_prior",
]
