"""Longitudinal fitting with subject-specific latent variables.

All timepoints of a subject share a latent mesh ``x0`` and latent intensity
parameters ``theta0``. Each timepoint mesh is anchored at ``x0`` with stiffness
``K1``; ``x0`` itself is anchored at the reference mesh with stiffness ``K0``.
Anatomical class intensities of each timepoint carry the NIW prior
``N(mu_t | mu0, Sigma_t / P0) IW(Sigma_t | P0 Sigma0, P0 - N - 2)``. The joint
objective

    sum_t [ log p(D_t | x_t, theta_t, C_t) + ln p(theta_t | theta0)
            + ln p(theta_tz | theta_t) - K1 U(x_t, x0) ] - K0 U(x0, x_ref)

is raised by coordinate ascent: every timepoint, then ``theta0``, then ``x0``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .atlas import DeformationPrior, Rasterizer, TetMeshAtlas
from .errors import FitError, GradientUndefinedError, InputError, NumericError
from .fit_cross import (CrossFitResult, FitOptions, TimepointModel, fit_cross,
                        labels_from_responsibilities, run_coordinate_ascent)
from .gmm import BiasField, GaussianParams, NIWPrior
from .lbfgs import minimize_lbfgs
from .volume import Volume

log = logging.getLogger(__name__)


@dataclass
class LongOptions:
    """Hyperparameters of the longitudinal fit.

    ``K0`` and ``K1`` default to ``K`` and ``14 K`` where ``K`` is
    ``cross.stiffness``. ``P0`` overrides the template-derived prior strengths
    (scalar or one value per anatomical class). With ``freeze_x0`` the latent
    mesh stays at the reference positions.
    """

    cross: FitOptions = field(default_factory=FitOptions)
    K0: float | None = None
    K1: float | None = None
    n_iter: int = 5
    P0: object = None
    freeze_x0: bool = False
    x0_max_iter: int = 50

    @property
    def k0(self):
        return self.cross.stiffness if self.K0 is None else float(self.K0)

    @property
    def k1(self):
        return 14.0 * self.cross.stiffness if self.K1 is None else float(self.K1)


@dataclass
class SubjectLatents:
    x0: np.ndarray
    theta0: NIWPrior

    def to_dict(self):
        return {"x0": self.x0.tolist(),
                "mu0": self.theta0.means.tolist(),
                "sigma0": [c.ravel().tolist() for c in self.theta0.covs],
                "P0": self.theta0.strength.tolist()}


@dataclass
class LongFitResult:
    timepoints: list
    latents: SubjectLatents
    joint_objective_trace: list
    step_labels: list
    template_fit: CrossFitResult
    flags: list = field(default_factory=list)

    def to_dict(self):
        return {
            "timepoints": [r.to_dict() for r in self.timepoints],
            "latents": self.latents.to_dict(),
            "joint_objective_trace": list(self.joint_objective_trace),
            "step_labels": list(self.step_labels),
            "template": self.template_fit.to_dict(),
            "flags": list(self.flags),
        }


def _ordered_sum(stack):
    """Sum over axis 0 independent of the order of the summands."""
    return np.sort(np.asarray(stack), axis=0).sum(axis=0)


def build_template(scans) -> Volume:
    """Voxelwise median of co-registered scans."""
    scans = list(scans)
    if not scans:
        raise InputError("no scans given")
    first = scans[0]
    for v in scans[1:]:
        if v.data.shape != first.data.shape or not np.allclose(v.spacing, first.spacing):
            raise InputError("scans differ in dims, channels or spacing")
    if len(scans) == 1:
        return first
    return Volume(np.median(np.stack([v.data for v in scans]), axis=0), first.spacing)


def template_strengths(template_fit: CrossFitResult, n_classes, n_channels, dims=None):
    """Prior strengths from template voxel counts; returns ``(P0, empty_classes)``.

    ``P0[k]`` is the number of template voxels labelled ``k``; classes without
    voxels get ``N + 3`` so that the inverse-Wishart stays proper.
    """
    labels = np.argmax(template_fit.resp[:, :n_classes], axis=1)
    lesion = template_fit.resp[:, n_classes] > 0.5
    counts = np.bincount(labels[~lesion], minlength=n_classes).astype(np.float64)
    empty = [k for k in range(n_classes) if counts[k] == 0]
    counts[empty] = n_channels + 3
    return counts, empty


def init_longitudinal(template_fit: CrossFitResult, T, atlas: TetMeshAtlas, options: LongOptions):
    """Per-timepoint seeds and initial latents from a template fit.

    Returns ``(seeds, latents, flags)`` where each seed is ``(params, bias, x)``.
    """
    params = template_fit.params
    k_all, n = params.n_classes, params.n_channels
    k_anat = k_all - 1
    flags = []
    if options.P0 is None:
        p0, empty = template_strengths(template_fit, k_anat, n)
        if empty:
            flags.append(f"classes {empty} empty in template; P0 set to {n + 3}")
    else:
        p0 = np.broadcast_to(np.asarray(options.P0, dtype=np.float64), (k_anat,)).copy()
    strength = np.concatenate([p0, [0.0]])  # lesion intensities are not coupled
    theta0 = NIWPrior(params.means.copy(), params.covs.copy(), strength)
    x0 = atlas.nodes_ref.copy() if options.freeze_x0 else template_fit.x_hat.copy()
    seeds = [(params.copy(), BiasField(template_fit.bias.degree, template_fit.bias.coeffs.copy()),
              template_fit.x_hat.copy()) for _ in range(T)]
    return seeds, SubjectLatents(x0, theta0), flags


def update_theta0(per_t_params, P0, n_channels, previous: NIWPrior | None = None) -> NIWPrior:
    """Closed-form latent intensity update.

    ``mu0 = (sum_t Sigma_t^-1)^-1 sum_t Sigma_t^-1 mu_t`` and
    ``Sigma0^-1 = (1/T sum_t Sigma_t^-1) P0 / (P0 - N - 2)``. Classes with
    ``P0 == 0`` are not coupled and keep ``previous`` values (or the precision
    weighted mean with the mean covariance when there is none).
    """
    per_t_params = list(per_t_params)
    T = len(per_t_params)
    p0 = np.asarray(P0, dtype=np.float64)
    k_all = p0.shape[0]
    n = n_channels
    means = np.empty((k_all, n))
    covs = np.empty((k_all, n, n))
    for k in range(k_all):
        try:
            precs = [np.linalg.inv(np.linalg.cholesky(p.covs[k])) for p in per_t_params]
        except np.linalg.LinAlgError:
            raise NumericError(f"covariance of class {k} is singular", class_id=k) from None
        precs = np.array([c.T @ c for c in precs])
        weighted = np.array([pr @ p.means[k] for pr, p in zip(precs, per_t_params)])
        prec_sum = _ordered_sum(precs)
        prec_sum = 0.5 * (prec_sum + prec_sum.T)
        means[k] = np.linalg.solve(prec_sum, _ordered_sum(weighted))
        if p0[k] > 0:
            sigma0_inv = prec_sum / T * (p0[k] / (p0[k] - n - 2))
            c = np.linalg.inv(sigma0_inv)
            covs[k] = 0.5 * (c + c.T)
        elif previous is not None:
            means[k] = previous.means[k]
            covs[k] = previous.covs[k]
        else:
            covs[k] = _ordered_sum([p.covs[k] for p in per_t_params]) / T
    return NIWPrior(means, covs, p0)


def coupling_objective(per_t_params, theta0: NIWPrior):
    """``sum_t sum_k ln NIW(theta_tk | theta0_k)`` over coupled classes."""
    return float(np.sum(np.sort([theta0.log_density(p) for p in per_t_params])))


def x0_objective(x0, x_ts, x_ref, tets, K0, K1):
    """``K0 U(x0, x_ref) + K1 sum_t U(x0, x_t)`` and its gradient."""
    return _x0_function([DeformationPrior(x, tets, x_ref) for x in x_ts],
                        DeformationPrior(x_ref, tets, x_ref), K0, K1)(x0)


def _x0_function(priors_t, prior_ref, K0, K1):
    # the energy is symmetric in its two meshes, so U(x_t, x0) = U(x0, x_t)
    def fun(x):
        parts, grads = [], []
        try:
            if K0 > 0:
                e, g = prior_ref.energy_and_gradient(x)
                parts.append(K0 * e)
                grads.append(K0 * g)
            for p in priors_t:
                e, g = p.energy_and_gradient(x)
                parts.append(K1 * e)
                grads.append(K1 * g)
        except GradientUndefinedError:  # folded configuration
            return np.inf, None
        if not parts:
            return 0.0, np.zeros_like(x)
        return float(np.sum(np.sort(parts))), _ordered_sum(grads)
    return fun


def update_x0(x_ts, x_ref, tets, K0, K1, x0_init=None, max_iter=50):
    """Latent mesh minimizing ``K0 U(x0, x_ref) + K1 sum_t U(x0, x_t)``.

    Returns ``(x0, stalled)``; the result never has a larger objective than
    the starting point (``x0_init``, or ``x_ref`` when not given).
    """
    x_ref = np.asarray(x_ref, dtype=np.float64)
    start = x_ref.copy() if x0_init is None else np.asarray(x0_init, dtype=np.float64)
    fun = _x0_function([DeformationPrior(x, tets, x_ref) for x in x_ts],
                       DeformationPrior(x_ref, tets, x_ref), K0, K1)
    res = minimize_lbfgs(fun, start, memory=10, max_iter=max_iter, initial_step=0.1,
                         gtol=1e-10, ftol=1e-12)
    stalled = res.status == "stalled" and res.n_iter == 0
    return res.x, stalled


class _Engine:
    """Joint objective bookkeeping for one subject."""

    def __init__(self, scans, atlas, options: LongOptions):
        self.scans = scans
        self.atlas = atlas
        self.opts = options
        self.rasterizers = [Rasterizer(atlas, s.dims) for s in scans]
        self.ref_prior = DeformationPrior(atlas.nodes_ref, atlas.tets, atlas.nodes_ref)

    def model(self, t, latents: SubjectLatents):
        return TimepointModel(self.scans[t], self.atlas, latents.x0, self.opts.k1, self.opts.cross,
                              intensity_prior=latents.theta0, rasterizer=self.rasterizers[t])

    def latent_term(self, x0):
        k0 = self.opts.k0
        return 0.0 if k0 == 0 else -k0 * self.ref_prior.energy(x0)

    def joint(self, states, latents):
        parts = [self.model(t, latents).objective(*st) for t, st in enumerate(states)]
        return float(np.sum(np.sort(parts))) + self.latent_term(latents.x0)


def fit_longitudinal(scans, atlas: TetMeshAtlas, options: LongOptions | None = None) -> LongFitResult:
    """Joint fit of all timepoints of one subject.

    Parameters
    ----------
    scans : list of Volume
        Co-registered log-intensity scans.
    atlas : TetMeshAtlas
    options : LongOptions, optional

    Returns
    -------
    LongFitResult
        Per-timepoint fits, latent variables and the joint objective after
        every coordinate step.
    """
    opts = options or LongOptions()
    scans = list(scans)
    T = len(scans)
    template = build_template(scans)
    template_fit = fit_cross(template, atlas, opts.cross)
    seeds, latents, flags = init_longitudinal(template_fit, T, atlas, opts)
    engine = _Engine(scans, atlas, opts)
    n = scans[0].channels
    k_all = template_fit.params.n_classes

    # states hold (params, bias, x) per timepoint
    states = [tuple(s) for s in seeds]
    trace = [engine.joint(states, latents)]
    labels = ["init"]
    results: list = [None] * T
    for sweep in range(opts.n_iter):
        for t in range(T):
            model = engine.model(t, latents)
            try:
                res = run_coordinate_ascent(model, *states[t], opts.cross)
            except FitError as exc:
                exc.timepoint = t
                raise
            except NumericError as exc:
                raise FitError(f"timepoint {t}: {exc}", timepoint=t) from exc
            results[t] = res
            states[t] = (res.params, res.bias, res.x_hat)
            flags.extend(f"sweep {sweep} timepoint {t}: {f}" for f in res.flags)
            trace.append(engine.joint(states, latents))
            labels.append(f"sweep {sweep} timepoint {t}")

        theta0 = update_theta0([s[0] for s in states], latents.theta0.strength, n, latents.theta0)
        candidate = SubjectLatents(latents.x0, theta0)
        value = engine.joint(states, candidate)
        if value >= trace[-1] - 1e-8 * abs(trace[-1]):
            latents = candidate
        else:
            flags.append(f"sweep {sweep}: theta0 update rejected")
            value = trace[-1]
        trace.append(value)
        labels.append(f"sweep {sweep} theta0")

        if not opts.freeze_x0:
            x0, stalled = update_x0([s[2] for s in states], atlas.nodes_ref, atlas.tets, opts.k0,
                                    opts.k1, latents.x0, opts.x0_max_iter)
            if stalled:
                flags.append(f"sweep {sweep}: x0 update stalled")
            latents = SubjectLatents(x0, latents.theta0)
            trace.append(engine.joint(states, latents))
            labels.append(f"sweep {sweep} x0")

    for t in range(T):
        if results[t] is None:
            params, bias, x = states[t]
            model = engine.model(t, latents)
            ll = model.loglik(params, bias)
            pri = model.priors(x)
            obj = model.objective(params, bias, x, ll, pri)
            results[t] = CrossFitResult(params.copy(), bias, x.copy(), model.responsibilities(ll, pri),
                                        [obj], False, [("init", obj)], [])
    log.debug("joint objective %s", trace)
    return LongFitResult(results, latents, trace, labels, template_fit, flags)


def long_segmentations(result: LongFitResult, dims, spacing, lesion_threshold=0.5):
    """Hard label volumes for every timepoint."""
    return [labels_from_responsibilities(r.resp, dims, spacing, lesion_threshold)
            for r in result.timepoints]
