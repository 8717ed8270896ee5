"""Cross-sectional model fitting and segmentation.

The fitted objective for one scan is

    log p(D | priors(x), theta, C) - K * sum_d U_d(x, anchor)
        + log p(theta_lesion | theta_wm) [+ NIW coupling terms]

maximized by coordinate ascent over (theta, C, x) in the fixed order
E-step, M-step, bias, mesh. The longitudinal engine reuses the same machinery
with a different anchor, stiffness and intensity prior.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import gmm
from .atlas import DeformationPrior, Rasterizer, TetMeshAtlas
from .errors import DegenerateMeshError, EmptyClassError, FitError, GradientUndefinedError
from .gmm import BiasField, GaussianParams, LesionPriorConfig, NIWPrior
from .lbfgs import minimize_lbfgs
from .volume import LabelVolume, Volume

log = logging.getLogger(__name__)


@dataclass
class FitOptions:
    stiffness: float = 10.0
    bias_degree: int = 2
    lesion: LesionPriorConfig | None = None
    max_outer: int = 30
    tol: float = 1e-6
    mesh_memory: int = 10
    mesh_max_iter: int = 20
    mesh_initial_step: float = 0.5
    em_iters: int = 10
    # the constant bias function duplicates the class means; keep it at zero
    bias_constant: bool = False


@dataclass
class CrossFitResult:
    params: GaussianParams
    bias: BiasField
    x_hat: np.ndarray
    resp: np.ndarray
    objective_trace: list
    converged: bool
    step_trace: list = field(default_factory=list)
    flags: list = field(default_factory=list)

    @property
    def objective(self):
        return self.objective_trace[-1]

    def to_dict(self):
        """Checkpoint without responsibilities."""
        return {
            "params": self.params.to_dict(),
            "bias": self.bias.to_dict(),
            "x_hat": self.x_hat.tolist(),
            "objective_trace": list(self.objective_trace),
            "converged": bool(self.converged),
            "flags": list(self.flags),
        }


class TimepointModel:
    """Objective pieces for one scan, with a fixed anchor mesh and intensity prior."""

    def __init__(self, D: Volume, atlas: TetMeshAtlas, anchor, stiffness, options: FitOptions,
                 intensity_prior: NIWPrior | None = None, rasterizer: Rasterizer | None = None):
        self.dims = D.dims
        self.y = D.voxels()
        self.atlas = atlas
        self.anchor = np.asarray(anchor, dtype=np.float64)
        self.stiffness = float(stiffness)
        self.options = options
        self.intensity_prior = intensity_prior
        self.rasterizer = rasterizer if rasterizer is not None else Rasterizer(atlas, self.dims)
        self.wm = None if options.lesion is None else options.lesion.wm_class
        self.deformation = DeformationPrior(self.anchor, atlas.tets, atlas.nodes_ref)

    # -- pieces --------------------------------------------------------------
    def bias_values(self, bias: BiasField):
        return bias.evaluate(self.dims)

    def loglik(self, params, bias):
        return gmm.log_likelihoods(self.y, params, self.bias_values(bias))

    def priors(self, x):
        return self.rasterizer.priors(x)

    def full_prior(self, params):
        return gmm.with_lesion_prior(self.intensity_prior, params, self.options.lesion)

    def prior_term(self, params):
        return self.full_prior(params).log_density(params)

    def deformation_term(self, x):
        if self.stiffness == 0:
            return 0.0
        return -self.stiffness * self.deformation.energy(x)

    @staticmethod
    def log_evidence(ll, pri):
        m = ll.max(axis=1)
        s = np.sum(pri * np.exp(ll - m[:, None]), axis=1)
        with np.errstate(divide="ignore"):
            return float(np.sum(m + np.log(s)))

    @staticmethod
    def responsibilities(ll, pri):
        with np.errstate(divide="ignore"):
            joint = np.log(pri) + ll
        joint -= joint.max(axis=1, keepdims=True)
        r = np.exp(joint)
        return r / r.sum(axis=1, keepdims=True)

    def objective(self, params, bias, x, ll=None, pri=None):
        ll = self.loglik(params, bias) if ll is None else ll
        pri = self.priors(x) if pri is None else pri
        return self.log_evidence(ll, pri) + self.deformation_term(x) + self.prior_term(params)

    # -- mesh step -------------------------------------------------------------
    def mesh_function(self, ll):
        """``x -> (-objective_mesh_part, -gradient)`` for fixed intensities."""
        m = ll.max(axis=1)
        scaled = np.exp(ll - m[:, None])
        m_sum = float(np.sum(m))

        def fun(x):
            if self.stiffness > 0:
                try:
                    e, ge = self.deformation.energy_and_gradient(x)
                except GradientUndefinedError:
                    return np.inf, None
            try:
                located = self.rasterizer.locate(x)
            except DegenerateMeshError:
                return np.inf, None
            pri = self.rasterizer.priors(x, located)
            s = np.sum(pri * scaled, axis=1)
            if np.any(s <= 0):
                return np.inf, None
            value = m_sum + float(np.sum(np.log(s)))
            grad = self.rasterizer.contract_gradient(scaled / s[:, None], located)
            if self.stiffness > 0:
                value -= self.stiffness * e
                grad = grad - self.stiffness * ge
            return -value, -grad

        return fun


def _m_step(model: TimepointModel, y_corr, resp, params, obj_prev, bias, x, pri, tol_abs):
    """Intensity update; returns ``(params, objective, loglik, flags)``.

    The lesion prior depends on white-matter parameters, so the plain update
    can lower the objective; in that case white matter is held fixed, which
    makes the remaining block updates exact and the step an ascent.
    """
    stats = gmm.class_statistics(y_corr, resp)
    anat_prior = model.intensity_prior
    flags = []
    try:
        first, empty = gmm.update_from_statistics(stats, anat_prior, params)
        full_prior = model.full_prior(first)
        cand, empty2 = gmm.update_from_statistics(stats, full_prior, params)
    except EmptyClassError as exc:  # pragma: no cover - previous is always given
        raise FitError(str(exc)) from exc
    if empty or empty2:
        flags.append(f"empty classes kept: {sorted(set(empty) | set(empty2))}")
    ll = model.loglik(cand, bias)
    obj = model.log_evidence(ll, pri) + model.deformation_term(x) + model.prior_term(cand)
    if obj >= obj_prev - tol_abs or model.wm is None:
        return cand, obj, ll, flags
    keep = [k for k in range(params.n_classes) if k != model.wm]
    held = gmm.GaussianParams(params.means.copy(), params.covs.copy())
    alt, _ = gmm.update_from_statistics(stats, model.full_prior(held), params, classes=keep)
    ll_alt = model.loglik(alt, bias)
    obj_alt = model.log_evidence(ll_alt, pri) + model.deformation_term(x) + model.prior_term(alt)
    flags.append("white matter held for lesion prior")
    if obj_alt >= obj:
        return alt, obj_alt, ll_alt, flags
    return cand, obj, ll, flags


def run_coordinate_ascent(model: TimepointModel, params: GaussianParams, bias: BiasField, x,
                          options: FitOptions | None = None) -> CrossFitResult:
    """Coordinate ascent from a given starting point."""
    opts = options or model.options
    x = np.asarray(x, dtype=np.float64).copy()
    ll = model.loglik(params, bias)
    pri = model.priors(x)
    obj = model.log_evidence(ll, pri) + model.deformation_term(x) + model.prior_term(params)
    if not np.isfinite(obj):
        raise FitError("initial objective is not finite")
    trace = [obj]
    steps = [("init", obj)]
    flags = []
    converged = False
    for it in range(opts.max_outer):
        obj_start = obj
        for _ in range(max(1, opts.em_iters)):
            obj_em = obj
            tol_abs = 1e-8 * abs(obj)
            resp = model.responsibilities(ll, pri)

            y_corr = model.y - model.bias_values(bias)
            params, obj, ll, mflags = _m_step(model, y_corr, resp, params, obj, bias, x, pri, tol_abs)
            flags.extend(f"iter {it}: {f}" for f in mflags)
            steps.append(("intensity", obj))

            new_bias = gmm.update_bias(model.y, resp, params, opts.bias_degree, opts.bias_constant,
                                       model.dims)
            ll_b = model.loglik(params, new_bias)
            obj_b = model.log_evidence(ll_b, pri) + model.deformation_term(x) + model.prior_term(params)
            if obj_b >= obj - 1e-8 * abs(obj):
                bias, ll, obj = new_bias, ll_b, obj_b
            else:
                flags.append(f"iter {it}: bias step rejected")
            steps.append(("bias", obj))
            if obj - obj_em <= opts.tol * abs(obj_em):
                break

        if opts.mesh_max_iter > 0:
            fun = model.mesh_function(ll)
            res = minimize_lbfgs(fun, x, memory=opts.mesh_memory, max_iter=opts.mesh_max_iter,
                                 initial_step=opts.mesh_initial_step)
            x = res.x  # never worse than the starting point
            pri = model.priors(x)
            obj = model.log_evidence(ll, pri) + model.deformation_term(x) + model.prior_term(params)
            steps.append(("mesh", obj))

        trace.append(obj)
        gain = obj - obj_start
        log.debug("outer %d objective %.6f gain %.3e", it, obj, gain)
        if gain < -1e-8 * abs(obj_start):
            raise FitError(f"objective decreased at outer iteration {it}", trace)
        if gain <= opts.tol * abs(obj_start):
            converged = True
            break
    resp = model.responsibilities(ll, pri)
    return CrossFitResult(params, bias, x, resp, trace, converged, steps, flags)


def initial_parameters(model: TimepointModel, x) -> GaussianParams:
    """Intensity parameters from atlas priors alone (no likelihood)."""
    pri = model.priors(x)
    stats = gmm.class_statistics(model.y, pri)
    try:
        first, _ = gmm.update_from_statistics(stats, model.intensity_prior, None)
    except EmptyClassError as exc:
        raise FitError(f"atlas gives no prior mass to classes {exc.class_ids}") from exc
    params, _ = gmm.update_from_statistics(stats, model.full_prior(first), first)
    return params


def fit_cross(D: Volume, atlas: TetMeshAtlas, options: FitOptions | None = None,
              init: tuple | None = None) -> CrossFitResult:
    """Fit the simplified model to one log-intensity scan.

    Parameters
    ----------
    D : Volume
        Log-intensity scan.
    atlas : TetMeshAtlas
        Atlas in register with ``D``.
    options : FitOptions, optional
    init : tuple, optional
        Starting point ``(params, bias, x)``. By default the mesh starts at the
        reference positions, the bias at zero and the intensities at the
        atlas-weighted statistics of ``D``.
    """
    opts = options or FitOptions()
    model = TimepointModel(D, atlas, atlas.nodes_ref, opts.stiffness, opts)
    if init is None:
        x0 = atlas.nodes_ref.copy()
        params = initial_parameters(model, x0)
        bias = BiasField.zeros(opts.bias_degree, D.channels)
    else:
        params, bias, x0 = init
        params = params.copy()
        bias = BiasField(bias.degree, bias.coeffs.copy())
    return run_coordinate_ascent(model, params, bias, x0, opts)


def segment(D: Volume, atlas: TetMeshAtlas, fit: CrossFitResult, lesion_threshold=0.5) -> LabelVolume:
    """Hard labels from the fitted responsibilities.

    Anatomical label is the arg-max over anatomical classes (lowest index on
    ties); voxels whose lesion responsibility exceeds the threshold get the
    lesion label ``K``.
    """
    return labels_from_responsibilities(fit.resp, D.dims, D.spacing, lesion_threshold)


def labels_from_responsibilities(resp, dims, spacing, lesion_threshold=0.5) -> LabelVolume:
    resp = np.asarray(resp)
    k = resp.shape[1] - 1
    labels = np.argmax(resp[:, :k], axis=1)
    labels[resp[:, k] > lesion_threshold] = k
    return LabelVolume(labels.reshape(dims, order="F"), spacing, k)


def structure_volumes(seg: LabelVolume, class_names=None) -> dict:
    """Volume in mm^3 per class, the lesion, and ICV (all non-background)."""
    voxel = float(np.prod(seg.spacing))
    counts = np.bincount(seg.data.ravel(), minlength=seg.lesion_label + 1)
    names = list(class_names) if class_names else [f"class{k}" for k in range(seg.lesion_label)]
    out = {names[k]: float(counts[k]) * voxel for k in range(seg.lesion_label)}
    out["lesion"] = float(counts[seg.lesion_label]) * voxel
    out["ICV"] = float(counts[1:].sum()) * voxel
    return out
