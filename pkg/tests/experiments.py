"""Synthetic experiments shared by the acceptance tests and ad-hoc runs."""
import numpy as np

from longseg import metrics, synth
from longseg.fit_cross import FitOptions, fit_cross, labels_from_responsibilities, segment, structure_volumes
from longseg.fit_long import LongOptions, fit_longitudinal
from longseg.gmm import LesionPriorConfig
from longseg.volume import log_transform

STRUCTURES = ["csf", "gm", "wm", "deep_gm", "lesion"]


def fit_options(tol=1e-6, stiffness=10.0):
    lesion = LesionPriorConfig(synth.WM_CLASS, [-0.6, 1.0], 1.0, 50.0)
    return FitOptions(stiffness=stiffness, tol=tol, lesion=lesion)


def cross_and_long(spec, opts):
    """Volumes per timepoint from independent fits and from the joint fit."""
    scans, truth = synth.generate_subject(spec)
    atlas = synth.reference_atlas(spec.dims)
    logs = [log_transform(s) for s in scans]
    cross = [structure_volumes(segment(D, atlas, fit_cross(D, atlas, opts)), synth.CLASS_NAMES) for D in logs]
    res = fit_longitudinal(logs, atlas, LongOptions(cross=opts))
    long = [structure_volumes(labels_from_responsibilities(r.resp, D.dims, D.spacing), synth.CLASS_NAMES)
            for D, r in zip(logs, res.timepoints)]
    return cross, long, truth, res


def retest_pairs(seed, dims=(32, 32, 32)):
    """``[(structure, cross CoV, long CoV)]`` for one four-scan session."""
    spec = synth.SubjectSpec(dims=dims, mode="test_retest", times=[0.0, 0.02, 0.04, 0.06],
                             lesion_schedule=[0.01 * np.prod(dims)], anatomy_jitter=0.03, seed=seed)
    cross, long, _, _ = cross_and_long(spec, fit_options())
    return [(s, metrics.cov([v[s] for v in cross]), metrics.cov([v[s] for v in long])) for s in STRUCTURES]


def linear_ratios(seed, dims=(32, 32, 32), rate=-0.02, structure="wm"):
    """Residual-to-intercept ratios (cross, long) of a five-scan atrophy series."""
    times = [0.0, 1.0, 2.0, 3.0, 4.0]
    spec = synth.SubjectSpec(dims=dims, mode="linear_atrophy", times=times, rates={structure: rate},
                             anatomy_jitter=0.03, seed=seed)
    cross, long, _, _ = cross_and_long(spec, fit_options())
    ratio = lambda vols: metrics.linear_residual_ratio(metrics.VolumeSeries(structure, times, [v[structure] for v in vols]))
    return ratio(cross), ratio(long)


def cohort_effects(seed, n=15, dims=(16, 16, 16), structure="wm", rates=(-0.01, -0.04), rate_sd=0.005):
    """Welch and Cohen statistics of APC for a two-group cohort, per method."""
    times = [0.0, 1.0, 2.0]
    base = synth.SubjectSpec(dims=dims, times=times, anatomy_jitter=0.03)
    groups = [("slow", n, {structure: (rates[0], rate_sd)}), ("fast", n, {structure: (rates[1], rate_sd)})]
    plan = synth.generate_cohort(groups, base, seed)
    apcs = {"cross": {"slow": [], "fast": []}, "long": {"slow": [], "fast": []}}
    opts = fit_options(tol=1e-5)
    for sub in plan["subjects"]:
        spec = synth.SubjectSpec.from_dict(sub["spec"])
        cross, long, _, _ = cross_and_long(spec, opts)
        for method, vols in (("cross", cross), ("long", long)):
            series = metrics.VolumeSeries(structure, times, [v[structure] for v in vols])
            apcs[method][sub["group"]].append(metrics.apc(series))
    out = {}
    for method, g in apcs.items():
        w = metrics.welch_t(g["slow"], g["fast"])
        out[method] = {"p": w.p, "t": w.t, "d": metrics.cohens_d(g["slow"], g["fast"]),
                       "apc_slow": float(np.mean(g["slow"])), "apc_fast": float(np.mean(g["fast"]))}
    return out
