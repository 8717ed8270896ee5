"""Synthetic longitudinal subjects with known anatomy, intensities and bias.

A phantom brain is a stack of ellipsoidal layers. Painting claims voxels
layer by layer in priority order; a layer with a volume-change rate claims
exactly ``round(v0 * (1 + rate * t))`` voxels ranked by a signed distance, so
atrophy moves structure boundaries coherently. Lesions then replace the white
matter voxels closest to a few seeded centers.

Log intensities are ``class mean + bias + N(0, noise^2)``; stored scans hold
``exp`` of that.
"""
from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import gmm
from .atlas import TetMeshAtlas, atlas_from_labels
from .errors import SpecError
from .volume import LabelVolume, Volume, write_lseg, write_lvol

CLASS_NAMES = ["background", "csf", "gm", "wm", "deep_gm"]
WM_CLASS = 3
LESION_LABEL = len(CLASS_NAMES)
MODES = ("test_retest", "linear_atrophy", "lesion_evolution")

# (layer name, class, center offset, radii) in units of half the field of view;
# listed from highest to lowest painting priority
LAYERS = [
    ("deep_gm", 4, (0.22, 0.04, 0.0), (0.26, 0.22, 0.24)),
    ("ventricles", 1, (-0.16, 0.0, 0.02), (0.14, 0.10, 0.22)),
    ("wm", 3, (0.0, 0.0, 0.0), (0.50, 0.56, 0.46)),
    ("gm", 2, (0.0, 0.0, 0.0), (0.72, 0.80, 0.68)),
    ("csf", 1, (0.0, 0.0, 0.0), (0.86, 0.94, 0.82)),
]

DEFAULT_MEANS = [
    # T1-like, FLAIR-like log intensities per class, lesion last
    [1.0, 1.0],
    [2.0, 1.6],
    [3.0, 3.0],
    [3.6, 2.6],
    [3.25, 2.85],
    [2.9, 3.8],
]


@dataclass
class SubjectSpec:
    dims: tuple = (32, 32, 32)
    spacing: tuple = (1.0, 1.0, 1.0)
    mode: str = "test_retest"
    times: list = field(default_factory=lambda: [0.0])
    class_means: list = field(default_factory=lambda: copy.deepcopy(DEFAULT_MEANS))
    noise_sd: float = 0.12
    bias_degree: int = 2
    bias_amplitude: float = 0.08
    rates: dict = field(default_factory=dict)
    lesion_schedule: list = field(default_factory=list)
    n_lesions: int = 2
    anatomy_jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.times = [float(t) for t in self.times]
        if self.mode not in MODES:
            raise SpecError(f"mode must be one of {MODES}, got {self.mode!r}")
        if len(self.times) < 1:
            raise SpecError("at least one timepoint is required")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise SpecError("acquisition times must be strictly increasing")
        if len(self.dims) != 3 or min(self.dims) < 8:
            raise SpecError("dims must be three sizes of at least 8")
        means = np.asarray(self.class_means, float)
        if means.ndim != 2 or means.shape[0] != len(CLASS_NAMES) + 1:
            raise SpecError(f"class_means needs {len(CLASS_NAMES) + 1} rows (classes then lesion)")
        if self.noise_sd < 0 or self.bias_amplitude < 0:
            raise SpecError("noise and bias amplitudes must be non-negative")
        names = {layer[0] for layer in LAYERS}
        for name, rate in self.rates.items():
            if name not in names:
                raise SpecError(f"unknown structure {name!r} in rates")
            if not np.isfinite(rate):
                raise SpecError("rates must be finite")
            if any(1.0 + rate * (t - self.times[0]) <= 0 for t in self.times):
                raise SpecError(f"rate {rate} for {name} gives a non-positive volume")
        if self.lesion_schedule and len(self.lesion_schedule) not in (1, self.n_timepoints):
            raise SpecError("lesion_schedule needs one entry or one per timepoint")
        if any(v < 0 for v in self.lesion_schedule):
            raise SpecError("lesion volumes must be non-negative")

    @property
    def n_timepoints(self):
        return len(self.times)

    @property
    def n_channels(self):
        return len(self.class_means[0])

    def to_dict(self):
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["spacing"] = list(self.spacing)
        return d

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(**d)
        except TypeError as exc:
            raise SpecError(str(exc)) from exc


@dataclass
class GroundTruth:
    labels: list
    volumes: list  # one dict per timepoint, mm^3 per class + lesion + ICV
    bias_fields: list  # (I, N) log-domain bias per timepoint
    deformations: list  # per timepoint: voxel count claimed by each layer
    class_names: list = field(default_factory=lambda: list(CLASS_NAMES))


def _distance_fields(dims, jitter):
    """Approximate signed distance (voxels) of every layer's ellipsoid surface."""
    half = np.asarray(dims, float) / 2.0
    center = (np.asarray(dims, float) - 1) / 2.0
    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=float) for n in dims], indexing="ij"), axis=-1)
    fields = {}
    for i, (name, _, offset, radii) in enumerate(LAYERS):
        c = center + np.asarray(offset) * half
        r = np.asarray(radii) * half * jitter[i]
        rho = np.sqrt(np.sum(((grid - c) / r) ** 2, axis=-1))
        fields[name] = (rho - 1.0) * r.min()
    return fields


def paint_anatomy(dims, fields, targets=None):
    """Label map from layer distance fields; ``targets`` fixes layer voxel counts."""
    targets = targets or {}
    n = int(np.prod(dims))
    labels = np.zeros(n, dtype=np.int64)
    free = np.ones(n, dtype=bool)
    claimed = {}
    for name, cls, _, _ in LAYERS:
        sd = fields[name].ravel(order="F")
        idx = np.flatnonzero(free)
        if name in targets:
            count = int(targets[name])
            if count > idx.size:
                raise SpecError(f"structure {name} cannot grow to {count} voxels")
            order = idx[np.argsort(sd[idx], kind="stable")]
            take = order[:count]
        else:
            take = idx[sd[idx] < 0]
        labels[take] = cls
        free[take] = False
        claimed[name] = int(take.size)
    return labels, claimed


def _paint_lesions(labels, dims, centers, count):
    if count <= 0:
        return labels
    wm = np.flatnonzero(labels == WM_CLASS)
    if count > wm.size:
        raise SpecError("lesion load exceeds white matter volume")
    pts = np.stack(np.unravel_index(wm, dims, order="F"), axis=1).astype(float)
    dist = np.min(np.linalg.norm(pts[:, None, :] - centers[None, :, :], axis=2), axis=1)
    take = wm[np.argsort(dist, kind="stable")[:count]]
    out = labels.copy()
    out[take] = LESION_LABEL
    return out


def _volumes(labels, spacing):
    voxel = float(np.prod(spacing))
    counts = np.bincount(labels, minlength=LESION_LABEL + 1)
    out = {name: float(counts[k]) * voxel for k, name in enumerate(CLASS_NAMES)}
    out["lesion"] = float(counts[LESION_LABEL]) * voxel
    out["ICV"] = float(counts[1:].sum()) * voxel
    return out


def _random_bias(rng, dims, degree, amplitude, n_channels):
    p = (degree + 1) ** 3
    coeffs = np.zeros((p, n_channels))
    if amplitude > 0 and degree > 0:
        coeffs[1:] = rng.normal(0.0, amplitude, size=(p - 1, n_channels))
    # column 0 (constant) stays zero: global offsets belong to the class means
    return gmm.bias_basis(dims, degree) @ coeffs


def generate_subject(spec: SubjectSpec):
    """Return ``(scans, truth)``; scans hold raw (exponentiated) intensities."""
    rng = np.random.default_rng(spec.seed)
    dims = spec.dims
    jitter = 1.0 + spec.anatomy_jitter * rng.standard_normal(len(LAYERS))
    if np.any(jitter <= 0.2):
        raise SpecError("anatomy_jitter too large")
    fields = _distance_fields(dims, jitter)
    _, base_counts = paint_anatomy(dims, fields)

    # lesion centers inside white matter, away from deep structures
    base_labels, _ = paint_anatomy(dims, fields)
    wm_idx = np.flatnonzero(base_labels == WM_CLASS)
    n_centers = max(1, spec.n_lesions)
    pick = rng.choice(wm_idx, size=n_centers, replace=False) if wm_idx.size else np.zeros(0, int)
    centers = np.stack(np.unravel_index(pick, dims, order="F"), axis=1).astype(float)

    schedule = list(spec.lesion_schedule)
    if len(schedule) == 1:
        schedule = schedule * spec.n_timepoints
    means = np.asarray(spec.class_means, float)
    t0 = spec.times[0]
    scans, labels_out, vols, biases, defs = [], [], [], [], []
    for ti, t in enumerate(spec.times):
        targets = {}
        if spec.mode == "linear_atrophy" or spec.rates:
            for name, rate in spec.rates.items():
                targets[name] = int(round(base_counts[name] * (1.0 + rate * (t - t0))))
                if targets[name] <= 0:
                    raise SpecError(f"structure {name} vanishes at t={t}")
        labels, claimed = paint_anatomy(dims, fields, targets)
        count = int(schedule[ti]) if schedule else 0
        labels = _paint_lesions(labels, dims, centers, count)
        bias = _random_bias(rng, dims, spec.bias_degree, spec.bias_amplitude, spec.n_channels)
        noise = rng.standard_normal((labels.size, spec.n_channels)) * spec.noise_sd
        log_int = means[labels] + bias + noise
        data = np.exp(log_int).reshape(tuple(dims) + (spec.n_channels,), order="F")
        scans.append(Volume(data, spec.spacing))
        labels_out.append(LabelVolume(labels.reshape(dims, order="F"), spec.spacing, LESION_LABEL))
        vols.append(_volumes(labels, spec.spacing))
        biases.append(bias)
        defs.append(claimed)
    return scans, GroundTruth(labels_out, vols, biases, defs)


def reference_atlas(dims, grid_step=None, sigma=1.0, lesion_baseline=0.02) -> TetMeshAtlas:
    """Atlas built from the unjittered phantom anatomy."""
    fields = _distance_fields(dims, np.ones(len(LAYERS)))
    labels, _ = paint_anatomy(dims, fields)
    step = grid_step if grid_step is not None else max(2.0, min(dims) / 8.0)
    return atlas_from_labels(labels.reshape(dims, order="F"), len(CLASS_NAMES), step, sigma=sigma,
                             lesion_baseline=lesion_baseline, wm_class=WM_CLASS,
                             class_names=CLASS_NAMES)


# --------------------------------------------------------------------------- cohorts


def generate_cohort(group_specs, base_spec: SubjectSpec, seed: int):
    """Subject specs for a group study.

    ``group_specs`` items are ``(name, n, {structure: (mean_rate, sd_rate)})``.
    Returns a manifest dict whose ``subjects`` entries carry full subject specs.
    """
    rng = np.random.default_rng(seed)
    subjects = []
    for name, n, dist in group_specs:
        if n < 2:
            raise SpecError(f"group {name} needs at least 2 subjects")
        for j in range(n):
            rates = {s: float(rng.normal(mu, sd)) for s, (mu, sd) in sorted(dist.items())}
            sub = copy.deepcopy(base_spec.to_dict())
            sub.update(mode="linear_atrophy", rates=rates, seed=int(rng.integers(0, 2**31 - 1)))
            SubjectSpec.from_dict(sub)
            subjects.append({"id": f"{name}-{j:03d}", "group": name, "spec": sub})
    return {"seed": int(seed), "groups": [g[0] for g in group_specs], "subjects": subjects}


def write_subject(out_dir, subject_id, spec: SubjectSpec):
    """Generate one subject and write its scans, labels and truth table.

    Returns the manifest entry for the subject.
    """
    scans, truth = generate_subject(spec)
    sdir = os.path.join(out_dir, subject_id)
    os.makedirs(sdir, exist_ok=True)
    entry = {"id": subject_id, "times": list(spec.times), "scans": [], "labels": [],
             "mode": spec.mode, "rates": dict(spec.rates)}
    for t, (scan, lab) in enumerate(zip(scans, truth.labels)):
        scan_path = os.path.join(sdir, f"t{t}.lvol")
        lab_path = os.path.join(sdir, f"t{t}_truth.lseg")
        write_lvol(scan, scan_path)
        write_lseg(lab, lab_path)
        entry["scans"].append(os.path.relpath(scan_path, out_dir))
        entry["labels"].append(os.path.relpath(lab_path, out_dir))
    truth_path = os.path.join(sdir, "truth_volumes.csv")
    names = CLASS_NAMES + ["lesion", "ICV"]
    with open(truth_path, "w") as fh:
        fh.write("subject,timepoint,time_years," + ",".join(names) + "\n")
        for t, (time, vols) in enumerate(zip(spec.times, truth.volumes)):
            fh.write(f"{subject_id},{t},{time!r}," + ",".join(repr(vols[n]) for n in names) + "\n")
    entry["truth_csv"] = os.path.relpath(truth_path, out_dir)
    return entry


def write_manifest(path, manifest):
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
