"""Command-line entry point: ``longseg {synth,fit,segment,eval,report}``.

Exit codes: 0 success, 2 input or configuration error, 3 numerical or fit
failure. All outputs of ``fit`` go to a run directory carrying a
reproducibility stamp (config hash, seed, version).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__, metrics, synth
from .atlas import TetMeshAtlas
from .config import RunConfig, load_config
from .errors import (ConfigError, DataError, DegenerateMeshError, FitError, FormatError, InputError,
                     LongsegError, NumericError, SpecError, UnsupportedError)
from .fit_cross import fit_cross, labels_from_responsibilities, segment, structure_volumes
from .fit_long import build_template, fit_longitudinal
from .volume import LabelVolume, log_transform, read_lseg, read_volume, write_lseg

EXIT_OK, EXIT_INPUT, EXIT_FIT = 0, 2, 3
INPUT_ERRORS = (InputError, ConfigError, SpecError, FormatError, DataError, UnsupportedError, OSError,
                json.JSONDecodeError, KeyError, ValueError)
FIT_ERRORS = (FitError, NumericError, DegenerateMeshError)

log = logging.getLogger("longseg")


def resolve_threads(value=None) -> int:
    """``--threads``, else ``LONGSEG_THREADS``, else the number of cores."""
    if value is None:
        env = os.environ.get("LONGSEG_THREADS")
        if env:
            try:
                value = int(env)
            except ValueError:
                raise ConfigError(f"LONGSEG_THREADS must be an integer, got {env!r}") from None
    if value is None:
        value = os.cpu_count() or 1
    if value < 1:
        raise ConfigError("thread count must be at least 1")
    return int(value)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _stamp(run_dir, cfg: RunConfig, command):
    _write_json(os.path.join(run_dir, "stamp.json"),
                {"command": command, "config_sha256": cfg.digest(), "seed": cfg.seed, "version": __version__,
                 "config": cfg.model_dump(mode="json")})


# ------------------------------------------------------------------------ synth


def cmd_synth(spec_path, out_dir) -> str:
    """Generate subjects described by a JSON spec; returns the manifest path.

    The JSON file holds one of ``subject`` (a subject spec), ``subjects`` (list of
    ``{id, group, spec}``) or ``cohort`` (``{groups, seed}`` plus ``base``).
    """
    with open(spec_path) as fh:
        spec = json.load(fh)
    if not isinstance(spec, dict):
        raise SpecError("spec must be a JSON object")
    extra = {"seed": None}
    if "cohort" in spec:
        cohort = spec["cohort"]
        base = synth.SubjectSpec.from_dict(spec.get("base", {}))
        groups = [(g[0], int(g[1]), {k: tuple(v) for k, v in g[2].items()}) for g in cohort["groups"]]
        plan = synth.generate_cohort(groups, base, int(cohort.get("seed", 0)))
        entries = plan["subjects"]
        extra["seed"] = plan["seed"]
    elif "subjects" in spec:
        entries = spec["subjects"]
    elif "subject" in spec:
        entries = [{"id": spec.get("id", "sub-000"), "group": spec.get("group", "all"), "spec": spec["subject"]}]
    else:
        raise SpecError("spec needs a 'subject', 'subjects' or 'cohort' entry")
    os.makedirs(out_dir, exist_ok=True)
    subjects = []
    for e in entries:
        sub_spec = synth.SubjectSpec.from_dict(dict(e["spec"]))
        entry = synth.write_subject(out_dir, e["id"], sub_spec)
        entry["group"] = e.get("group", "all")
        entry["seed"] = sub_spec.seed
        subjects.append(entry)
    manifest = {"class_names": list(synth.CLASS_NAMES), "subjects": subjects, **extra}
    path = os.path.join(out_dir, "manifest.json")
    synth.write_manifest(path, manifest)
    return path


# -------------------------------------------------------------------------- fit


def load_manifest(path):
    """Subjects of a cohort or single-subject manifest with absolute scan paths."""
    with open(path) as fh:
        man = json.load(fh)
    base = os.path.dirname(os.path.abspath(path))
    raw = man["subjects"] if "subjects" in man else [man]
    subjects = []
    for s in raw:
        scans = [os.path.join(base, p) for p in s["scans"]]
        times = [float(t) for t in s.get("times", range(len(scans)))]
        if len(times) != len(scans) or not scans:
            raise InputError(f"subject {s.get('id')}: times and scans must be non-empty and of equal length")
        labels = [os.path.join(base, p) for p in s.get("labels", [])]
        subjects.append({"id": str(s.get("id", "subject")), "group": str(s.get("group", "all")),
                         "times": times, "scans": scans, "labels": labels})
    ids = [s["id"] for s in subjects]
    if len(set(ids)) != len(ids):
        raise InputError("subject ids must be unique")
    return subjects, man.get("output_dir")


def _atlas_for(dims, cfg: RunConfig, atlas_path=None) -> TetMeshAtlas:
    if atlas_path:
        return TetMeshAtlas.load(atlas_path)
    return synth.reference_atlas(dims, grid_step=cfg.grid_step)


def _fit_subject(subject, mode, cfg: RunConfig, atlas_path):
    """Fit one subject; returns a picklable result record."""
    scans = [log_transform(read_volume(p)) for p in subject["scans"]]
    dims = scans[0].dims
    atlas = _atlas_for(dims, cfg, atlas_path)
    rec = {"id": subject["id"], "segs": [], "timepoints": [], "failure": None}
    t = None
    try:
        if mode == "cross":
            init = None
            if cfg.cross_init == "template":
                tfit = fit_cross(build_template(scans), atlas, cfg.fit_options())
                init = (tfit.params, tfit.bias, tfit.x_hat)
            for t, D in enumerate(scans):
                res = fit_cross(D, atlas, cfg.fit_options(), init=init)
                rec["segs"].append(segment(D, atlas, res, cfg.lesion_threshold).data)
                rec["timepoints"].append(_tp_report(res))
        else:
            res = fit_longitudinal(scans, atlas, cfg.long_options())
            for r in res.timepoints:
                lab = labels_from_responsibilities(r.resp, dims, scans[0].spacing, cfg.lesion_threshold)
                rec["segs"].append(lab.data)
                rec["timepoints"].append(_tp_report(r))
            rec["joint_objective_trace"] = list(res.joint_objective_trace)
            rec["step_labels"] = list(res.step_labels)
            rec["flags"] = list(res.flags)
            rec["P0"] = res.latents.theta0.strength.tolist()
    except FIT_ERRORS as exc:
        tp = getattr(exc, "timepoint", None)
        rec["failure"] = {"timepoint": tp if tp is not None else t, "error": f"{type(exc).__name__}: {exc}"}
    rec["spacing"] = list(scans[0].spacing)
    rec["class_names"] = list(atlas.class_names)
    return rec


def _tp_report(res):
    return {"objective_trace": list(res.objective_trace), "converged": bool(res.converged),
            "flags": list(res.flags), "means": res.params.means.tolist()}


def cmd_fit(mode, manifest_path, config_path=None, out_dir=None, threads=None, atlas_path=None) -> tuple:
    """Fit every subject of a manifest; returns ``(report path, exit code)``."""
    if mode not in ("cross", "long"):
        raise InputError(f"unknown fit mode {mode!r}")
    cfg = load_config(config_path)
    n_workers = resolve_threads(threads if threads is not None else cfg.threads)
    subjects, man_out = load_manifest(manifest_path)
    run_dir = out_dir or man_out
    if not run_dir:
        raise InputError("no output directory given")
    os.makedirs(run_dir, exist_ok=True)
    _stamp(run_dir, cfg, f"fit {mode}")

    jobs = [(s, mode, cfg, atlas_path) for s in subjects]
    if n_workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(n_workers, len(jobs))) as pool:
            records = list(pool.map(_fit_subject_args, jobs))
    else:
        records = [_fit_subject(*j) for j in jobs]

    vol_rows, seg_rows = [], []
    report = {"mode": mode, "version": __version__, "config_sha256": cfg.digest(),
              "hyperparameters": cfg.model_dump(mode="json"), "subjects": {}, "failures": []}
    for subject, rec in zip(subjects, records):
        sid = subject["id"]
        sdir = os.path.join(run_dir, sid)
        os.makedirs(sdir, exist_ok=True)
        entry = {k: v for k, v in rec.items() if k not in ("segs", "spacing", "class_names")}
        report["subjects"][sid] = entry
        if rec["failure"] is not None:
            report["failures"].append({"subject": sid, **rec["failure"]})
            continue
        names = rec["class_names"]
        per_tp = []
        for t, (time, labels) in enumerate(zip(subject["times"], rec["segs"])):
            seg = LabelVolume(labels, rec["spacing"], len(names))
            path = os.path.join(sdir, f"t{t}_{mode}.lseg")
            write_lseg(seg, path)
            seg_rows.append({"subject": sid, "timepoint": t, "time_years": time, "method": mode,
                             "path": os.path.relpath(path, run_dir)})
            vols = structure_volumes(seg, names)
            per_tp.append(vols)
            for st, v in vols.items():
                vol_rows.append({"subject": sid, "group": subject["group"], "structure": st, "time_years": time,
                                 "volume_mm3": v, "method": mode})
        cols = list(per_tp[0].keys())
        with open(os.path.join(sdir, f"volumes_{mode}.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["timepoint", "time_years"] + cols)
            for t, (time, vols) in enumerate(zip(subject["times"], per_tp)):
                w.writerow([t, repr(time)] + [repr(vols[c]) for c in cols])
    metrics.write_rows(os.path.join(run_dir, "volumes.csv"), vol_rows, metrics.VOLUME_COLUMNS)
    metrics.write_rows(os.path.join(run_dir, "segmentations.csv"), seg_rows,
                       ["subject", "timepoint", "time_years", "method", "path"])
    report_path = os.path.join(run_dir, "fit_report.json")
    _write_json(report_path, report)
    return report_path, (EXIT_FIT if report["failures"] else EXIT_OK)


def _fit_subject_args(args):
    return _fit_subject(*args)


# ---------------------------------------------------------------------- segment


def cmd_segment(scan_path, out_path, config_path=None, atlas_path=None) -> dict:
    """Cross-sectional segmentation of one scan; returns structure volumes."""
    cfg = load_config(config_path)
    D = log_transform(read_volume(scan_path))
    atlas = _atlas_for(D.dims, cfg, atlas_path)
    res = fit_cross(D, atlas, cfg.fit_options())
    seg = segment(D, atlas, res, cfg.lesion_threshold)
    write_lseg(seg, out_path)
    return structure_volumes(seg, atlas.class_names)


# ------------------------------------------------------------------------- eval


def cmd_eval(volume_paths, out_dir, truth_manifest=None, segs_csv=None) -> list:
    """Metric tables from volume CSVs; returns the written paths."""
    rows = metrics.read_volume_rows(volume_paths)
    os.makedirs(out_dir, exist_ok=True)
    written = []

    def emit(name, table):
        data, cols = table
        path = os.path.join(out_dir, name)
        metrics.write_rows(path, data, cols)
        written.append(path)

    emit("cov_table.csv", metrics.cov_table(rows))
    emit("residual_ratio_table.csv", metrics.residual_ratio_table(rows))
    if len({r["group"] for r in rows}) >= 2:
        emit("group_table.csv", metrics.group_table(rows))
    if truth_manifest and segs_csv:
        emit("dice_table.csv", _dice_table(truth_manifest, segs_csv))
    return written


def _dice_table(truth_manifest, segs_csv):
    subjects, _ = load_manifest(truth_manifest)
    with open(truth_manifest) as fh:
        names = json.load(fh).get("class_names", [])
    truth = {s["id"]: s["labels"] for s in subjects}
    base = os.path.dirname(os.path.abspath(segs_csv))
    out = []
    with open(segs_csv, newline="") as fh:
        for r in csv.DictReader(fh):
            labels = truth.get(r["subject"])
            if not labels:
                raise InputError(f"no truth labels for subject {r['subject']}")
            ref = read_lseg(labels[int(r["timepoint"])])
            seg = read_lseg(os.path.join(base, r["path"]))
            for k in range(seg.lesion_label + 1):
                name = "lesion" if k == seg.lesion_label else (names[k] if k < len(names) else f"class{k}")
                out.append({"subject": r["subject"], "timepoint": int(r["timepoint"]), "method": r["method"],
                            "structure": name, "dice": metrics.dice(ref, seg, k)})
    return out, ["subject", "timepoint", "method", "structure", "dice"]


# ----------------------------------------------------------------------- report


def cmd_report(run_dir) -> str:
    """Plain-text summary of a run directory; also written to ``report.txt``."""
    with open(os.path.join(run_dir, "fit_report.json")) as fh:
        rep = json.load(fh)
    hp = rep["hyperparameters"]
    lines = [f"mode: {rep['mode']}", f"version: {rep['version']}", f"config: {rep['config_sha256']}",
             f"K={hp['K']} K0={hp['K0']} K1={hp['K1']} n_iter={hp['n_iter']}"]
    for sid, s in sorted(rep["subjects"].items()):
        if s.get("failure"):
            lines.append(f"{sid}: FAILED at timepoint {s['failure']['timepoint']}: {s['failure']['error']}")
            continue
        conv = sum(tp["converged"] for tp in s["timepoints"])
        final = [tp["objective_trace"][-1] for tp in s["timepoints"]]
        lines.append(f"{sid}: {len(final)} timepoints, {conv} converged, final objectives "
                     + " ".join(f"{v:.3f}" for v in final))
    vol_path = os.path.join(run_dir, "volumes.csv")
    if os.path.exists(vol_path):
        rows = metrics.read_volume_rows([vol_path])
        by = {}
        for r in rows:
            by.setdefault(r["structure"], []).append(r["volume_mm3"])
        lines.append("mean volumes (mm^3): " + ", ".join(f"{k}={np.mean(v):.1f}" for k, v in by.items()))
    text = "\n".join(lines) + "\n"
    with open(os.path.join(run_dir, "report.txt"), "w") as fh:
        fh.write(text)
    return text


# ------------------------------------------------------------------------- main


def build_parser():
    p = argparse.ArgumentParser(prog="longseg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic subjects")
    s.add_argument("spec", help="subject or cohort spec JSON")
    s.add_argument("out_dir")

    f = sub.add_parser("fit", help="fit subjects listed in a manifest")
    f.add_argument("mode", choices=["cross", "long"])
    f.add_argument("manifest", help="manifest.json written by synth")
    f.add_argument("--config", help="run config JSON")
    f.add_argument("--out", help="run directory (default: the manifest's output_dir)")
    f.add_argument("--atlas", help="atlas JSON; default is the built-in phantom atlas")
    f.add_argument("--threads", type=int, help="worker processes; overrides LONGSEG_THREADS")

    g = sub.add_parser("segment", help="segment one scan")
    g.add_argument("scan", help="LVOL or NIfTI-1 scan")
    g.add_argument("out", help="output LSEG path")
    g.add_argument("--config")
    g.add_argument("--atlas")
    g.add_argument("--threads", type=int)

    e = sub.add_parser("eval", help="reliability and group statistics from volume tables")
    e.add_argument("volumes", nargs="+", help="volumes.csv files of one or more runs")
    e.add_argument("--out", required=True)
    e.add_argument("--truth", help="synthetic manifest with truth labels")
    e.add_argument("--segs", help="segmentations.csv of a run, for Dice")

    r = sub.add_parser("report", help="summarize a run directory")
    r.add_argument("run_dir")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            print(cmd_synth(args.spec, args.out_dir))
        elif args.command == "fit":
            path, code = cmd_fit(args.mode, args.manifest, args.config, args.out, args.threads, args.atlas)
            print(path)
            if code != EXIT_OK:
                print("fit failed; see the failures list in the report", file=sys.stderr)
            return code
        elif args.command == "segment":
            resolve_threads(args.threads)
            vols = cmd_segment(args.scan, args.out, args.config, args.atlas)
            print(json.dumps(vols, sort_keys=True))
        elif args.command == "eval":
            for path in cmd_eval(args.volumes, args.out, args.truth, args.segs):
                print(path)
        elif args.command == "report":
            print(cmd_report(args.run_dir), end="")
    except FIT_ERRORS as exc:
        print(f"longseg: fit failed: {exc}", file=sys.stderr)
        return EXIT_FIT
    except INPUT_ERRORS as exc:
        print(f"longseg: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except LongsegError as exc:
        print(f"longseg: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
