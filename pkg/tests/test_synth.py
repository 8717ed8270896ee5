import json

import numpy as np
import pytest

from longseg import synth
from longseg.errors import SpecError
from longseg.fit_cross import structure_volumes
from longseg.metrics import cohens_d
from longseg.volume import read_lseg, read_lvol

SMALL = (16, 16, 16)


def test_retest_without_noise_is_identical():
    spec = synth.SubjectSpec(dims=SMALL, times=[0.0, 0.01], noise_sd=0.0, bias_amplitude=0.0, seed=3)
    scans, _ = synth.generate_subject(spec)
    assert np.array_equal(scans[0].data, scans[1].data)


def test_linear_atrophy_volume_ratio():
    spec = synth.SubjectSpec(dims=(24, 24, 24), mode="linear_atrophy", times=[0.0, 1.0], rates={"wm": -0.02},
                             seed=4)
    _, truth = synth.generate_subject(spec)
    v0, v1 = truth.volumes[0]["wm"], truth.volumes[1]["wm"]
    assert abs(v1 - 0.98 * v0) <= 1.0


def test_empty_lesion_schedule_has_no_lesions():
    spec = synth.SubjectSpec(dims=SMALL, mode="lesion_evolution", times=[0.0, 1.0, 2.0], seed=5)
    _, truth = synth.generate_subject(spec)
    assert all(v["lesion"] == 0.0 for v in truth.volumes)
    assert all(not np.any(lab.data == synth.LESION_LABEL) for lab in truth.labels)


def test_lesion_schedule_is_followed():
    spec = synth.SubjectSpec(dims=SMALL, mode="lesion_evolution", times=[0.0, 1.0], lesion_schedule=[10, 25],
                             seed=6)
    _, truth = synth.generate_subject(spec)
    assert [v["lesion"] for v in truth.volumes] == [10.0, 25.0]


def test_truth_volumes_match_painted_labels():
    spec = synth.SubjectSpec(dims=SMALL, spacing=(1.0, 1.0, 2.0), lesion_schedule=[12], seed=7)
    _, truth = synth.generate_subject(spec)
    for lab, vols in zip(truth.labels, truth.volumes):
        assert structure_volumes(lab, synth.CLASS_NAMES) == vols


def test_generation_is_deterministic():
    spec = synth.SubjectSpec(dims=SMALL, times=[0.0, 0.5], seed=8)
    a, _ = synth.generate_subject(spec)
    b, _ = synth.generate_subject(spec)
    assert all(x == y for x, y in zip(a, b))


def test_spec_validation():
    with pytest.raises(SpecError):
        synth.SubjectSpec(mode="bogus")
    with pytest.raises(SpecError):
        synth.SubjectSpec(times=[1.0, 0.5])
    with pytest.raises(SpecError):
        synth.SubjectSpec(times=[0.0, 10.0], rates={"wm": -0.2})
    with pytest.raises(SpecError):
        synth.SubjectSpec(rates={"cortex": 0.1})
    with pytest.raises(SpecError):
        synth.SubjectSpec.from_dict({"colour": 3})


def test_cohort_manifest_is_reproducible():
    base = synth.SubjectSpec(dims=SMALL, times=[0.0, 1.0])
    groups = [("a", 3, {"wm": (-0.01, 0.005)}), ("b", 3, {"wm": (-0.04, 0.005)})]
    m1 = synth.generate_cohort(groups, base, 11)
    m2 = synth.generate_cohort(groups, base, 11)
    assert json.dumps(m1, sort_keys=True) == json.dumps(m2, sort_keys=True)
    assert [s["group"] for s in m1["subjects"]] == ["a"] * 3 + ["b"] * 3


def _true_apcs(manifest, group):
    # linear trajectories: true APC is 100 times the sampled rate
    return [100 * s["spec"]["rates"]["wm"] for s in manifest["subjects"] if s["group"] == group]


def test_identical_groups_have_small_effect():
    base = synth.SubjectSpec(dims=SMALL, times=[0.0, 1.0])
    groups = [("a", 20, {"wm": (-0.02, 0.005)}), ("b", 20, {"wm": (-0.02, 0.005)})]
    ds = []
    for seed in range(20):
        m = synth.generate_cohort(groups, base, seed)
        ds.append(cohens_d(_true_apcs(m, "a"), _true_apcs(m, "b")))
    ds = np.abs(ds)
    assert np.mean(ds) < 0.5
    assert np.mean(ds < 0.5) >= 0.75


def test_separated_groups_true_effect():
    base = synth.SubjectSpec(dims=SMALL, times=[0.0, 1.0])
    groups = [("slow", 15, {"wm": (-0.01, 0.005)}), ("fast", 15, {"wm": (-0.04, 0.005)})]
    m = synth.generate_cohort(groups, base, 0)
    assert cohens_d(_true_apcs(m, "slow"), _true_apcs(m, "fast")) > 2.0


def test_write_subject_layout(tmp_path):
    spec = synth.SubjectSpec(dims=SMALL, times=[0.0, 1.0], seed=9)
    entry = synth.write_subject(tmp_path, "sub-x", spec)
    assert entry["scans"] == ["sub-x/t0.lvol", "sub-x/t1.lvol"]
    scans, truth = synth.generate_subject(spec)
    assert read_lvol(tmp_path / entry["scans"][1]).dims == SMALL
    assert read_lseg(tmp_path / entry["labels"][0]) == truth.labels[0]
    header = (tmp_path / entry["truth_csv"]).read_text().splitlines()[0]
    assert header.split(",")[3:] == synth.CLASS_NAMES + ["lesion", "ICV"]


def test_reference_atlas_covers_image():
    atlas = synth.reference_atlas(SMALL)
    assert atlas.class_names == synth.CLASS_NAMES + ["lesion"]
    assert atlas.nodes_ref.min() < 0 and atlas.nodes_ref.max() > 15
