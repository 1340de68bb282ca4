import json

import numpy as np
import pytest

from malenia.attributes import ASPECTS, default_schema
from malenia.errors import ShapeError
from malenia.metrics import (
    MetricReport,
    attribute_matching_metrics,
    dsc,
    nsd,
    pair_lesions,
)


def ball(center, radius, shape=(16, 16, 16)):
    idx = np.indices(shape)
    d2 = sum((idx[a] - center[a]) ** 2 for a in range(3))
    return d2 <= radius**2


# --- DSC -------------------------------------------------------------------------

def test_dsc_oracle_values():
    a = np.zeros((4, 4, 4), dtype=bool)
    b = np.zeros((4, 4, 4), dtype=bool)
    a[:2] = True  # 32 voxels
    b[1:3] = True  # 32 voxels, 16 shared
    assert abs(dsc(a, b) - 2 * 16 / 64) < 1e-12
    assert dsc(a, a) == 1.0
    assert dsc(a, ~a) == 0.0


def test_dsc_empty_conventions():
    z = np.zeros((3, 3, 3), dtype=bool)
    assert dsc(z, z) == 1.0
    assert dsc(np.ones_like(z), z) == 0.0


def test_dsc_rejects_shape_mismatch():
    with pytest.raises(ShapeError):
        dsc(np.zeros((2, 2, 2)), np.zeros((3, 3, 3)))


# --- NSD -------------------------------------------------------------------------

def brute_force_nsd(pred, gt, tolerance):
    """Boundary extraction and pairwise distances computed independently."""

    def boundary_voxels(mask):
        out = []
        shape = mask.shape
        for x in range(shape[0]):
            for y in range(shape[1]):
                for z in range(shape[2]):
                    if not mask[x, y, z]:
                        continue
                    for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                                       (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                        nx, ny, nz = x + dx, y + dy, z + dz
                        if (not (0 <= nx < shape[0] and 0 <= ny < shape[1]
                                 and 0 <= nz < shape[2])
                                or not mask[nx, ny, nz]):
                            out.append((x, y, z))
                            break
        return np.array(out, dtype=float)

    bp, bg = boundary_voxels(pred), boundary_voxels(gt)
    d_pg = np.sqrt(((bp[:, None, :] - bg[None, :, :]) ** 2).sum(-1)).min(1)
    d_gp = np.sqrt(((bg[:, None, :] - bp[None, :, :]) ** 2).sum(-1)).min(1)
    return ((d_pg <= tolerance).sum() + (d_gp <= tolerance).sum()) / (
        len(bp) + len(bg)
    )


def test_nsd_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    for trial in range(5):
        pred = ball(rng.integers(5, 11, 3), rng.uniform(2, 4))
        gt = ball(rng.integers(5, 11, 3), rng.uniform(2, 4))
        for tol in (1.0, 2.0):
            got = nsd(pred, gt, tolerance_voxels=tol)
            expected = brute_force_nsd(pred, gt, tol)
            assert abs(got - expected) < 1e-9, (trial, tol)


def test_nsd_perfect_match():
    m = ball((8, 8, 8), 3.5)
    assert nsd(m, m) == 1.0


def test_nsd_empty_conventions():
    z = np.zeros((16, 16, 16), dtype=bool)
    m = ball((8, 8, 8), 3.0)
    assert nsd(z, z) == 1.0
    assert nsd(m, z) == 0.0
    assert nsd(z, m) == 0.0


def test_nsd_rejects_bad_tolerance():
    m = ball((8, 8, 8), 3.0)
    with pytest.raises(ShapeError):
        nsd(m, m, tolerance_voxels=0.0)


def test_nsd_respects_spacing():
    a = ball((8, 8, 8), 3.0)
    b = ball((9, 8, 8), 3.0)  # shifted by one voxel along x
    fine = nsd(a, b, tolerance_voxels=1.0, spacing=(1.0, 1.0, 1.0))
    coarse = nsd(a, b, tolerance_voxels=1.0, spacing=(3.0, 3.0, 3.0))
    assert fine >= coarse or abs(fine - coarse) < 1e-9


# --- pairing --------------------------------------------------------------------

def test_pair_lesions_greedy_best_dice():
    g1 = ball((4, 4, 4), 2.5)
    g2 = ball((11, 11, 11), 2.5)
    p_good = ball((4, 4, 5), 2.5)
    p_far = ball((11, 12, 11), 2.5)
    pairs = pair_lesions([p_far, p_good], [g1, g2])
    assert sorted((i, j) for i, j, _ in pairs) == [(0, 1), (1, 0)]


def test_pair_lesions_threshold():
    g = ball((4, 4, 4), 2.5)
    p = ball((12, 12, 12), 2.5)  # no overlap
    assert pair_lesions([p], [g]) == []


def test_pair_lesions_one_to_one():
    g = ball((8, 8, 8), 3.0)
    p1 = ball((8, 8, 8), 3.0)
    p2 = ball((8, 8, 9), 3.0)
    pairs = pair_lesions([p2, p1], [g])
    assert len(pairs) == 1
    assert pairs[0][0] == 1  # the exact match wins


# --- attribute metrics ----------------------------------------------------------

def test_attribute_matching_metrics_counts():
    schema = default_schema()
    g = ball((4, 4, 4), 2.5)
    labels = {a: schema.vocab[a][0] for a in ASPECTS}
    wrong = dict(labels)
    wrong["Shape"] = schema.vocab["Shape"][1]
    report = attribute_matching_metrics(
        predicted=[(g, wrong)], ground_truth=[(g, labels)], schema=schema
    )
    assert report["Location"]["precision"] == 1.0
    assert report["Location"]["recall"] == 1.0
    assert report["Shape"]["precision"] == 0.0
    assert report["Shape"]["recall"] == 0.0


def test_attribute_matching_metrics_unpaired_counts():
    schema = default_schema()
    labels = {a: schema.vocab[a][0] for a in ASPECTS}
    g1 = ball((4, 4, 4), 2.5)
    g2 = ball((11, 11, 11), 2.5)
    report = attribute_matching_metrics(
        predicted=[(g1, labels)], ground_truth=[(g1, labels), (g2, labels)],
        schema=schema,
    )
    assert report["Location"]["precision"] == 1.0
    assert report["Location"]["recall"] == 0.5


def test_attribute_matching_metrics_none_when_undefined():
    schema = default_schema()
    labels = {a: schema.vocab[a][0] for a in ASPECTS}
    g = ball((4, 4, 4), 2.5)
    report = attribute_matching_metrics([], [(g, labels)], schema)
    assert report["Location"]["precision"] is None
    assert report["Location"]["recall"] == 0.0


# --- report serialization --------------------------------------------------------

def test_metric_report_text_and_json(tmp_path):
    report = MetricReport(
        per_class={
            "b": {"dsc": 0.5, "nsd": 0.6, "support": 2, "zero_shot": True},
            "a": {"dsc": 0.9, "nsd": 0.95, "support": 3, "zero_shot": False},
        },
        per_aspect={
            "Location": {"precision": None, "recall": 0.5, "n_pred": 0, "n_gt": 2}
        },
    )
    text = report.to_text()
    assert text.index("a:") < text.index("b:")  # stable class ordering
    assert "zero-shot" in text
    assert "precision=n/a" in text
    path = tmp_path / "report.json"
    report.save(path)
    loaded = json.loads(path.read_text())
    assert loaded["per_class"]["a"]["dsc"] == 0.9
    assert loaded["per_aspect"]["Location"]["precision"] is None
