import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from onestep_face.images import procedural_face, save_image, save_landmarks
from onestep_face.metrics import (
    METRICS,
    evaluate_suite,
    frechet_distance,
    frechet_from_stats,
    identity_angle,
    landmark_distance,
    report_values,
)

from oracles import frechet_1d


def test_frechet_gaussian_closed_form():
    rng = np.random.default_rng(0)
    a, b = rng.normal(0, 1, 100_000), rng.normal(3, 1, 100_000)
    assert frechet_distance(a, b) == pytest.approx(9.0, abs=0.2)
    assert frechet_distance(a, b) == pytest.approx(frechet_1d(a.mean(), a.var(ddof=1), b.mean(), b.var(ddof=1)), abs=1e-8)


def test_frechet_identical_and_symmetric():
    x = np.random.default_rng(1).normal(size=(200, 6))
    y = np.random.default_rng(2).normal(size=(150, 6)) * 1.5 + 0.3
    assert abs(frechet_distance(x, x)) < 1e-6
    assert frechet_distance(x, y) == pytest.approx(frechet_distance(y, x), rel=1e-9)


def test_frechet_matches_diagonal_closed_form():
    mu_a, mu_b = np.array([0.0, 1.0]), np.array([2.0, -1.0])
    va, vb = np.array([1.0, 4.0]), np.array([9.0, 0.25])
    expected = sum(frechet_1d(mu_a[i], va[i], mu_b[i], vb[i]) for i in range(2))
    assert frechet_from_stats(mu_a, np.diag(va), mu_b, np.diag(vb)) == pytest.approx(expected)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5))
def test_frechet_non_negative(seed, m):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, m)) * rng.random(m)
    b = rng.normal(size=(4, m))
    assert frechet_distance(a, b) >= -1e-8


def test_frechet_errors():
    with pytest.raises(ValueError):
        frechet_distance(np.zeros((5, 2)), np.zeros((5, 3)))
    with pytest.raises(ValueError):
        frechet_distance(np.zeros((1, 2)), np.zeros((5, 2)))
    with pytest.raises(ValueError):
        frechet_distance(np.full((3, 2), np.nan), np.zeros((5, 2)))


def test_identity_angle_cases_and_rotation_invariance():
    e = np.array([1.0, 0.0, 0.0])
    assert identity_angle(e, e) == 0.0
    assert identity_angle(e, [0.0, 1.0, 0.0]) == pytest.approx(90.0)
    assert identity_angle(e, -e) == pytest.approx(180.0)
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=8), rng.normal(size=8)
    Q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
    assert identity_angle(Q @ a, Q @ b) == pytest.approx(identity_angle(a, b), abs=1e-9)
    with pytest.raises(ValueError):
        identity_angle(np.zeros(3), e)


def test_landmark_distance():
    rng = np.random.default_rng(4)
    A = rng.random((5, 2)) * 64
    B = rng.random((5, 2)) * 64
    assert landmark_distance(A, A) == 0
    assert landmark_distance(A, A + [3.0, 0.0]) == pytest.approx(3.0)
    assert landmark_distance(A + 7, B + 7) == pytest.approx(landmark_distance(A, B))
    loop = sum(math.dist(a, b) for a, b in zip(A.tolist(), B.tolist())) / 5
    assert landmark_distance(A, B) == pytest.approx(loop, abs=1e-9)
    with pytest.raises(ValueError):
        landmark_distance(A, B[:4])


def _write_set(d, images, landmarks=None):
    d.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        save_image(d / f"f{i:02d}.png", img)
        if landmarks is not None:
            save_landmarks(d / f"f{i:02d}.landmarks.txt", landmarks[i])


@pytest.fixture(scope="module")
def face_set():
    pairs = [procedural_face(i) for i in range(8)]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def test_self_evaluation_is_zero(tmp_path, face_set):
    imgs, lms = face_set
    _write_set(tmp_path / "ref", imgs, lms)
    report = evaluate_suite(tmp_path / "ref", tmp_path / "ref")
    vals = report_values(report)
    assert [r["name"] for r in report["metrics"]] == list(METRICS)
    assert all(r["n"] == 8 for r in report["metrics"])
    assert vals["dists"] == pytest.approx(0.0, abs=1e-6)
    assert vals["deg"] == pytest.approx(0.0, abs=1e-3)
    assert vals["lmd"] == 0.0
    assert abs(vals["fid"]) < 1e-6
    assert report["pairing_failures"] == []


def test_fid_grows_with_noise(tmp_path, face_set):
    imgs, _ = face_set
    _write_set(tmp_path / "ref", imgs)
    rng = np.random.default_rng(0)
    fids = []
    for k, sigma in enumerate((0.02, 0.08, 0.2)):
        _write_set(tmp_path / f"n{k}", np.clip(imgs + rng.normal(0, sigma, imgs.shape), 0, 1))
        fids.append(report_values(evaluate_suite(tmp_path / f"n{k}", tmp_path / "ref", ["fid"]))["fid"])
    assert fids[0] < fids[1] < fids[2]


def test_pairing_diagnostics(tmp_path, face_set):
    imgs, lms = face_set
    _write_set(tmp_path / "ref", imgs, lms)
    _write_set(tmp_path / "res", imgs[:5])
    report = evaluate_suite(tmp_path / "res", tmp_path / "ref", ["dists", "lmd"])
    vals = {r["name"]: r for r in report["metrics"]}
    assert vals["dists"]["n"] == 5 and vals["lmd"]["n"] == 0 and vals["lmd"]["value"] is None
    reasons = {(f["file"], f["reason"]) for f in report["pairing_failures"]}
    assert ("f07.png", "missing from restored") in reasons
    assert ("f00.png", "landmark sidecar missing") in reasons


def test_suite_errors(tmp_path, face_set):
    (tmp_path / "empty").mkdir()
    _write_set(tmp_path / "ref", face_set[0][:2])
    with pytest.raises(ValueError, match="no images"):
        evaluate_suite(tmp_path / "empty", tmp_path / "ref")
    with pytest.raises(ValueError, match="unknown"):
        evaluate_suite(tmp_path / "ref", tmp_path / "ref", ["psnr"])
