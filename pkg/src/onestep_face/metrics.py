"""Evaluation battery: Fréchet distance, identity angle, landmark distance, DISTS."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .images import landmark_path, list_images, load_image, load_landmarks, to_tensor
from .losses import dists_per_sample
from .networks import FaceEmbedder, FeatureExtractor

METRICS = ("dists", "deg", "lmd", "fid")
REPORT_VERSION = 1


def _psd_sqrt(m):
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def _stats(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need an n x m sample matrix with n >= 2")
    if not np.isfinite(x).all():
        raise ValueError("feature samples contain non-finite values")
    return x.mean(axis=0), np.atleast_2d(np.cov(x, rowvar=False))


def frechet_from_stats(mu_a, cov_a, mu_b, cov_b) -> float:
    """||mu_a - mu_b||^2 + Tr(A + B - 2 (A B)^{1/2}).

    The trace of the square root comes from the eigenvalues of the symmetric
    product sqrt(A) B sqrt(A), negatives clipped to zero.
    """
    if not (np.isfinite(cov_a).all() and np.isfinite(cov_b).all()):
        raise ValueError("covariance is not finite")
    sa = _psd_sqrt(cov_a)
    w = np.linalg.eigvalsh(sa @ cov_b @ sa)
    tr_sqrt = np.sqrt(np.clip(w, 0.0, None)).sum()
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)


def frechet_distance(A, B) -> float:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != B.ndim or (A.ndim == 2 and A.shape[1] != B.shape[1]):
        raise ValueError(f"feature dimension mismatch: {A.shape} vs {B.shape}")
    return frechet_from_stats(*_stats(A), *_stats(B))


def identity_angle(eA, eB) -> float:
    """Angle in degrees between two embeddings."""
    a = np.asarray(eA, dtype=np.float64)
    b = np.asarray(eB, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("zero-length embedding")
    cos = np.clip(a @ b / (na * nb), -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)))


def landmark_distance(LA, LB) -> float:
    LA = np.asarray(LA, dtype=np.float64)
    LB = np.asarray(LB, dtype=np.float64)
    if LA.shape != LB.shape:
        raise ValueError(f"landmark count mismatch: {LA.shape} vs {LB.shape}")
    return float(np.linalg.norm(LA - LB, axis=-1).mean())


# directory evaluation ------------------------------------------------------------


def _batched(fn, images, size=16):
    with torch.no_grad():
        return np.concatenate([fn(to_tensor(images[i:i + size])).double().numpy() for i in range(0, len(images), size)])


def evaluate_suite(restored_dir, reference_dir, metrics=METRICS, feat=None, face=None) -> dict:
    """Compare two image directories.

    Paired metrics (dists, deg, lmd) use files present in both directories
    under the same name; fid compares the two sets as wholes.
    """
    unknown = [m for m in metrics if m not in METRICS]
    if unknown:
        raise ValueError(f"unknown metric(s) {unknown}; valid: {list(METRICS)}")
    restored = {p.name: p for p in list_images(restored_dir)}
    reference = {p.name: p for p in list_images(reference_dir)}
    if not restored:
        raise ValueError(f"no images in {restored_dir}")
    if not reference:
        raise ValueError(f"no images in {reference_dir}")
    feat = feat or FeatureExtractor()
    face = face or FaceEmbedder()
    paired = sorted(set(restored) & set(reference))
    failures = [{"file": n, "reason": "missing from reference"} for n in sorted(set(restored) - set(reference))]
    failures += [{"file": n, "reason": "missing from restored"} for n in sorted(set(reference) - set(restored))]

    cfg_hash = hashlib.sha256(json.dumps({"metrics": list(metrics), "feat": "stand-in:1234", "face": "stand-in:4321"},
                                         sort_keys=True).encode()).hexdigest()[:16]
    records = []

    def record(name, value, n):
        records.append({"name": name, "value": None if value is None else float(value), "n": int(n), "config_hash": cfg_hash})

    need_pairs = [m for m in metrics if m in ("dists", "deg")]
    if need_pairs and paired:
        x = np.stack([load_image(restored[n]) for n in paired])
        y = np.stack([load_image(reference[n]) for n in paired])
    if "dists" in metrics:
        if paired:
            with torch.no_grad():
                d = torch.cat([dists_per_sample(to_tensor(x[i:i + 16]), to_tensor(y[i:i + 16]), feat)
                               for i in range(0, len(paired), 16)])
            record("dists", d.double().mean(), len(paired))
        else:
            record("dists", None, 0)
    if "deg" in metrics:
        if paired:
            ea, eb = _batched(face, x), _batched(face, y)
            record("deg", np.mean([identity_angle(a, b) for a, b in zip(ea, eb)]), len(paired))
        else:
            record("deg", None, 0)
    if "lmd" in metrics:
        vals = []
        for n in paired:
            pa, pb = landmark_path(restored[n]), landmark_path(reference[n])
            if pa.exists() and pb.exists():
                vals.append(landmark_distance(load_landmarks(pa), load_landmarks(pb)))
            else:
                failures.append({"file": n, "reason": "landmark sidecar missing", "metric": "lmd"})
        record("lmd", np.mean(vals) if vals else None, len(vals))
    if "fid" in metrics:
        ra = np.stack([load_image(p) for p in restored.values()])
        rb = np.stack([load_image(p) for p in reference.values()])
        if len(ra) >= 2 and len(rb) >= 2:
            record("fid", frechet_distance(_batched(feat.pooled, ra), _batched(feat.pooled, rb)), min(len(ra), len(rb)))
        else:
            record("fid", None, min(len(ra), len(rb)))
    return {"version": REPORT_VERSION, "metrics": records, "pairing_failures": failures}


def report_values(report: dict) -> dict:
    return {r["name"]: r["value"] for r in report["metrics"]}
