"""Image I/O, procedural faces, and numpy <-> torch conversion.

Images travel as float ``H x W x 3`` arrays in [0, 1]. Files are 8-bit PNG.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

IMAGE_SUFFIXES = (".png",)
LANDMARK_SUFFIX = ".landmarks.txt"


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_image(path, img: np.ndarray) -> None:
    arr = to_uint8(img)
    if arr.ndim == 2:
        Image.fromarray(arr, mode="L").save(path, format="PNG")
    else:
        Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def quantize8(img: np.ndarray) -> np.ndarray:
    """Round-trip through 8 bits, i.e. what a PNG save/load would give back."""
    return to_uint8(img).astype(np.float64) / 255.0


def to_tensor(img, dtype=torch.float32) -> torch.Tensor:
    """``H x W x 3`` (or a stack ``B x H x W x 3``) -> ``B x 3 x H x W``."""
    arr = np.asarray(img)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def to_numpy(x: torch.Tensor) -> np.ndarray:
    """``B x 3 x H x W`` -> ``B x H x W x 3`` float64 (batch of one is squeezed)."""
    arr = x.detach().cpu().double().numpy().transpose(0, 2, 3, 1)
    return arr[0] if arr.shape[0] == 1 else arr


# landmarks -------------------------------------------------------------------


def landmark_path(image_path) -> Path:
    image_path = Path(image_path)
    return image_path.with_name(image_path.stem + LANDMARK_SUFFIX)


def save_landmarks(path, points) -> None:
    lines = [f"{x:.4f} {y:.4f}" for x, y in np.asarray(points, dtype=np.float64)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_landmarks(path) -> np.ndarray:
    rows = [line.split() for line in Path(path).read_text().splitlines() if line.strip()]
    return np.array([[float(a), float(b)] for a, b in rows], dtype=np.float64).reshape(-1, 2)


# procedural faces --------------------------------------------------------------


def _ellipse(yy, xx, cy, cx, ry, rx, angle=0.0, soft=1.0):
    ca, sa = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = (dx * ca + dy * sa) / rx
    v = (-dx * sa + dy * ca) / ry
    r = np.sqrt(u * u + v * v)
    # soft edge about ``soft`` pixels wide
    edge = soft / max(min(rx, ry), 1e-6)
    return np.clip((1.0 - r) / edge + 0.5, 0.0, 1.0)


def _paint(canvas, mask, color):
    canvas *= 1.0 - mask[..., None]
    canvas += mask[..., None] * np.asarray(color)[None, None, :]


def procedural_face(seed: int, size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """A seeded, face-like image plus its 5 landmarks.

    Landmarks are (x, y) pixel coordinates of: left eye, right eye, nose tip,
    left mouth corner, right mouth corner.
    """
    rng = np.random.default_rng(seed)
    s = size / 64.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5

    top = rng.uniform(0.2, 0.9, 3)
    bottom = rng.uniform(0.1, 0.8, 3)
    t = (yy / size)[..., None]
    img = top[None, None, :] * (1 - t) + bottom[None, None, :] * t

    cx = size / 2 + rng.uniform(-3, 3) * s
    cy = size / 2 + rng.uniform(-2, 3) * s
    ry = rng.uniform(21, 26) * s
    rx = rng.uniform(16, 20) * s
    tilt = rng.uniform(-0.12, 0.12)

    hair = rng.uniform(0.02, 0.5) * rng.uniform(0.5, 1.0, 3)
    _paint(img, _ellipse(yy, xx, cy - 4 * s, cx, ry + 2 * s, rx + 3 * s, tilt), hair)

    skin_base = rng.uniform(0.35, 0.95)
    skin = np.array([skin_base, skin_base * rng.uniform(0.7, 0.85), skin_base * rng.uniform(0.55, 0.75)])
    _paint(img, _ellipse(yy, xx, cy + 2 * s, cx, ry - 2 * s, rx, tilt), skin)

    ca, sa = np.cos(tilt), np.sin(tilt)

    def place(dx, dy):
        return cx + dx * ca - dy * sa, cy + dx * sa + dy * ca

    eye_dx = rng.uniform(6.0, 8.5) * s
    eye_dy = rng.uniform(-5.0, -2.0) * s
    eye_r = rng.uniform(1.6, 2.6) * s
    iris = rng.uniform(0.0, 0.4, 3)
    brow = hair * 0.8
    lm = []
    for side in (-1, 1):
        ex, ey = place(side * eye_dx, eye_dy)
        _paint(img, _ellipse(yy, xx, ey, ex, eye_r * 0.8, eye_r * 1.5, tilt), np.array([0.95, 0.95, 0.95]))
        _paint(img, _ellipse(yy, xx, ey, ex, eye_r * 0.8, eye_r * 0.8, tilt), iris)
        bx, by = place(side * eye_dx, eye_dy - 3.2 * s)
        _paint(img, _ellipse(yy, xx, by, bx, 0.8 * s, 3.2 * s, tilt - side * 0.15), brow)
        lm.append((ex, ey))

    nose_dy = rng.uniform(2.0, 5.0) * s
    nx, ny = place(0.0, nose_dy)
    _paint(img, _ellipse(yy, xx, ny, nx, 1.2 * s, 1.6 * s, tilt), skin * 0.75)
    lm.append((nx, ny))

    mouth_dy = nose_dy + rng.uniform(5.0, 8.0) * s
    mouth_w = rng.uniform(4.0, 7.0) * s
    lip = np.array([rng.uniform(0.5, 0.85), rng.uniform(0.1, 0.3), rng.uniform(0.15, 0.35)])
    mx, my = place(0.0, mouth_dy)
    _paint(img, _ellipse(yy, xx, my, mx, rng.uniform(1.0, 2.2) * s, mouth_w, tilt), lip)
    lm.append(place(-mouth_w, mouth_dy))
    lm.append(place(mouth_w, mouth_dy))

    return np.clip(img, 0.0, 1.0), np.array(lm, dtype=np.float64)


def procedural_dataset(n: int, size: int = 64, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """``n`` faces stacked as ``n x H x W x 3`` plus ``n x 5 x 2`` landmarks.

    Pixel values are 8-bit quantised so in-memory datasets match their PNG form.
    """
    faces, marks = zip(*(procedural_face(seed * 100003 + i, size) for i in range(n)))
    return quantize8(np.stack(faces)), np.stack(marks)
