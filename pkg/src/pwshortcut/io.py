"""Binary file formats (PWIMG, PWRF, PWDN) and grayscale display export."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .acoustics import RfFrame
from .denoiser import LinearPatchDenoiser


def _read_header(fh, magic: str, n_fields: int) -> list[str]:
    line = fh.readline().decode("ascii", errors="replace").rstrip("\n")
    parts = line.split(" ")
    if len(parts) != 2 + n_fields or parts[0] != magic or parts[1] != "v1":
        raise ValueError(f"bad {magic} header: {line!r}")
    return parts[2:]


def write_image(path, img) -> None:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("image must be 2-D")
    with open(path, "wb") as fh:
        fh.write(f"PWIMG v1 {img.shape[0]} {img.shape[1]}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img, dtype="<f4").tobytes())


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        n_z, n_x = (int(v) for v in _read_header(fh, "PWIMG", 2))
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != n_z * n_x:
        raise ValueError(f"{path}: expected {n_z * n_x} pixels, found {data.size}")
    return data.reshape(n_z, n_x).astype(np.float64)


def write_rf(path, frame: RfFrame) -> None:
    r, L = frame.samples.shape
    theta_urad = int(round(frame.steering_angle * 1e6))
    with open(path, "wb") as fh:
        fh.write(f"PWRF v1 {r} {L} {theta_urad}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(frame.samples, dtype="<f4").tobytes())


def read_rf(path) -> RfFrame:
    with open(path, "rb") as fh:
        r, L, theta_urad = (int(v) for v in _read_header(fh, "PWRF", 3))
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != r * L:
        raise ValueError(f"{path}: expected {r * L} samples, found {data.size}")
    return RfFrame(data.reshape(r, L).astype(np.float64), theta_urad * 1e-6)


def write_denoiser(path, d: LinearPatchDenoiser) -> None:
    P, n = d.patch_size, len(d.sigmas)
    with open(path, "wb") as fh:
        fh.write(f"PWDN v1 {P} {n}\n".encode("ascii"))
        for sigma, w, b in zip(d.sigmas, d.weights, d.biases):
            record = np.concatenate(([sigma], w.reshape(-1), [b]))
            fh.write(record.astype("<f8").tobytes())


def read_denoiser(path) -> LinearPatchDenoiser:
    with open(path, "rb") as fh:
        P, n = (int(v) for v in _read_header(fh, "PWDN", 2))
        data = np.frombuffer(fh.read(), dtype="<f8")
    record = P * P + 2
    if data.size != n * record:
        raise ValueError(f"{path}: expected {n * record} values, found {data.size}")
    data = data.reshape(n, record)
    return LinearPatchDenoiser(P, data[:, 0].copy(), data[:, 1:-1].reshape(n, P, P).copy(), data[:, -1].copy())


def to_gray8(db_img, dynamic_range_db: float) -> np.ndarray:
    """Map [-DR, 0] dB linearly onto [0, 255]."""
    scaled = (np.asarray(db_img) + dynamic_range_db) / dynamic_range_db
    return np.round(np.clip(scaled, 0.0, 1.0) * 255).astype(np.uint8)


def write_pgm(path, db_img, dynamic_range_db: float) -> None:
    gray = to_gray8(db_img, dynamic_range_db)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    header = raw.split(b"\n", 3)
    if header[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    width, height = (int(v) for v in header[1].split())
    return np.frombuffer(header[3], dtype=np.uint8).reshape(height, width)


def write_png(path, db_img, dynamic_range_db: float) -> None:
    from PIL import Image

    Image.fromarray(to_gray8(db_img, dynamic_range_db), mode="L").save(path)
