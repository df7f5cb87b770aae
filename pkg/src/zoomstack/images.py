"""8-bit binary PPM (P6) export and import."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ContractViolation


def to_uint8(image) -> np.ndarray:
    """Clamp to [0, 1], scale to [0, 255] and round half to even."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.rint(img * 255.0).astype(np.uint8)


def save_ppm(path, image) -> None:
    img = to_uint8(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractViolation(f"PPM export needs an (H, W, 3) image, got {img.shape}")
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def load_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ContractViolation(f"{path}: only 8-bit P6 PPM is supported")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0
