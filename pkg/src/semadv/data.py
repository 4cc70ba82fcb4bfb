"""Procedural glyph dataset, Netpbm image I/O and run manifests."""

from __future__ import annotations

import hashlib
import json
import os
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import __version__

GLYPHS = ("bar", "disk", "cross", "ring", "square", "diagonal", "triangle", "dots")


class ImageFormatError(ValueError):
    pass


@dataclass
class ToyDataset:
    images: np.ndarray          # (n, C, H, W) float32 in [-1, 1]
    labels: np.ndarray          # (n,) int64
    regions: np.ndarray         # (n, H, W) bool, glyph footprint
    K: int
    seed: int

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "ToyDataset":
        idx = np.asarray(idx)
        return ToyDataset(self.images[idx], self.labels[idx], self.regions[idx], self.K, self.seed)

    def split(self, test_fraction: float = 0.25) -> tuple["ToyDataset", "ToyDataset"]:
        n_test = max(1, int(round(len(self) * test_fraction)))
        cut = len(self) - n_test
        return self.subset(np.arange(cut)), self.subset(np.arange(cut, len(self)))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.images, self.labels, self.regions):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(f"{self.K}:{self.seed}".encode())
        return h.hexdigest()

    def save(self, path) -> None:
        np.savez(path, images=self.images, labels=self.labels, regions=self.regions,
                 K=self.K, seed=self.seed)

    @classmethod
    def load(cls, path) -> "ToyDataset":
        with np.load(path) as z:
            return cls(z["images"], z["labels"], z["regions"], int(z["K"]), int(z["seed"]))


def _glyph(kind: str, H: int, W: int, cy: float, cx: float, s: float) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    r = np.hypot(dy, dx)
    if kind == "bar":
        return (np.abs(dy) <= 0.35 * s) & (np.abs(dx) <= 1.25 * s)
    if kind == "disk":
        return r <= 1.05 * s
    if kind == "cross":
        arm = 1.2 * s
        t = 0.3 * s
        return ((np.abs(dy) <= t) & (np.abs(dx) <= arm)) | ((np.abs(dx) <= t) & (np.abs(dy) <= arm))
    if kind == "ring":
        return (r <= 1.3 * s) & (r >= 0.75 * s)
    if kind == "square":
        m = np.maximum(np.abs(dy), np.abs(dx))
        return (m <= 1.1 * s) & (m >= 0.6 * s)
    if kind == "diagonal":
        return (np.abs(dy - dx) <= 0.5 * s) & (np.abs(dy + dx) <= 2.2 * s)
    if kind == "triangle":
        return (dy <= 0.9 * s) & (dy >= -0.9 * s) & (np.abs(dx) <= 0.55 * (dy + 0.9 * s))
    if kind == "dots":
        return (np.hypot(dy, dx - 0.9 * s) <= 0.5 * s) | (np.hypot(dy, dx + 0.9 * s) <= 0.5 * s)
    raise ValueError(kind)


def gen_toy_dataset(seed: int = 0, K: int = 4, n: int = 1200, H: int = 16, W: int = 16,
                    C: int = 1) -> ToyDataset:
    """Each class is one glyph shape with jittered position, size and
    brightness over a smooth low-contrast background texture."""
    if K < 2 or K > len(GLYPHS):
        raise ValueError(f"K must lie in [2, {len(GLYPHS)}]")
    if n < K:
        raise ValueError("n must be at least K")
    if H < 8 or W < 8:
        raise ValueError("images must be at least 8x8")
    if C not in (1, 3):
        raise ValueError("C must be 1 or 3")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % K
    rng.shuffle(labels)
    images = np.empty((n, C, H, W), dtype=np.float32)
    regions = np.empty((n, H, W), dtype=bool)
    base = min(H, W) / 16.0
    for i, y in enumerate(labels):
        cy = (H - 1) / 2 + rng.uniform(-2, 2) * base
        cx = (W - 1) / 2 + rng.uniform(-2, 2) * base
        s = rng.uniform(3.2, 4.0) * base
        mask = _glyph(GLYPHS[y], H, W, cy, cx, s)
        tex = ndimage.gaussian_filter(rng.standard_normal((C, H, W)), sigma=(0, 1.5, 1.5))
        tex *= 0.12 / (tex.std() + 1e-8)
        bg = rng.uniform(-0.75, -0.55)
        fg = rng.uniform(0.45, 0.7)
        tint = rng.uniform(0.85, 1.0, size=(C, 1, 1)) if C == 3 else np.ones((1, 1, 1))
        img = np.where(mask[None], fg * tint, bg) + tex
        images[i] = np.clip(img, -0.95, 0.95)
        regions[i] = mask
    return ToyDataset(images, labels.astype(np.int64), regions, K, seed)


# ---------------------------------------------------------------- images


def _to_bytes(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round((x + 1.0) / 2.0 * 255.0), 0, 255).astype(np.uint8)


def write_image(x, path) -> None:
    """Write a (C,H,W) or (H,W) array in [-1, 1] as binary PGM (C=1) or PPM (C=3)."""
    arr = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if arr.ndim == 4 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ImageFormatError(f"cannot encode array of shape {arr.shape}")
    c, h, w = arr.shape
    magic = b"P5" if c == 1 else b"P6"
    payload = _to_bytes(arr).transpose(1, 2, 0).tobytes()
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode("ascii") + payload)


def _tokens(buf: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    out, i = [], 0
    while len(out) < count:
        while i < len(buf) and buf[i:i + 1].isspace():
            i += 1
        if i < len(buf) and buf[i:i + 1] == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j:j + 1].isspace() and buf[j:j + 1] != b"#":
            j += 1
        if j == i:
            raise ImageFormatError("truncated header")
        out.append(buf[i:j])
        i = j
    # exactly one whitespace byte separates the header from the payload
    if i >= len(buf) or not buf[i:i + 1].isspace():
        raise ImageFormatError("malformed header terminator")
    return out, i + 1


def read_image(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    try:
        (magic, w, h, maxval), start = _tokens(buf, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as e:
        raise ImageFormatError(f"malformed header: {e}") from None
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {magic!r}")
    if maxval != 255 or w <= 0 or h <= 0:
        raise ImageFormatError("only 8-bit images with positive size are supported")
    c = 1 if magic == b"P5" else 3
    need = w * h * c
    payload = buf[start:start + need]
    if len(payload) != need:
        raise ImageFormatError(f"truncated payload: expected {need} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, c).transpose(2, 0, 1)
    return (arr.astype(np.float32) / 255.0 * 2.0 - 1.0).astype(np.float32)


# ---------------------------------------------------------------- manifests


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    command: str
    seeds: dict
    config: dict
    dataset_fingerprint: str | None = None
    checkpoints: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    tool_version: str = __version__
    platform: dict = field(default_factory=lambda: {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "machine": platform.machine(),
        "processor": platform.processor(),
        "cpu_count": os.cpu_count(),
    })

    def add_checkpoint(self, name: str, path) -> None:
        self.checkpoints[name] = {"path": str(path), "sha256": file_sha256(path)}

    def add_artifact(self, path) -> None:
        self.artifacts.append(str(path))

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "tool_version": self.tool_version,
            "seeds": self.seeds,
            "config": self.config,
            "dataset_fingerprint": self.dataset_fingerprint,
            "checkpoints": self.checkpoints,
            "artifacts": sorted(self.artifacts),
            "platform": self.platform,
        }

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def read(cls, path) -> "RunManifest":
        d = json.loads(Path(path).read_text())
        m = cls(d["command"], d["seeds"], d["config"], d.get("dataset_fingerprint"),
                d.get("checkpoints", {}), d.get("artifacts", []), d.get("tool_version", __version__))
        m.platform = d.get("platform", m.platform)
        return m
