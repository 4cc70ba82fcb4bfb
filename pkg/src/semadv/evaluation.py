"""Metrics and campaign running.

Feature-space distances (FID, KID) are computed on the global-average-pooled
features of a locally trained extractor, so they are labelled "FID-local"
and "KID-local" in every report.
"""

from __future__ import annotations

import json
import math
import os
import platform
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.fft import dctn, idctn

from .attack_lm import lm_attack
from .attack_st import st_attack
from .config import RunConfig
from .data import write_image
from .models import Classifier, feature_embed
from .result import AttackResult

PERTURBATIONS = ("jpeg_like", "gaussian_blur", "defocus_blur", "brightness")


class CampaignError(RuntimeError):
    def __init__(self, msg, partial_report=None):
        super().__init__(msg)
        self.partial_report = partial_report


# ---------------------------------------------------------------- ASR


def compute_asr(results) -> float:
    results = list(results)
    if not results:
        raise ValueError("compute_asr needs at least one result")
    return 100.0 * sum(bool(r.success) for r in results) / len(results)


# ---------------------------------------------------------------- FID / KID


@dataclass
class FeatureSet:
    features: np.ndarray  # (n, d), float64
    mu: np.ndarray
    sigma: np.ndarray

    @classmethod
    def from_features(cls, features) -> "FeatureSet":
        f = np.asarray(features, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] < 2:
            raise ValueError(f"need an (n>=2, d) feature matrix, got {f.shape}")
        sigma = np.cov(f, rowvar=False).reshape(f.shape[1], f.shape[1])
        return cls(f, f.mean(axis=0), (sigma + sigma.T) / 2)

    @classmethod
    def from_images(cls, extractor: Classifier, images, batch: int = 256) -> "FeatureSet":
        return cls.from_features(feature_embed(extractor, images, batch=batch))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


def _as_fs(a) -> FeatureSet:
    return a if isinstance(a, FeatureSet) else FeatureSet.from_features(a)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(m)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def compute_fid(a, b) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    The trace of (Sa Sb)^1/2 equals the trace of the symmetric matrix
    (Sa^1/2 Sb Sa^1/2)^1/2, whose eigenvalues are clamped at zero.
    """
    a, b = _as_fs(a), _as_fs(b)
    if a.d != b.d:
        raise ValueError(f"feature dimensions differ: {a.d} vs {b.d}")
    for s in (a, b):
        if s.n < s.d:
            warnings.warn(f"only {s.n} samples for {s.d}-dimensional features; "
                          "covariance is rank deficient", RuntimeWarning, stacklevel=2)
    try:
        root_a = _psd_sqrt(a.sigma)
        inner = root_a @ b.sigma @ root_a
        eig = np.linalg.eigvalsh((inner + inner.T) / 2)
    except np.linalg.LinAlgError as exc:
        raise ArithmeticError(f"eigensolver failed: {exc}") from exc
    tr_cross = np.sqrt(np.clip(eig, 0, None)).sum()
    diff = a.mu - b.mu
    fid = diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2 * tr_cross
    return float(max(fid, 0.0))


def _poly_kernel(x, y):
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def mmd2_unbiased(x, y) -> float:
    m, n = len(x), len(y)
    kxx, kyy, kxy = _poly_kernel(x, x), _poly_kernel(y, y), _poly_kernel(x, y)
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sxx + syy - 2 * kxy.mean())


def compute_kid(a, b, subset_size: int = 50, subsets: int = 50, seed: int = 0,
                return_std: bool = False):
    """Mean unbiased MMD^2 over random subsets, cubic polynomial kernel.

    Subset indices for each side depend only on (seed, set size, subset
    number), so swapping the arguments gives the same value.
    """
    fa, fb = _as_fs(a).features, _as_fs(b).features
    if subset_size < 2:
        raise ValueError("subset_size must be at least 2")
    if fa.shape[1] != fb.shape[1]:
        raise ValueError(f"feature dimensions differ: {fa.shape[1]} vs {fb.shape[1]}")
    if min(len(fa), len(fb)) < subset_size:
        raise ValueError(f"sets of size {len(fa)} and {len(fb)} are smaller than subset_size {subset_size}")

    def pick(n, i):
        return np.random.default_rng([seed, n, i]).choice(n, subset_size, replace=False)

    vals = np.array([mmd2_unbiased(fa[pick(len(fa), i)], fb[pick(len(fb), i)])
                     for i in range(subsets)])
    if return_std:
        return float(vals.mean()), float(vals.std())
    return float(vals.mean())


# ---------------------------------------------------------------- transfer


def transfer_eval(adv_images, original_labels, victims) -> dict:
    """Per-victim fraction (percent) of images whose label differs from the
    original. ``victims`` is a mapping name -> classifier or a list."""
    if not isinstance(victims, dict):
        victims = {f"victim{i}": v for i, v in enumerate(victims)}
    labels = np.asarray(original_labels, dtype=np.int64)
    images = np.asarray(adv_images, dtype=np.float32)
    if len(labels) == 0 or len(labels) != len(images):
        raise ValueError("need one original label per adversarial image")
    ks = {v.K for v in victims.values()}
    if len(ks) > 1:
        raise ValueError(f"victims disagree on the label space: {sorted(ks)}")
    if ks and labels.max() >= ks.pop():
        raise ValueError("original labels fall outside the victims' label space")
    return {name: 100.0 * float((v.predict(images) != labels).mean())
            for name, v in victims.items()}


# ---------------------------------------------------------------- natural perturbations

_JPEG_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


def _jpeg_table(q: float) -> np.ndarray:
    scale = 5000.0 / q if q < 50 else 200.0 - 2.0 * q
    return np.clip(np.floor((_JPEG_LUMA * scale + 50) / 100), 1, None)


def _jpeg_plane(plane: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Block DCT quantize/dequantize of one (H, W) plane on the 0..255 scale."""
    h, w = plane.shape
    ph, pw = -h % 8, -w % 8
    p = np.pad(plane, ((0, ph), (0, pw)), mode="edge") - 128.0
    blocks = p.reshape(p.shape[0] // 8, 8, p.shape[1] // 8, 8).transpose(0, 2, 1, 3)
    coef = dctn(blocks, axes=(2, 3), norm="ortho")
    coef = np.round(coef / table) * table
    rec = idctn(coef, axes=(2, 3), norm="ortho").transpose(0, 2, 1, 3).reshape(p.shape)
    return (rec + 128.0)[:h, :w]


def _jpeg_like(x: np.ndarray, q: float) -> np.ndarray:
    table = _jpeg_table(q)
    v = (x.astype(np.float64) + 1) * 127.5
    out = v.copy()
    lead = x.shape[:-3]
    flat_in = v.reshape((-1,) + x.shape[-3:])
    flat_out = out.reshape(flat_in.shape)
    for i, img in enumerate(flat_in):
        if img.shape[0] == 3:
            # luma only; chroma passes through untouched
            r, g, b = img
            y = 0.299 * r + 0.587 * g + 0.114 * b
            y2 = _jpeg_plane(y, table)
            flat_out[i] = img + (y2 - y)
        else:
            for c in range(img.shape[0]):
                flat_out[i, c] = _jpeg_plane(img[c], table)
    out = flat_out.reshape(lead + x.shape[-3:])
    return np.clip(out / 127.5 - 1, -1, 1).astype(x.dtype)


def _spatial_filter(x: np.ndarray, fn) -> np.ndarray:
    flat = x.reshape((-1,) + x.shape[-2:]).astype(np.float64)
    out = np.stack([fn(p) for p in flat]).reshape(x.shape)
    return np.clip(out, -1, 1).astype(x.dtype)


def disk_kernel(radius: float) -> np.ndarray:
    r = int(math.ceil(radius))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    k = (xx ** 2 + yy ** 2 <= radius ** 2).astype(np.float64)
    return k / k.sum()


def natural_perturb(x, kind: str, strength: float) -> np.ndarray:
    """Apply a natural corruption to images in [-1, 1] (any leading shape,
    last three axes C, H, W).

    Strength ranges: jpeg_like quality in [1, 100]; gaussian_blur sigma in
    [0, 10]; defocus_blur radius in [0, 10]; brightness shift in [-2, 2].
    The identity strengths (100 for jpeg_like, 0 otherwise) return an exact
    copy.
    """
    x = np.asarray(getattr(x, "data", x))
    if x.ndim < 3:
        raise ValueError(f"expected (..., C, H, W) images, got shape {x.shape}")
    ranges = {"jpeg_like": (1, 100), "gaussian_blur": (0, 10),
              "defocus_blur": (0, 10), "brightness": (-2, 2)}
    if kind not in ranges:
        raise ValueError(f"unknown perturbation {kind!r}; expected one of {PERTURBATIONS}")
    lo, hi = ranges[kind]
    if not lo <= strength <= hi:
        raise ValueError(f"{kind} strength {strength} outside [{lo}, {hi}]")
    identity = 100 if kind == "jpeg_like" else 0
    if strength == identity:
        return x.copy()
    if kind == "jpeg_like":
        return _jpeg_like(x, strength)
    if kind == "gaussian_blur":
        return _spatial_filter(x, lambda p: ndimage.gaussian_filter(p, strength, mode="reflect"))
    if kind == "defocus_blur":
        k = disk_kernel(strength)
        return _spatial_filter(x, lambda p: ndimage.convolve(p, k, mode="reflect"))
    return np.clip(x + strength, -1, 1).astype(x.dtype)


def robustness_eval(classifier: Classifier, clean, clean_labels, adv, adv_labels,
                    kind: str, strengths) -> list[dict]:
    """Accuracy of clean images and misclassification of adversarial images
    (with respect to their original labels) at each perturbation strength."""
    clean_labels = np.asarray(clean_labels)
    adv_labels = np.asarray(adv_labels)
    rows = []
    for s in strengths:
        c = classifier.predict(natural_perturb(clean, kind, s))
        a = classifier.predict(natural_perturb(adv, kind, s))
        rows.append({
            "kind": kind, "strength": float(s),
            "clean_accuracy": 100.0 * float((c == clean_labels).mean()),
            "adv_accuracy": 100.0 * float((a == adv_labels).mean()),
            "adv_misclassified": 100.0 * float((a != adv_labels).mean()),
        })
    return rows


def first_strength_below(rows, accuracy: float = 60.0):
    """First row (in the given order) whose clean accuracy is below ``accuracy``."""
    for r in rows:
        if r["clean_accuracy"] < accuracy:
            return r
    return None


# ---------------------------------------------------------------- campaigns


def _mean_se(values):
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return 0.0, 0.0
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


@dataclass
class MetricsReport:
    setting: str
    label: str
    config: dict
    results: list = field(default_factory=list)
    fid_local: float = float("nan")
    kid_local: float = float("nan")
    kid_local_std: float = float("nan")
    fid_clean_floor: float = float("nan")
    hardware: dict = field(default_factory=dict)
    image_files: list = field(default_factory=list)

    @property
    def asr(self) -> float:
        return compute_asr(self.results)

    def aggregates(self, include_timing: bool = True) -> dict:
        rs = self.results
        it_mean, it_se = _mean_se([r.iterations for r in rs])
        agg = {
            "attempts": len(rs),
            "successes": sum(r.success for r in rs),
            "asr": self.asr,
            "avg_queries": float(np.mean([r.queries for r in rs])),
            "avg_judge_queries": float(np.mean([r.judge_queries for r in rs])),
            "avg_iterations": it_mean,
            "se_iterations": it_se,
            "fid_local": self.fid_local,
            "kid_local": self.kid_local,
            "kid_local_std": self.kid_local_std,
            "fid_local_clean_floor": self.fid_clean_floor,
        }
        deltas = [r.final_delta for r in rs if r.final_delta is not None]
        if deltas:
            agg["avg_final_delta"] = float(np.mean(deltas))
        if include_timing:
            agg["avg_time"] = float(np.mean([r.wall_time for r in rs]))
        return agg

    def to_dict(self, include_timing: bool = True) -> dict:
        records = []
        for r, f in zip(self.results, self.image_files or [None] * len(self.results)):
            rec = r.record()
            if not include_timing:
                rec.pop("wall_time", None)
            rec["image_file"] = f
            records.append(rec)
        out = {
            "setting": self.setting,
            "label": self.label,
            "metric_note": "FID-local and KID-local use features of the locally trained extractor",
            "config": self.config,
            "aggregates": self.aggregates(include_timing),
            "records": records,
        }
        if include_timing:
            out["hardware"] = self.hardware
        return out

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def images(self) -> np.ndarray:
        return np.stack([r.image for r in self.results])

    def original_labels(self) -> np.ndarray:
        return np.array([r.original_label for r in self.results])


def summary_table(reports) -> str:
    head = f"{'Setting':<22} {'ASR (%)':>8} {'FID-local':>10} {'KID-local':>10} {'avg query':>10} {'avg time (s)':>13}"
    lines = [head, "-" * len(head)]
    for rep in reports:
        a = rep.aggregates()
        lines.append(f"{rep.label:<22} {a['asr']:>8.1f} {a['fid_local']:>10.3f} "
                     f"{a['kid_local']:>10.4f} {a['avg_queries']:>10.2f} {a['avg_time']:>13.2f}")
    if reports:
        lines.append(f"clean-vs-clean FID-local floor: {reports[0].fid_clean_floor:.3f}")
    return "\n".join(lines) + "\n"


def hardware_info() -> dict:
    return {"platform": platform.platform(), "machine": platform.machine(),
            "processor": platform.processor(), "python": platform.python_version(),
            "numpy": np.__version__, "cpu_count": os.cpu_count()}


def image_pool(bench, n: int) -> np.ndarray:
    """Indices into the test split of the first ``n`` images the target
    classifies correctly."""
    pred = bench.target.predict(bench.test.images)
    ok = np.flatnonzero(pred == bench.test.labels)
    if len(ok) < n:
        raise ValueError(f"only {len(ok)} correctly classified test images, {n} requested")
    return ok[:n]


def lm_partner(bench, correct: np.ndarray, source: int, seed: int) -> int:
    """Deterministically choose a correctly classified test image whose label
    differs from the source's."""
    y = bench.test.labels[source]
    cands = correct[bench.test.labels[correct] != y]
    return int(np.random.default_rng([seed, int(source)]).choice(cands))


_BENCH = None


def _init_worker(bench):
    global _BENCH
    _BENCH = bench


def _run_one(task):
    kind, cfg, idx, partner = task
    b = _BENCH
    x = b.test.images[idx]
    if kind == "st":
        r = st_attack(x, b.target, b.surrogate, b.extractor, b.denoiser, b.schedule, cfg,
                      label=int(b.test.labels[idx]))
    else:
        r = lm_attack(x, b.test.images[partner], b.target, b.denoiser, b.schedule, cfg,
                      y_s=int(b.test.labels[idx]), y_t=int(b.test.labels[partner]))
    r.image_id = f"test{int(idx):04d}"
    return r


def campaign_tasks(bench, config: RunConfig, setting: str):
    n = config.campaign.n_images
    if n < 1:
        raise ValueError("a campaign needs at least one image")
    pool = image_pool(bench, n)
    if setting == "st":
        return [("st", replace(config.st, seed=config.st.seed + i), int(idx), None)
                for i, idx in enumerate(pool)]
    if setting == "lm":
        pred = bench.target.predict(bench.test.images)
        correct = np.flatnonzero(pred == bench.test.labels)
        return [("lm", replace(config.lm, seed=config.lm.seed + i), int(idx),
                 lm_partner(bench, correct, int(idx), config.lm.seed))
                for i, idx in enumerate(pool)]
    raise ValueError(f"unknown campaign setting {setting!r}")


def setting_label(config: RunConfig, setting: str) -> str:
    if setting == "st":
        return f"ST {config.st.box}-box {config.st.mode}"
    return f"LM {config.lm.method} {config.lm.strategy}"


def clean_floor(bench, n: int, extractor: Classifier) -> float:
    """FID-local between two disjoint groups of clean test images."""
    imgs = bench.test.images
    m = min(n, len(imgs) // 2)
    return compute_fid(FeatureSet.from_images(extractor, imgs[:m]),
                       FeatureSet.from_images(extractor, imgs[m:2 * m]))


def run_campaign(bench, config: RunConfig, setting: str, out_dir=None, jobs: int | None = None,
                 progress=None) -> MetricsReport:
    """Attack the image pool with one setting ("st" or "lm") and aggregate.

    Adversarial images go to ``out_dir/images/<image_id>_<setting>.pgm``
    (``.ppm`` for colour) and the report to ``out_dir/report_<setting>.json``.
    If an attack fails the records gathered so far are written to
    ``report_<setting>.partial.json`` and CampaignError is raised.
    """
    config.validate()
    tasks = campaign_tasks(bench, config, setting)
    jobs = jobs or config.campaign.jobs
    report = MetricsReport(setting=setting, label=setting_label(config, setting),
                           config=config.to_dict(), hardware=hardware_info())
    out = Path(out_dir) if out_dir is not None else None
    try:
        if jobs > 1:
            with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(bench,)) as ex:
                for r in ex.map(_run_one, tasks):
                    report.results.append(r)
                    if progress:
                        progress(r)
        else:
            _init_worker(bench)
            for t in tasks:
                r = _run_one(t)
                report.results.append(r)
                if progress:
                    progress(r)
    except Exception as exc:
        if out is not None and report.results:
            out.mkdir(parents=True, exist_ok=True)
            (out / f"report_{setting}.partial.json").write_text(
                json.dumps(report.to_dict(), indent=2, sort_keys=True, default=str) + "\n")
        raise CampaignError(f"campaign aborted after {len(report.results)} attacks: {exc}",
                            report) from exc

    adv = FeatureSet.from_images(bench.extractor, report.images())
    clean = FeatureSet.from_images(bench.extractor, bench.test.images[[t[2] for t in tasks]])
    report.fid_local = compute_fid(adv, clean)
    k = min(len(tasks), 50)
    if k >= 2:
        report.kid_local, report.kid_local_std = compute_kid(
            adv, clean, subset_size=max(2, k // 2), subsets=50, seed=config.seed, return_std=True)
    report.fid_clean_floor = clean_floor(bench, len(tasks), bench.extractor)

    if out is not None:
        img_dir = out / "images"
        img_dir.mkdir(parents=True, exist_ok=True)
        for r in report.results:
            ext = "ppm" if r.image.shape[0] == 3 else "pgm"
            name = f"{r.image_id}_{r.setting}.{ext}"
            write_image(r.image, img_dir / name)
            report.image_files.append(f"images/{name}")
        report.write(out / f"report_{setting}.json")
    return report


def load_report_results(path) -> list[AttackResult]:
    """Rebuild AttackResults (with images) from a report and its image files."""
    from .data import read_image

    path = Path(path)
    doc = json.loads(path.read_text())
    out = []
    for rec in doc["records"]:
        img = read_image(path.parent / rec["image_file"]) if rec.get("image_file") else None
        out.append(AttackResult.from_record(rec, img))
    return out
