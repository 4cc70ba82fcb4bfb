"""Latent masking attack.

Both images are encoded to latents; an interpretation-map TopK mask picks
which latent pixels of the target image replace those of the source, and
the mask shrinks until the decoded image is no longer classified as the
source label (or the mask is empty).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import LMConfig
from .diffusion import NoiseSchedule, ddim_invert, diffuse, sample, step_plan
from .models import Classifier, Denoiser
from .result import AttackResult
from .saliency import interpretation_map
from .tensor import ShapeError, Tensor

DELTA_MAX = 99.0


class PairPreconditionError(ValueError):
    pass


@dataclass
class Mask:
    values: np.ndarray      # (H, W) in {0, 1}
    delta: float
    strategy: str

    @property
    def count(self) -> int:
        return int(self.values.sum())


def _arr(m) -> np.ndarray:
    return np.asarray(getattr(m, "values", m), dtype=np.float64)


def mask_size(delta: float, n: int) -> int:
    # round half up; Python's round() would send 0.5 to the even neighbour
    return int(np.floor(delta / 100.0 * n + 0.5))


def topk_mask(map_s, map_t, strategy: str, delta: float) -> Mask:
    """Binary mask of the round(delta% * H*W) highest-scoring pixels.

    Ties are broken by ascending flat index.
    """
    ms, mt = _arr(map_s), _arr(map_t)
    if ms.shape != mt.shape:
        raise ShapeError(f"map shapes {ms.shape} and {mt.shape} differ")
    if not 0 <= delta <= DELTA_MAX:
        raise ValueError(f"delta {delta} outside [0, {DELTA_MAX}]")
    if strategy == "source":
        score = np.abs(ms)
    elif strategy == "target":
        score = np.abs(mt)
    elif strategy == "sum":
        score = np.abs(ms) + np.abs(mt)
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    k = mask_size(delta, score.size)
    order = np.argsort(-score.reshape(-1), kind="stable")
    flat = np.zeros(score.size, dtype=np.float32)
    flat[order[:k]] = 1.0
    return Mask(flat.reshape(score.shape), float(delta), strategy)


def decrement_delta(delta: float, target_logits, y: int, gamma: float) -> float:
    """Shrink delta by gamma * (z_y - max_{i!=y} z_i) / z_y, at least by 1,
    with z the softmax of the logits."""
    logits = np.asarray(getattr(target_logits, "data", target_logits), dtype=np.float64).reshape(-1)
    z = np.exp(logits - logits.max())
    z /= z.sum()
    others = np.delete(z, y)
    step = max(gamma * (z[y] - others.max()) / z[y], 1.0)
    return float(delta - step)


def blend_latents(x_s_T, x_t_T, mask) -> Tensor:
    xs = np.asarray(getattr(x_s_T, "data", x_s_T))
    xt = np.asarray(getattr(x_t_T, "data", x_t_T))
    if xs.shape != xt.shape:
        raise ShapeError(f"latent shapes {xs.shape} and {xt.shape} differ")
    m = _arr(mask)
    if m.shape != xs.shape[-2:]:
        raise ShapeError(f"mask shape {m.shape} does not match latent {xs.shape}")
    return Tensor(np.where(m.astype(bool), xt, xs), dtype=xs.dtype)


def encode(denoiser: Denoiser, x0: np.ndarray, schedule: NoiseSchedule, encoding: str,
           s_df: int, rng: np.random.Generator) -> Tensor:
    """Latent at timestep T, by DDIM inversion or the closed-form noising."""
    if encoding == "invert":
        return ddim_invert(denoiser, x0, step_plan(schedule.T, s_df), schedule)
    w = rng.standard_normal(x0.shape).astype(np.float32)
    with T.no_grad():
        return diffuse(x0, schedule.T, w, schedule)


def lm_attack(x_s, x_t, target: Classifier, denoiser: Denoiser, schedule: NoiseSchedule,
              config: LMConfig, y_s: int | None = None, y_t: int | None = None) -> AttackResult:
    start = time.perf_counter()
    xs = np.asarray(getattr(x_s, "data", x_s), dtype=np.float32).reshape((1,) + np.shape(x_s)[-3:])
    xt = np.asarray(getattr(x_t, "data", x_t), dtype=np.float32).reshape((1,) + np.shape(x_t)[-3:])
    rng = np.random.default_rng(config.seed)
    queries = 0
    pred_s, pred_t = target.predict(np.concatenate([xs, xt]))
    queries += 2
    if y_s is None:
        y_s = int(pred_s)
    if y_t is None:
        y_t = int(pred_t)
    if pred_s != y_s or pred_t != y_t or y_s == y_t:
        raise PairPreconditionError(
            f"pair must be correctly classified with different labels "
            f"(labels {y_s}, {y_t}; predictions {pred_s}, {pred_t})")

    lat_s = encode(denoiser, xs, schedule, config.encoding, config.s_df, rng)
    lat_t = encode(denoiser, xt, schedule, config.encoding, config.s_df, rng)
    m_s = interpretation_map(config.method, target, xs, y_s)
    m_t = interpretation_map(config.method, target, xt, y_t)
    plan = step_plan(schedule.T, config.s_sp)

    delta = min(float(config.delta_init), DELTA_MAX)
    deltas, iterations = [], 0
    best = None
    while delta > 0:
        mask = topk_mask(m_s, m_t, config.strategy, delta)
        x_hat = blend_latents(lat_s, lat_t, mask)
        img = sample(denoiser, x_hat, plan, schedule).data
        logits = target.logits(img)[0]
        queries += 1
        iterations += 1
        deltas.append(delta)
        label = int(logits.argmax())
        if label != y_s:
            best = (img, label, list(deltas))
            if config.search == "first":
                break
            # keep shrinking while the label stays flipped, stepping on the
            # confidence of the label it flipped to
            delta = decrement_delta(delta, logits, label, config.gamma)
            continue
        if best is not None:
            break
        delta = decrement_delta(delta, logits, y_s, config.gamma)

    if best is not None:
        img, label, deltas = best
        success = True
    else:
        # loop exhausted: report the last decoded image and the final delta
        deltas.append(delta)
        success = False
    return AttackResult(
        image=img[0], success=bool(success), original_label=int(y_s), adversarial_label=label,
        iterations=iterations, queries=queries, judge_queries=queries,
        wall_time=time.perf_counter() - start, delta_trace=[float(d) for d in deltas],
        setting=f"lm-{config.method}-{config.strategy}",
    )
