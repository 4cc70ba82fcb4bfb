"""Interpretation maps: Grad-CAM and a simplified FullGrad saliency."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import tensor as T
from .tensor import Tensor
from .models import Classifier


@dataclass
class InterpretationMap:
    values: np.ndarray       # (H, W), non-negative, max-normalized
    method: str
    label: int
    source_id: str = ""


def _resize(a: np.ndarray, hw: tuple) -> np.ndarray:
    if a.shape == tuple(hw):
        return a.astype(np.float64)
    zoom = (hw[0] / a.shape[0], hw[1] / a.shape[1])
    return ndimage.zoom(a.astype(np.float64), zoom, order=1, mode="nearest", grid_mode=True)


def _normalize(a: np.ndarray) -> np.ndarray:
    a = np.abs(a)
    m = a.max()
    return a / m if m > 0 else np.zeros_like(a)


def _single(x) -> np.ndarray:
    x = np.asarray(getattr(x, "data", x), dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[0] != 1:
        raise ValueError(f"expected one image, got shape {x.shape}")
    return x


def grad_cam(classifier: Classifier, x, y: int, layer: str = "block4") -> InterpretationMap:
    xb = _single(x)
    logits, acts = classifier(Tensor(xb), capture=(layer,))
    A = acts[layer]
    (gA,) = T.grad(logits[0, int(y)], [A])
    weights = gA.mean(axis=(2, 3), keepdims=True)
    cam = np.maximum((weights * A.data).sum(axis=1)[0], 0.0)
    cam = _resize(cam, xb.shape[2:])
    return InterpretationMap(_normalize(cam), "gradcam", int(y))


def _psi(a: np.ndarray, hw: tuple) -> np.ndarray:
    return _normalize(_resize(np.abs(a).sum(axis=0), hw))


def simple_fullgrad(classifier: Classifier, x, y: int) -> InterpretationMap:
    """Input-gradient times input plus every conv layer's bias-gradient term,
    each post-processed by |.|, channel sum, resize and max-normalization."""
    xb = _single(x)
    xt = Tensor(xb, requires_grad=True)
    layers = tuple(b + ".pre" for b in classifier.BLOCKS)
    logits, acts = classifier(xt, capture=layers)
    grads = T.grad(logits[0, int(y)], [xt] + [acts[k] for k in layers])
    hw = xb.shape[2:]
    total = _psi((grads[0] * xb)[0], hw)
    for name, g in zip(classifier.BLOCKS, grads[1:]):
        bias = classifier.params[name + ".b"].data.reshape(1, -1, 1, 1)
        total = total + _psi((g * bias)[0], hw)
    return InterpretationMap(_normalize(total), "simplefullgrad", int(y))


def interpretation_map(method: str, classifier: Classifier, x, y: int) -> InterpretationMap:
    if method == "gradcam":
        return grad_cam(classifier, x, y)
    if method == "simplefullgrad":
        return simple_fullgrad(classifier, x, y)
    raise ValueError(f"unknown interpretation method {method!r}")


def top_fraction_iou(values: np.ndarray, region: np.ndarray, fraction: float = 0.1) -> float:
    """IoU between the top ``fraction`` of map entries and a boolean region."""
    k = int(np.floor(fraction * values.size + 0.5))
    order = np.argsort(-values.reshape(-1), kind="stable")
    top = np.zeros(values.size, dtype=bool)
    top[order[:k]] = True
    region = region.reshape(-1).astype(bool)
    union = (top | region).sum()
    return float((top & region).sum() / union) if union else 0.0
