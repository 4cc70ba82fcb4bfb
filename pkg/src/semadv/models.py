"""Small convolutional networks: noise-prediction denoiser and classifiers.

Also holds the training loops, the optimizers they use, the checkpoint
codec, and the two divergences the semantic-transformation loss is built
from (feature-space perceptual distance and logit KL).
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError, NonFiniteError
from .diffusion import NoiseSchedule

MAGIC = b"SADVCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, op_kind: str | None = None):
        super().__init__(f"training diverged at epoch {epoch}" + (f" ({op_kind})" if op_kind else ""))
        self.epoch = epoch


def _he(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Module:
    kind = "module"

    def __init__(self):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.metadata: dict = {}

    def arch(self) -> dict:
        raise NotImplementedError

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(np.asarray(value, dtype=np.float32), requires_grad=True)

    def _conv(self, x: Tensor, name: str, pad: int = 1) -> Tensor:
        w, b = self.params[name + ".w"], self.params[name + ".b"]
        return T.conv2d(x, w, pad=pad) + T.reshape(b, (1, -1, 1, 1))

    def requires_grad_(self, flag: bool = True):
        for p in self.params.values():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def clone(self):
        other = type(self)(**self.arch())
        for k, p in self.params.items():
            other.params[k] = Tensor(p.data.copy(), requires_grad=p.requires_grad, dtype=p.data.dtype)
        other.metadata = dict(self.metadata)
        return other

    def state_equal(self, other) -> bool:
        return list(self.params) == list(other.params) and all(
            np.array_equal(self.params[k].data, other.params[k].data) for k in self.params)

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())


def _batch(x) -> tuple[Tensor, bool]:
    x = T._as_tensor(x)
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected (C,H,W) or (N,C,H,W), got {x.shape}")
    return x, False


# ---------------------------------------------------------------- denoiser


def timestep_embedding(t, dim: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class Denoiser(Module):
    """Three-level conv encoder/decoder with skip connections. A sinusoidal
    timestep embedding is projected and added as a per-channel bias at each
    level."""

    kind = "denoiser"

    def __init__(self, channels: int = 1, width: int = 32, tdim: int = 32, seed: int = 0):
        super().__init__()
        self.channels, self.width, self.tdim, self.seed = channels, width, tdim, seed
        rng = np.random.default_rng(seed)
        w1, w2 = width, 2 * width
        convs = [("in", channels, w1), ("enc1", w1, w1), ("enc2", w1, w2), ("mid1", w2, w2),
                 ("mid2", w2, w2), ("dec2", w2 + w2, w2), ("dec1", w2 + w1, w1), ("out", w1, channels)]
        self._add("temb.w", _he(rng, (tdim, tdim), tdim))
        self._add("temb.b", np.zeros(tdim))
        for name, cin, cout in convs:
            if name == "out":
                self._add(name + ".w", np.zeros((cout, cin, 3, 3)))
            else:
                self._add(name + ".w", _he(rng, (cout, cin, 3, 3), cin * 9))
            self._add(name + ".b", np.zeros(cout))
        for name, c in (("t1", w1), ("t2", w2), ("t3", w2)):
            self._add(name + ".w", _he(rng, (tdim, c), tdim) * 0.5)
            self._add(name + ".b", np.zeros(c))

    def arch(self) -> dict:
        return {"channels": self.channels, "width": self.width, "tdim": self.tdim, "seed": self.seed}

    def _tproj(self, emb: Tensor, name: str) -> Tensor:
        p = emb @ self.params[name + ".w"] + self.params[name + ".b"]
        return T.reshape(p, p.shape + (1, 1))

    def __call__(self, x_t, t) -> Tensor:
        x, squeeze = _batch(x_t)
        if x.shape[1] != self.channels:
            raise ShapeError(f"denoiser expects {self.channels} channels, got {x.shape[1]}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ShapeError("spatial size must be divisible by 4")
        n = x.shape[0]
        tt = np.broadcast_to(np.asarray(t), (n,))
        emb = Tensor(timestep_embedding(tt, self.tdim))
        emb = T.silu(emb @ self.params["temb.w"] + self.params["temb.b"])
        h = self._conv(x, "in")
        h1 = T.silu(self._conv(h, "enc1") + self._tproj(emb, "t1"))
        h2 = T.silu(self._conv(T.avg_pool2d(h1), "enc2") + self._tproj(emb, "t2"))
        m = T.silu(self._conv(T.avg_pool2d(h2), "mid1") + self._tproj(emb, "t3"))
        m = T.silu(self._conv(m, "mid2"))
        d2 = T.silu(self._conv(T.concat([T.upsample_nearest(m), h2], axis=1), "dec2"))
        d1 = T.silu(self._conv(T.concat([T.upsample_nearest(d2), h1], axis=1), "dec1"))
        out = self._conv(d1, "out")
        return T.reshape(out, out.shape[1:]) if squeeze else out


def denoiser_forward(model: Denoiser, x_t, t) -> Tensor:
    return model(x_t, t)


# ---------------------------------------------------------------- classifier


class Classifier(Module):
    """Four conv blocks (one 2x pooling after the second), global average
    pooling and a linear head.

    Registered activations: ``block1``..``block4`` (post-ReLU),
    ``block1.pre``..``block4.pre`` (conv output including bias) and
    ``features`` (pooled penultimate vector).
    """

    kind = "classifier"
    BLOCKS = ("block1", "block2", "block3", "block4")

    def __init__(self, channels: int = 1, width: int = 16, K: int = 4, seed: int = 0):
        super().__init__()
        self.channels, self.width, self.K, self.seed = channels, width, K, seed
        rng = np.random.default_rng(seed)
        chans = [channels, width, 2 * width, 2 * width, 2 * width]
        for i, name in enumerate(self.BLOCKS):
            self._add(name + ".w", _he(rng, (chans[i + 1], chans[i], 3, 3), chans[i] * 9))
            self._add(name + ".b", np.full(chans[i + 1], 0.01))
        self._add("head.w", _he(rng, (2 * width, K), 2 * width) * 0.5)
        self._add("head.b", np.zeros(K))

    @property
    def layers(self) -> tuple:
        return self.BLOCKS + tuple(b + ".pre" for b in self.BLOCKS) + ("features",)

    @property
    def feature_dim(self) -> int:
        return 2 * self.width

    def arch(self) -> dict:
        return {"channels": self.channels, "width": self.width, "K": self.K, "seed": self.seed}

    def __call__(self, x, capture: Iterable[str] = ()) -> tuple[Tensor, dict]:
        capture = tuple(capture)
        for name in capture:
            if name not in self.layers:
                raise KeyError(f"unknown layer {name!r}; known: {self.layers}")
        x, squeeze = _batch(x)
        acts: dict[str, Tensor] = {}
        h = x
        for i, name in enumerate(self.BLOCKS):
            pre = self._conv(h, name)
            h = T.relu(pre)
            acts[name + ".pre"], acts[name] = pre, h
            if i == 1:
                h = T.avg_pool2d(h)
        feats = T.mean(h, axis=(2, 3))
        acts["features"] = feats
        logits = feats @ self.params["head.w"] + self.params["head.b"]
        if squeeze:
            logits = T.reshape(logits, (self.K,))
        return logits, {k: acts[k] for k in capture}

    def predict(self, x, batch: int = 256) -> np.ndarray:
        x = np.asarray(getattr(x, "data", x))
        if x.ndim == 3:
            x = x[None]
        out = []
        with T.no_grad():
            for i in range(0, len(x), batch):
                out.append(self(Tensor(x[i:i + batch]))[0].data.argmax(axis=1))
        return np.concatenate(out)

    def logits(self, x, batch: int = 256) -> np.ndarray:
        x = np.asarray(getattr(x, "data", x))
        if x.ndim == 3:
            x = x[None]
        with T.no_grad():
            return np.concatenate([self(Tensor(x[i:i + batch]))[0].data
                                   for i in range(0, len(x), batch)])


def classifier_forward(model: Classifier, x, capture: Iterable[str] = ()):
    return model(x, capture)


# ---------------------------------------------------------------- optimizers


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params, self.lr = list(params), lr

    def step(self, grads: Sequence[np.ndarray]) -> None:
        for p, g in zip(self.params, grads):
            p.data = (p.data - self.lr * g).astype(p.data.dtype, copy=False)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params, self.lr, self.betas, self.eps = list(params), lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            upd = self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = (p.data - upd).astype(p.data.dtype, copy=False)


def make_optimizer(kind: str, params, lr: float):
    if kind == "sgd":
        return SGD(params, lr)
    if kind == "adam":
        return Adam(params, lr)
    raise ValueError(f"unknown optimizer {kind!r}")


# ---------------------------------------------------------------- training


def cross_entropy(logits: Tensor, labels: np.ndarray, smoothing: float = 0.0) -> Tensor:
    """Mean cross-entropy against one-hot targets mixed with ``smoothing``
    mass spread uniformly over all classes."""
    logp = T.log_softmax(logits, axis=1)
    k = logp.shape[1]
    target = np.full(logp.shape, smoothing / k, dtype=logp.data.dtype)
    target[np.arange(len(labels)), labels] += 1.0 - smoothing
    return -T.mean(T.sum(logp * Tensor(target), axis=1))


def accuracy(model: Classifier, images: np.ndarray, labels: np.ndarray) -> float:
    return float((model.predict(images) == labels).mean()) if len(labels) else float("nan")


def train_classifier(train, config, test=None) -> Classifier:
    """Cross-entropy training with a fixed seed.

    ``train``/``test`` are ToyDataset-like (``images``, ``labels``, ``K``).
    Accuracies land in ``model.metadata``.
    """
    if len(train.labels) == 0:
        raise ValueError("empty dataset")
    K = int(train.K)
    if train.labels.min() < 0 or train.labels.max() >= K:
        raise ValueError("labels outside [0, K)")
    model = Classifier(channels=train.images.shape[1], width=config.width, K=K, seed=config.seed)
    params = list(model.params.values())
    opt = make_optimizer(config.optimizer, params, config.lr)
    rng = np.random.default_rng(config.seed + 7919)
    n = len(train.labels)
    losses = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for i in range(0, n, config.batch):
            idx = order[i:i + config.batch]
            try:
                logits, _ = model(Tensor(train.images[idx]))
                loss = cross_entropy(logits, train.labels[idx], config.label_smoothing)
            except NonFiniteError as e:
                raise TrainingDivergedError(epoch, e.op_kind) from None
            opt.step(T.grad(loss, params))
            losses.append(float(loss.data))
    model.metadata = {
        "role": "classifier",
        "seed": config.seed,
        "epochs": config.epochs,
        "lr": config.lr,
        "batch": config.batch,
        "optimizer": config.optimizer,
        "label_smoothing": config.label_smoothing,
        "dataset_fingerprint": getattr(train, "fingerprint", lambda: None)(),
        "train_accuracy": accuracy(model, train.images, train.labels),
        "final_loss": losses[-1],
    }
    if test is not None:
        model.metadata["test_accuracy"] = accuracy(model, test.images, test.labels)
    return model


def denoiser_batch_loss(model: Denoiser, x0: np.ndarray, t: np.ndarray, w: np.ndarray,
                        schedule: NoiseSchedule) -> Tensor:
    """Mean over the batch of the per-element squared noise error."""
    ab = schedule.alpha_bar[t].reshape(-1, 1, 1, 1)
    x_t = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * w
    pred = model(Tensor(x_t.astype(np.float32)), t)
    return T.mean(T.square(Tensor(w.astype(np.float32)) - pred))


def train_denoiser(train, schedule: NoiseSchedule, config, log_every: int = 0) -> Denoiser:
    """Minimize the noise-prediction objective over uniform t and Gaussian noise."""
    if len(train.labels) == 0:
        raise ValueError("empty dataset")
    model = Denoiser(channels=train.images.shape[1], width=config.width, seed=config.seed)
    params = list(model.params.values())
    opt = make_optimizer(config.optimizer, params, config.lr)
    rng = np.random.default_rng(config.seed + 104729)
    n = len(train.labels)
    steps_per_epoch = max(1, n // config.batch)
    trace = []
    for step in range(config.steps):
        idx = rng.integers(0, n, size=config.batch)
        t = rng.integers(1, schedule.T + 1, size=config.batch)
        w = rng.standard_normal(train.images[idx].shape)
        try:
            loss = denoiser_batch_loss(model, train.images[idx], t, w, schedule)
        except NonFiniteError as e:
            raise TrainingDivergedError(step // steps_per_epoch, e.op_kind) from None
        opt.step(T.grad(loss, params))
        trace.append(float(loss.data))
        if log_every and step % log_every == 0:
            print(f"denoiser step {step}: loss {np.mean(trace[-log_every:]):.4f}", flush=True)
    model.metadata = {
        "role": "denoiser",
        "seed": config.seed,
        "steps": config.steps,
        "epochs": config.steps / steps_per_epoch,
        "lr": config.lr,
        "batch": config.batch,
        "optimizer": config.optimizer,
        "dataset_fingerprint": getattr(train, "fingerprint", lambda: None)(),
        "final_loss": float(np.mean(trace[-50:])),
    }
    return model


# ---------------------------------------------------------------- divergences


def feature_embed(extractor: Classifier, x, batch: int = 256) -> np.ndarray:
    """Penultimate (pooled) activations, one row per image."""
    x = np.asarray(getattr(x, "data", x))
    if x.ndim == 3:
        x = x[None]
    with T.no_grad():
        return np.concatenate([
            extractor(Tensor(x[i:i + batch]), capture=("features",))[1]["features"].data
            for i in range(0, len(x), batch)]).astype(np.float64)


PERCEPTUAL_LAYERS = ("block1", "block2", "block3", "block4")


def _unit(a: Tensor, eps: float = 1e-8) -> Tensor:
    norm = T.sqrt(T.sum(T.square(a), axis=1, keepdims=True) + eps)
    return a / norm


def perceptual_distance(extractor: Classifier, x, y, layers=PERCEPTUAL_LAYERS) -> Tensor:
    """Sum over layers of the mean squared difference between channel-wise
    unit-normalized activation maps."""
    x, y = T._as_tensor(x), T._as_tensor(y)
    if x.shape != y.shape:
        raise ShapeError(f"perceptual_distance: shapes {x.shape} and {y.shape} differ")
    _, ax = extractor(x, capture=layers)
    _, ay = extractor(y, capture=layers)
    total = None
    for name in layers:
        d = T.mean(T.square(_unit(ax[name]) - _unit(ay[name])))
        total = d if total is None else total + d
    return total


def kl_divergence(logits_p, logits_q) -> Tensor:
    """KL(softmax(p) || softmax(q)), summed over classes and averaged over
    any leading batch dimension."""
    p, q = T._as_tensor(logits_p), T._as_tensor(logits_q)
    if p.shape != q.shape:
        raise ShapeError(f"kl_divergence: shapes {p.shape} and {q.shape} differ")
    lp, lq = T.log_softmax(p, axis=-1), T.log_softmax(q, axis=-1)
    per = T.sum(T.exp(lp) * (lp - lq), axis=-1)
    return T.mean(per) if per.ndim else per


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: Module, path) -> None:
    meta = {"kind": model.kind, "arch": model.arch(), "metadata": model.metadata}
    meta_b = json.dumps(meta, sort_keys=True).encode("utf-8")
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(meta_b)) + meta_b
    out += struct.pack("<I", len(model.params))
    for name, p in model.params.items():
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<I", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape)
        out += np.ascontiguousarray(p.data, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals


def load_checkpoint(path, into: Module | None = None) -> Module:
    """Load a checkpoint. With ``into``, parameters are validated against that
    model's declared architecture and copied into it."""
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("bad magic")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    try:
        meta = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError("corrupt metadata") from None
    blobs = OrderedDict()
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = tuple(np.atleast_1d(r.u32(rank))) if rank else ()
        count = int(np.prod(shape)) if shape else 1
        blobs[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after last record")
    if into is None:
        cls = {"denoiser": Denoiser, "classifier": Classifier}.get(meta.get("kind"))
        if cls is None:
            raise CheckpointError(f"unknown model kind {meta.get('kind')!r}")
        into = cls(**meta["arch"])
    expected = {k: p.shape for k, p in into.params.items()}
    got = {k: v.shape for k, v in blobs.items()}
    if expected != got:
        missing = sorted(set(expected) ^ set(got))
        bad = sorted(k for k in set(expected) & set(got) if expected[k] != got[k])
        raise CheckpointError(f"shape mismatch against {into.kind} architecture: "
                              f"names {missing[:4]} shapes {bad[:4]}")
    for k, v in blobs.items():
        into.params[k].data = v
    into.metadata = meta.get("metadata", {})
    return into
