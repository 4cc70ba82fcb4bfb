"""Everything an attack campaign needs: data, schedule and trained models.

A workbench directory holds ``dataset.npz`` plus one checkpoint per model
role. ``build_workbench`` trains whatever is missing and can cache the whole
directory under a key derived from the training configuration and the
sources of the modules that determine the trained weights.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

from . import data as _data
from . import diffusion as _diffusion
from . import models as _models
from . import tensor as _tensor
from .config import RunConfig
from .data import ToyDataset, gen_toy_dataset
from .diffusion import NoiseSchedule, build_schedule
from .models import Classifier, Denoiser, load_checkpoint, save_checkpoint, train_classifier, train_denoiser

ROLES = ("target", "surrogate", "extractor", "victim")


@dataclass
class Workbench:
    dataset: ToyDataset
    train: ToyDataset
    test: ToyDataset
    schedule: NoiseSchedule
    denoiser: Denoiser
    target: Classifier
    surrogate: Classifier
    extractor: Classifier
    victim: Classifier

    def classifier(self, role: str) -> Classifier:
        return getattr(self, role)

    def save(self, directory) -> dict:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.dataset.save(d / "dataset.npz")
        paths = {"dataset": d / "dataset.npz", "denoiser": d / "denoiser.ckpt"}
        save_checkpoint(self.denoiser, paths["denoiser"])
        for role in ROLES:
            paths[role] = d / f"{role}.ckpt"
            save_checkpoint(self.classifier(role), paths[role])
        return paths


def training_key(config: RunConfig) -> str:
    cfg = config.to_dict()
    relevant = {k: cfg[k] for k in ("data", "schedule", "denoiser", "classifiers")}
    relevant["seed"] = cfg["seed"]
    h = hashlib.sha256(json.dumps(relevant, sort_keys=True).encode())
    for mod in (_tensor, _models, _diffusion, _data):
        h.update(Path(mod.__file__).read_bytes())
    return h.hexdigest()[:16]


def split_dataset(dataset: ToyDataset, config: RunConfig):
    return dataset.split(config.data.test_fraction)


def load_workbench(directory, config: RunConfig) -> Workbench:
    d = Path(directory)
    dataset = ToyDataset.load(d / "dataset.npz")
    train, test = split_dataset(dataset, config)
    schedule = build_schedule(config.schedule.T, config.schedule.beta_start, config.schedule.beta_end)
    models = {role: load_checkpoint(d / f"{role}.ckpt") for role in ("denoiser",) + ROLES}
    for role in ROLES:
        if not isinstance(models[role], Classifier):
            raise _models.CheckpointError(f"{role}.ckpt does not hold a classifier")
    if not isinstance(models["denoiser"], Denoiser):
        raise _models.CheckpointError("denoiser.ckpt does not hold a denoiser")
    return Workbench(dataset, train, test, schedule, **models)


def build_workbench(config: RunConfig, cache_dir=None, log=print) -> Workbench:
    """Generate the dataset and train all models, reusing a cached copy when
    ``cache_dir`` already holds one for the same configuration."""
    if cache_dir is not None:
        target_dir = Path(cache_dir) / training_key(config)
        if (target_dir / "complete").exists():
            return load_workbench(target_dir, config)
    dc = config.data
    dataset = gen_toy_dataset(config.seed, dc.K, dc.n, dc.H, dc.W, dc.C)
    train, test = split_dataset(dataset, config)
    schedule = build_schedule(config.schedule.T, config.schedule.beta_start, config.schedule.beta_end)
    trained = {}
    for role in ROLES:
        log(f"training {role} classifier")
        m = train_classifier(train, config.classifiers[role], test)
        m.metadata["role"] = role
        trained[role] = m
    log("training denoiser")
    trained["denoiser"] = train_denoiser(train, schedule, config.denoiser)
    bench = Workbench(dataset, train, test, schedule, **trained)
    if cache_dir is not None:
        tmp = Path(cache_dir) / (training_key(config) + f".tmp{os.getpid()}")
        bench.save(tmp)
        (tmp / "config.json").write_text(json.dumps(asdict(config.data), sort_keys=True))
        (tmp / "complete").write_text("ok\n")
        try:
            os.replace(tmp, target_dir)
        except OSError:
            pass  # another process won the race; its copy is identical
        return load_workbench(target_dir if target_dir.exists() else tmp, config)
    return bench
