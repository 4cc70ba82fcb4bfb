"""Latent masking attack, with the mask shrunk as far as it will go.

A source and a target image of different classes are both encoded; Grad-CAM
maps pick the pixels where the target's latent replaces the source's. With
search="smallest" the attack keeps shrinking the mask while the label stays
flipped, which shows how little of the latent has to be transplanted.
"""

import dataclasses

import numpy as np

from _common import OUT, setup
from semadv.attack_lm import lm_attack
from semadv.data import write_image
from semadv.evaluation import image_pool, lm_partner

config, bench = setup()
cfg = dataclasses.replace(config.lm, search="smallest")
pred = bench.target.predict(bench.test.images)
correct = np.flatnonzero(pred == bench.test.labels)

for idx in image_pool(bench, 4):
    partner = lm_partner(bench, correct, int(idx), cfg.seed)
    r = lm_attack(bench.test.images[idx], bench.test.images[partner], bench.target, bench.denoiser,
                  bench.schedule, cfg, y_s=int(bench.test.labels[idx]), y_t=int(bench.test.labels[partner]))
    write_image(r.image, OUT / f"lm_{idx}_with_{partner}.pgm")
    trace = " ".join(f"{d:.0f}" for d in r.delta_trace)
    print(f"source {idx} (class {r.original_label}) + target {partner} (class {bench.test.labels[partner]}): "
          f"-> class {r.adversarial_label}, success={r.success}, final delta {r.final_delta:.1f}%")
    print(f"    delta trace: {trace}")
