"""Semantic transformation attack on a handful of test images.

Each image is encoded to a diffusion latent; the latent and a private copy
of the denoiser are then tuned until the regenerated picture is classified
differently. Runs the white-box judge (the target itself) and the black-box
judge (an independently trained surrogate) side by side.
"""

import dataclasses

from _common import OUT, setup
from semadv.attack_st import st_attack
from semadv.data import write_image
from semadv.evaluation import image_pool, transfer_eval

config, bench = setup()
pool = image_pool(bench, 4)

for box in ("white", "black"):
    cfg = dataclasses.replace(config.st, box=box)
    results = []
    for i, idx in enumerate(pool):
        cfg_i = dataclasses.replace(cfg, seed=cfg.seed + i)
        r = st_attack(bench.test.images[idx], bench.target, bench.surrogate, bench.extractor,
                      bench.denoiser, bench.schedule, cfg_i, label=int(bench.test.labels[idx]))
        results.append(r)
        write_image(r.image, OUT / f"st_{box}_{idx}.pgm")
        write_image(bench.test.images[idx], OUT / f"orig_{idx}.pgm")
        print(f"[{box}] test image {idx}: label {r.original_label} -> {r.adversarial_label} "
              f"success={r.success} after {r.iterations} steps, {r.queries} target queries, "
              f"{r.wall_time:.1f}s")
    imgs = [r.image for r in results]
    labels = [r.original_label for r in results]
    print(f"[{box}] fooling the unseen victim: "
          f"{transfer_eval(imgs, labels, {'victim': bench.victim})['victim']:.0f}%")
