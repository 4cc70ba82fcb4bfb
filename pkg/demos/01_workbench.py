"""Tour of the trained workbench.

Prints classifier accuracies, draws a few DDIM samples from pure noise and
checks how faithfully inversion followed by sampling reproduces test images.
Images land in demos/out/.
"""

import numpy as np

from _common import OUT, setup
from semadv.data import write_image
from semadv.diffusion import ddim_invert, sample, step_plan

config, bench = setup()

for role in ("target", "surrogate", "extractor", "victim"):
    clf = bench.classifier(role)
    print(f"{role:<10} width {clf.width:>2}  test accuracy {clf.metadata['test_accuracy']:.3f}")

plan = step_plan(bench.schedule.T, 40)
noise = np.random.default_rng(0).standard_normal((8, 1, 16, 16)).astype(np.float32)
samples = sample(bench.denoiser, noise, plan, bench.schedule).data
print("labels of 8 fresh samples:", bench.target.predict(samples).tolist())
for i, img in enumerate(samples):
    write_image(img, OUT / f"sample_{i}.pgm")

x0 = bench.test.images[:16]
latent = ddim_invert(bench.denoiser, x0, plan, bench.schedule)
rec = sample(bench.denoiser, latent, plan, bench.schedule).data
print(f"invert + resample error on 16 test images: {np.abs(rec - x0).mean() / 2:.4f} (0..1 scale)")
print("labels kept:", int((bench.target.predict(rec) == bench.test.labels[:16]).sum()), "of 16")
