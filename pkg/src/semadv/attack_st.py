"""Semantic transformation attack.

The image is encoded to a latent, then the latent and/or a private copy of
the denoiser are optimized through the unrolled DDIM chain against

    lam * perceptual(x0, x_hat) - KL(judge(x0) || judge(x_hat))

until the regenerated image changes the target classifier's label.
"""

from __future__ import annotations

import time

import numpy as np

from . import tensor as T
from .attack_lm import encode
from .config import STConfig
from .diffusion import NoiseSchedule, sample, step_plan
from .models import Classifier, Denoiser, kl_divergence, make_optimizer, perceptual_distance
from .result import AttackResult
from .tensor import Tensor


def st_loss(extractor: Classifier, judge: Classifier, x0, x_hat, lam: float,
            ref_logits: Tensor | None = None) -> Tensor:
    x0 = T._as_tensor(x0)
    if ref_logits is None:
        with T.no_grad():
            ref_logits = judge(x0)[0]
    logits, _ = judge(x_hat)
    return perceptual_distance(extractor, x0, x_hat) * lam - kl_divergence(ref_logits, logits)


def select_judge(box: str, target: Classifier, surrogate: Classifier) -> Classifier:
    if box == "white":
        return target
    if box == "black":
        return surrogate
    raise ValueError(f"unknown box setting {box!r}")


def st_attack(x0, target: Classifier, surrogate: Classifier, extractor: Classifier,
              denoiser: Denoiser, schedule: NoiseSchedule, config: STConfig,
              label: int | None = None) -> AttackResult:
    """Run the attack on one image.

    ``label`` is the original class; when omitted it is read from the target
    (one extra query). The denoiser passed in is never modified.
    """
    start = time.perf_counter()
    x0 = np.asarray(getattr(x0, "data", x0), dtype=np.float32)
    x0 = x0.reshape((1,) + x0.shape[-3:])
    queries = judge_queries = 0
    if label is None:
        label = int(target.predict(x0)[0])
        queries += 1
    rng = np.random.default_rng(config.seed)
    tune_latent = config.mode in ("latent", "both")
    tune_model = config.mode in ("model", "both")
    latent = encode(denoiser, x0, schedule, config.encoding, config.s_df, rng).data
    judge = select_judge(config.box, target, surrogate)
    white = judge is target

    x0_t = Tensor(x0)
    with T.no_grad():
        ref_logits = judge(x0_t)[0]
    judge_queries += 1
    queries += white

    def initialise():
        # optional random start around the encoded latent; the gradient of
        # the KL term vanishes at the unperturbed reconstruction
        z = latent
        if config.init_noise > 0:
            z = latent + config.init_noise * rng.standard_normal(latent.shape).astype(np.float32)
        x_T = Tensor(np.array(z, dtype=np.float32), requires_grad=tune_latent)
        theta = denoiser.clone().requires_grad_(tune_model)
        variables, optimizers = [], []
        if tune_latent:
            variables.append(x_T)
            optimizers.append((make_optimizer(config.optimizer, [x_T], config.lr_latent), 1))
        if tune_model:
            params = list(theta.params.values())
            optimizers.append((make_optimizer(config.optimizer, params, config.lr_model), len(params)))
            variables.extend(params)
        return x_T, theta, variables, optimizers

    x_T, theta, variables, optimizers = initialise()
    plan_ft = step_plan(schedule.T, config.s_ft)
    plan_sp = step_plan(schedule.T, config.s_sp)
    budget = config.max_rounds + config.extension_blocks * config.s_ft
    trace: list[float] = []
    iterations = 0
    success = False
    adv_label = label
    image = None

    for rnd in range(budget):
        if (config.restart and rnd >= config.max_rounds
                and (rnd - config.max_rounds) % config.s_ft == 0):
            x_T, theta, variables, optimizers = initialise()
        x_hat = sample(theta, x_T, plan_ft, schedule, record_tape=True)
        logits, _ = judge(x_hat)
        loss = (perceptual_distance(extractor, x0_t, x_hat) * config.lam
                - kl_divergence(ref_logits, logits))
        judge_queries += 1
        queries += white
        trace.append(float(loss.data))
        flipped = int(logits.data.argmax()) != label
        if flipped:
            # the judged sample already differs; confirm before stepping away
            image = sample(theta, x_T, plan_sp, schedule).data
            adv_label = int(target.predict(image)[0])
            queries += 1
            if adv_label != label:
                success = True
                break
        grads = T.grad(loss, variables)
        i = 0
        for opt, n in optimizers:
            opt.step(grads[i:i + n])
            i += n
        iterations += 1
    if not success:
        image = sample(theta, x_T, plan_sp, schedule).data
        adv_label = int(target.predict(image)[0])
        queries += 1
        success = adv_label != label

    return AttackResult(
        image=image[0], success=bool(success), original_label=int(label),
        adversarial_label=adv_label, iterations=iterations, queries=int(queries),
        judge_queries=judge_queries, wall_time=time.perf_counter() - start,
        loss_trace=trace, setting=f"st-{config.mode}-{config.box}",
    )
