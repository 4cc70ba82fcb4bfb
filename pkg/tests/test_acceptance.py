"""Acceptance suite: one test per criterion, each recording a pass/fail line.

The campaign-based criteria (5, 6, 7, 9) share campaigns run once per
session through the command-line interface, so the manifests they leave
behind are the ones criterion 9 replays.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from semadv import tensor as T
from semadv.attack_lm import blend_latents, decrement_delta, mask_size, topk_mask
from semadv.cli import EXIT_OK, run
from semadv.diffusion import build_schedule, ddim_step, diffuse, estimate_x0, sample, step_plan
from semadv.evaluation import (FeatureSet, compute_fid, compute_kid, first_strength_below,
                               load_report_results, robustness_eval, transfer_eval)
from semadv.saliency import grad_cam, top_fraction_iou
from semadv.tensor import Tensor

from conftest import CACHE, to64

N_CAMPAIGN = 50
N_REPLAY_ST = 5


def record(verdicts, tag, ok, detail):
    line = f"criterion {tag}: {'PASS' if ok else 'FAIL'}  {detail}"
    verdicts.append(line)
    print(line)
    assert ok, line


# ------------------------------------------------------------------ campaigns


def _cli(argv):
    rc = run([str(a) for a in argv], log=lambda m: None)
    assert rc == EXIT_OK, f"semadv {' '.join(map(str, argv))} exited with {rc}"


@pytest.fixture(scope="session")
def campaigns(bench, tmp_path_factory):
    """ST white, ST black and LM campaigns over the same 50-image pool, plus
    a short ST campaign used for the replay check."""
    root = tmp_path_factory.mktemp("campaigns")
    timings = {}
    runs = {
        "st_white": ["attack-st", "--box", "white"],
        "st_black": ["attack-st", "--box", "black"],
        "lm": ["attack-lm"],
    }
    for name, argv in runs.items():
        start = time.perf_counter()
        _cli(argv + ["--n-images", N_CAMPAIGN, "--out", root / name, "--cache", CACHE])
        timings[name] = time.perf_counter() - start
    _cli(["attack-st", "--box", "white", "--n-images", N_REPLAY_ST, "--out", root / "st_short",
          "--cache", CACHE])
    return root, timings


def _report(root, name):
    setting = "lm" if name == "lm" else "st"
    path = Path(root) / name / f"report_{setting}.json"
    return json.loads(path.read_text()), load_report_results(path)


# ------------------------------------------------------------------ criterion 1


W12 = Tensor(np.arange(12.0).reshape(3, 4) / 6 - 1)


def _img(x, shape=(1, 1, 3, 4)):
    return T.reshape(x, shape)


# one scalar-valued probe per registered primitive; x is a (3, 4) array
PRIMITIVE_CASES = {
    "add": lambda x: T.sum(T.square(T.add(x, W12))),
    "sub": lambda x: T.sum(T.square(T.sub(x, W12))),
    "mul": lambda x: T.sum(T.mul(x, x) * W12),
    "div": lambda x: T.sum(T.div(x, T.square(x) + 1.0)),
    "scalar_mul": lambda x: T.sum(T.square(T.scalar_mul(x, 2.5))),
    "matmul": lambda x: T.sum(T.matmul(x, T.transpose(x)) * Tensor(np.eye(3) + 0.5)),
    "conv2d": lambda x: T.sum(T.square(T.conv2d(_img(x), Tensor(np.linspace(-1, 1, 18).reshape(2, 1, 3, 3)),
                                                stride=1, pad=1))),
    "relu": lambda x: T.sum(T.relu(x) * W12),
    "silu": lambda x: T.sum(T.silu(x) * W12),
    "avg_pool2d": lambda x: T.sum(T.square(T.avg_pool2d(_img(x, (1, 1, 2, 6)), 2))),
    "upsample_nearest": lambda x: T.sum(T.square(T.upsample_nearest(_img(x), 2)) * 1.5),
    "reshape": lambda x: T.sum(T.square(T.reshape(x, (4, 3))) * Tensor(np.arange(12.0).reshape(4, 3))),
    "transpose": lambda x: T.sum(T.square(T.transpose(x)) * T.transpose(W12)),
    "concat": lambda x: T.sum(T.square(T.concat([x, x * 2.0], axis=1)) * Tensor(np.arange(24.0).reshape(3, 8))),
    "index": lambda x: T.sum(T.square(T.index(x, (slice(None), [0, 2])))),
    "sum": lambda x: T.square(T.sum(x * W12)),
    "mean": lambda x: T.mean(T.square(x) * W12),
    "log": lambda x: T.sum(T.log(T.square(x) + 1.0)),
    "exp": lambda x: T.sum(T.exp(x) * W12),
    "softmax": lambda x: T.sum(T.softmax(x, axis=1) * W12),
    "log_softmax": lambda x: T.sum(T.log_softmax(x, axis=1) * W12),
    "square": lambda x: T.sum(T.square(x) * W12),
    "sqrt": lambda x: T.sum(T.sqrt(T.square(x) + 1.0)),
    "clamp": lambda x: T.sum(T.square(T.clamp(x, -0.5, 0.5))),
}


def test_criterion_1_gradient_oracle(verdicts, bench):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (3, 4))
    x[np.abs(x) < 0.1] += 0.3   # keep away from the relu kink
    x[np.abs(np.abs(x) - 0.5) < 0.05] += 0.1  # and the clip corners
    errors = {}
    assert set(PRIMITIVE_CASES) == set(T._PRIMITIVES)
    with T.precision(np.float64):
        for name, fn in PRIMITIVE_CASES.items():
            errors[name] = T.finite_diff_check(fn, x, h=1e-6)
        den = to64(bench.denoiser)
        z = rng.standard_normal((1, 1, 8, 8))
        plan = step_plan(bench.schedule.T, 3)
        chain = T.finite_diff_check(
            lambda v: T.sum(T.square(sample(den, v, plan, bench.schedule, record_tape=True, clip=False))),
            z, h=1e-6)
    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    ok = errors[worst] <= 1e-4 and chain <= 1e-3 and elapsed < 60
    record(verdicts, "1", ok, f"worst primitive {worst} rel err {errors[worst]:.1e}; "
           f"3-step DDIM chain {chain:.1e}; {elapsed:.1f}s")


# ------------------------------------------------------------------ criterion 2


def test_criterion_2_diffusion_algebra(verdicts):
    start = time.perf_counter()
    s = build_schedule()
    rng = np.random.default_rng(1)
    x0 = rng.uniform(-1, 1, (4, 1, 16, 16))
    eps = rng.standard_normal(x0.shape)
    with T.precision(np.float64):
        worst_rt = max(float(np.abs(estimate_x0(lambda x, t: Tensor(eps), diffuse(x0, t, eps, s), t, s).data
                                    - x0).max()) for t in (1, 10, 100, 500, 999, 1000))
        xt = rng.standard_normal(x0.shape)
        analytic = max(float(np.abs(ddim_step(lambda x, t: x * 0.0, xt, t, tp, None, s).data
                                    - math.sqrt(s.alpha_bar[tp] / s.alpha_bar[t]) * xt).max())
                       for t, tp in ((1000, 975), (500, 250), (25, 0)))
    den = bench_free_denoiser()
    z = rng.standard_normal((2, 1, 16, 16)).astype(np.float32)
    a = sample(den, z, step_plan(1000, 20), s).data
    b = sample(den, z, step_plan(1000, 20), s).data
    deterministic = a.tobytes() == b.tobytes()
    elapsed = time.perf_counter() - start
    ok = worst_rt <= 1e-5 and analytic <= 1e-12 and deterministic and elapsed < 60
    record(verdicts, "2", ok, f"round trip err {worst_rt:.1e}; zero-prediction step err {analytic:.1e}; "
           f"bit-identical re-run {deterministic}; {elapsed:.1f}s")


def bench_free_denoiser():
    from semadv.models import Denoiser

    den = Denoiser(width=8, seed=5)
    rng = np.random.default_rng(2)
    for k, p in den.params.items():
        den.params[k] = Tensor(p.data + rng.normal(0, 0.02, p.shape).astype(np.float32))
    return den


# ------------------------------------------------------------------ criterion 3


def test_criterion_3_lm_oracles(verdicts):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    card_ok = blend_ok = True
    for _ in range(200):
        h, w = rng.integers(2, 17, 2)
        ms, mt = rng.uniform(size=(h, w)), rng.uniform(size=(h, w))
        delta = float(rng.uniform(0, 99))
        strategy = rng.choice(["source", "target", "sum"])
        m = topk_mask(ms, mt, strategy, delta)
        card_ok &= m.count == mask_size(delta, h * w) == int(np.floor(delta / 100 * h * w + 0.5))
        a, b = rng.standard_normal((1, 1, h, w)), rng.standard_normal((1, 1, h, w))
        out = blend_latents(a, b, m).data
        ref = np.where(m.values.astype(bool), b, a)
        blend_ok &= out.tobytes() == ref.astype(out.dtype).tobytes()
    seq_ok = True
    for _ in range(200):
        delta_init = float(rng.uniform(1, 99))
        d, steps, seq = delta_init, 0, [delta_init]
        while d > 0:
            d = decrement_delta(d, rng.normal(0, 3, 4), int(rng.integers(4)), float(rng.uniform(0.1, 20)))
            seq.append(d)
            steps += 1
        seq_ok &= all(b <= a - 1 for a, b in zip(seq, seq[1:])) and steps <= math.ceil(delta_init)
    hand = decrement_delta(50, np.log([0.9, 0.1]), 0, 10)
    hand_ok = abs(hand - (50 - 80 / 9)) < 1e-12
    elapsed = time.perf_counter() - start
    ok = card_ok and blend_ok and seq_ok and hand_ok and elapsed < 10
    record(verdicts, "3", ok, f"TopK cardinality {card_ok}; blend bitwise {blend_ok}; "
           f"delta sequences {seq_ok}; hand value {hand:.6f}; {elapsed:.1f}s")


# ------------------------------------------------------------------ criterion 4


def test_criterion_4_metric_oracles(verdicts):
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    a = rng.standard_normal((5000, 8))
    self_fid = compute_fid(a, a)
    mu = np.full(8, 0.75)
    b = rng.standard_normal((5000, 8)) + mu
    fid = compute_fid(a, b)
    target = float(mu @ mu)
    c = rng.standard_normal((400, 8))
    d = rng.standard_normal((400, 8))
    kid, kid_std = compute_kid(c, d, subset_size=100, subsets=100, seed=0, return_std=True)
    elapsed = time.perf_counter() - start
    ok = abs(self_fid) <= 1e-6 and abs(fid - target) <= 0.05 * target and abs(kid) <= kid_std \
        and elapsed < 120
    record(verdicts, "4", ok, f"FID(a,a)={self_fid:.1e}; FID={fid:.3f} vs |mu|^2={target:.3f}; "
           f"same-distribution KID {kid:.2e} (subset spread {kid_std:.2e}); {elapsed:.1f}s")


# ------------------------------------------------------------------ criterion 5


def test_criterion_5_scaled_asr(verdicts, bench, campaigns):
    root, timings = campaigns
    accs = {r: bench.classifier(r).metadata["test_accuracy"] for r in ("target", "surrogate", "victim")}
    st_doc, st = _report(root, "st_white")
    lm_doc, lm = _report(root, "lm")
    st_asr, lm_asr = st_doc["aggregates"]["asr"], lm_doc["aggregates"]["asr"]
    minutes = (timings["st_white"] + timings["lm"]) / 60
    ok = (len(st) == len(lm) == N_CAMPAIGN and st_asr >= 90 and lm_asr >= 90
          and min(accs.values()) >= 0.95 and minutes <= 30)
    record(verdicts, "5", ok, f"ST white-box both ASR {st_asr:.0f}%, LM gradcam sum ASR {lm_asr:.0f}% "
           f"over {N_CAMPAIGN}; classifier accuracy >= {min(accs.values()):.3f}; {minutes:.1f} min")


# ------------------------------------------------------------------ criterion 6


def _ordering(lower, higher, se):
    """lower <= higher, or the violation is within one standard error."""
    return lower <= higher or lower - higher <= se


def _bootstrap_fid_se(bench, adv, clean, reps=100):
    rng = np.random.default_rng(6)
    fa = FeatureSet.from_images(bench.extractor, adv).features
    fc = FeatureSet.from_images(bench.extractor, clean).features
    vals = []
    for _ in range(reps):
        i = rng.integers(0, len(fa), len(fa))
        vals.append(compute_fid(fa[i], fc[i]))
    return float(np.std(vals, ddof=1))


def test_criterion_6a_iterations(verdicts, campaigns):
    root, _ = campaigns
    w, _ = _report(root, "st_white")
    b, _ = _report(root, "st_black")
    wa, ba = w["aggregates"], b["aggregates"]
    se = math.hypot(wa["se_iterations"], ba["se_iterations"])
    ok = _ordering(wa["avg_iterations"], ba["avg_iterations"], se)
    record(verdicts, "6a", ok, f"mean iterations white {wa['avg_iterations']:.2f} vs black "
           f"{ba['avg_iterations']:.2f} (SE of difference {se:.2f})")


def test_criterion_6b_fid(verdicts, bench, campaigns):
    root, _ = campaigns
    w, wres = _report(root, "st_white")
    b, bres = _report(root, "st_black")
    assert [r.image_id for r in wres] == [r.image_id for r in bres]
    clean = bench.test.images[[int(r.image_id[4:]) for r in wres]]
    fw, fb = w["aggregates"]["fid_local"], b["aggregates"]["fid_local"]
    se = math.hypot(_bootstrap_fid_se(bench, np.stack([r.image for r in wres]), clean),
                    _bootstrap_fid_se(bench, np.stack([r.image for r in bres]), clean))
    ok = _ordering(fw, fb, se)
    record(verdicts, "6b", ok, f"FID-local white {fw:.3f} vs black {fb:.3f} (bootstrap SE {se:.3f}); "
           f"clean floor {w['aggregates']['fid_local_clean_floor']:.3f}")


def test_criterion_6c_transfer(verdicts, bench, campaigns):
    root, _ = campaigns
    rates = {}
    for name in ("st_white", "st_black"):
        _, res = _report(root, name)
        imgs = np.stack([r.image for r in res])
        labels = np.array([r.original_label for r in res])
        rates[name] = transfer_eval(imgs, labels, {"victim": bench.victim})["victim"]
    n = N_CAMPAIGN
    pw, pb = rates["st_white"] / 100, rates["st_black"] / 100
    se = 100 * math.sqrt(pw * (1 - pw) / n + pb * (1 - pb) / n)
    ok = _ordering(rates["st_white"], rates["st_black"], se)
    record(verdicts, "6c", ok, f"victim transfer ASR black {rates['st_black']:.0f}% vs white "
           f"{rates['st_white']:.0f}% (SE {se:.1f} points)")


# ------------------------------------------------------------------ criterion 7


def test_criterion_7_robustness(verdicts, bench, campaigns):
    start = time.perf_counter()
    root, _ = campaigns
    _, res = _report(root, "st_white")
    adv = np.stack([r.image for r in res if r.success])
    labels = np.array([r.original_label for r in res if r.success])
    strengths = np.round(np.arange(0.25, 5.01, 0.25), 2)
    rows = robustness_eval(bench.target, bench.test.images, bench.test.labels, adv, labels,
                           "gaussian_blur", strengths)
    row = first_strength_below(rows, 60.0)
    elapsed = time.perf_counter() - start
    if row is None:
        record(verdicts, "7", False, "no blur strength up to 5 drops clean accuracy below 60%")
    clean_err = 100 - row["clean_accuracy"]
    ok = row["adv_misclassified"] >= 2 * clean_err and elapsed < 300
    record(verdicts, "7", ok, f"blur sigma {row['strength']}: clean accuracy {row['clean_accuracy']:.1f}%, "
           f"adversarial misclassified {row['adv_misclassified']:.1f}% vs 2x clean error "
           f"{2 * clean_err:.1f}%; {elapsed:.1f}s")


# ------------------------------------------------------------------ criterion 8


def test_criterion_8_gradcam_iou(verdicts, bench):
    test = bench.test
    ious = [top_fraction_iou(grad_cam(bench.target, test.images[i], int(test.labels[i])).values,
                             test.regions[i], 0.1) for i in range(100)]
    mean = float(np.mean(ious))
    record(verdicts, "8", mean > 0.3, f"mean Grad-CAM top-10% IoU {mean:.3f} over 100 images")


# ------------------------------------------------------------------ criterion 9


def _strip_timing(doc):
    doc = json.loads(json.dumps(doc))
    doc.pop("hardware", None)
    doc["aggregates"].pop("avg_time", None)
    for r in doc["records"]:
        r.pop("wall_time", None)
    return doc


def _same_run(a: Path, b: Path, setting: str):
    ra = json.loads((a / f"report_{setting}.json").read_text())
    rb = json.loads((b / f"report_{setting}.json").read_text())
    files = sorted(p.name for p in (a / "images").iterdir())
    images_equal = files == sorted(p.name for p in (b / "images").iterdir()) and all(
        (a / "images" / f).read_bytes() == (b / "images" / f).read_bytes() for f in files)
    return images_equal and _strip_timing(ra) == _strip_timing(rb), len(files)


def test_criterion_9_replay(verdicts, campaigns, tmp_path):
    root, _ = campaigns
    details, ok = [], True
    for name, setting in (("st_short", "st"), ("lm", "lm")):
        again = tmp_path / name
        _cli(["replay", root / name / "manifest.json", "--out", again, "--cache", CACHE])
        same, n = _same_run(root / name, again, setting)
        ok &= same
        details.append(f"{name} ({n} images) identical={same}")
    record(verdicts, "9", ok, "; ".join(details))
