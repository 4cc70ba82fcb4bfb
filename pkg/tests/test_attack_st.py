import dataclasses

import numpy as np
import pytest

from semadv import tensor as T
from semadv.attack_st import select_judge, st_attack, st_loss
from semadv.config import STConfig
from semadv.diffusion import build_schedule, sample
from semadv.models import Classifier, Denoiser
from semadv.tensor import Tensor

FAST = STConfig(s_df=10, s_ft=3, s_sp=10, max_rounds=3, extension_blocks=1)


def test_loss_is_zero_at_identity():
    ext, judge = Classifier(width=4, seed=1), Classifier(width=4, seed=2)
    x = np.random.default_rng(0).uniform(-1, 1, (1, 1, 16, 16)).astype(np.float32)
    assert float(st_loss(ext, judge, x, x, lam=1.0).data) == 0.0


def test_loss_grows_with_lambda():
    ext, judge = Classifier(width=4, seed=1), Classifier(width=4, seed=2)
    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, (1, 1, 16, 16)).astype(np.float32)
    y = np.clip(x + 0.3 * rng.standard_normal(x.shape), -1, 1).astype(np.float32)
    a = float(st_loss(ext, judge, x, y, lam=1.0).data)
    b = float(st_loss(ext, judge, x, y, lam=2.0).data)
    assert b > a


def test_judge_selection():
    t, s = Classifier(width=4), Classifier(width=4, seed=9)
    assert select_judge("white", t, s) is t
    assert select_judge("black", t, s) is s
    with pytest.raises(ValueError):
        select_judge("grey", t, s)


def test_gradient_through_three_step_chain(f64):
    sched = build_schedule()
    den = Denoiser(width=4, seed=3)
    rng = np.random.default_rng(4)
    for k, p in den.params.items():
        den.params[k] = Tensor(p.data + rng.normal(0, 0.05, p.shape), dtype=np.float64)
    x = rng.standard_normal((1, 1, 8, 8)) * 0.5

    def fn(z):
        return T.sum(T.square(sample(den, z, [250, 500, 1000], sched, record_tape=True, clip=False)))

    assert T.finite_diff_check(fn, x, h=1e-6) < 1e-4


def test_attack_leaves_denoiser_untouched(bench):
    before = bench.denoiser.clone()
    x = bench.test.images[0]
    st_attack(x, bench.target, bench.surrogate, bench.extractor, bench.denoiser, bench.schedule,
              FAST, label=int(bench.test.labels[0]))
    assert bench.denoiser.state_equal(before)


def test_black_box_query_accounting(bench):
    x, y = bench.test.images[1], int(bench.test.labels[1])
    cfg = dataclasses.replace(FAST, box="black")
    res = st_attack(x, bench.target, bench.surrogate, bench.extractor, bench.denoiser,
                    bench.schedule, cfg, label=y)
    rounds = len(res.loss_trace)
    assert res.judge_queries == 1 + rounds
    # only confirmation samples reach the target in the black-box setting
    assert 1 <= res.queries <= rounds + 1
    assert res.setting == "st-both-black"


def test_white_box_query_accounting(bench):
    x, y = bench.test.images[1], int(bench.test.labels[1])
    res = st_attack(x, bench.target, bench.surrogate, bench.extractor, bench.denoiser,
                    bench.schedule, FAST, label=y)
    rounds = len(res.loss_trace)
    assert res.judge_queries == 1 + rounds
    assert res.queries >= res.judge_queries + 1


def test_unknown_label_costs_one_query(bench):
    x, y = bench.test.images[2], int(bench.test.labels[2])
    cfg = dataclasses.replace(FAST, box="black")
    a = st_attack(x, bench.target, bench.surrogate, bench.extractor, bench.denoiser, bench.schedule, cfg, y)
    b = st_attack(x, bench.target, bench.surrogate, bench.extractor, bench.denoiser, bench.schedule, cfg)
    assert b.queries == a.queries + 1


def test_attack_is_deterministic(bench):
    x, y = bench.test.images[3], int(bench.test.labels[3])
    cfg = dataclasses.replace(FAST, mode="latent")
    a = st_attack(x, bench.target, bench.surrogate, bench.extractor, bench.denoiser, bench.schedule, cfg, y)
    b = st_attack(x, bench.target, bench.surrogate, bench.extractor, bench.denoiser, bench.schedule, cfg, y)
    assert np.array_equal(a.image, b.image) and a.loss_trace == b.loss_trace
    assert a.image.shape == x.shape and a.image.min() >= -1 and a.image.max() <= 1
