import numpy as np
import pytest
import torch
from hypothesis import assume, given
from hypothesis import strategies as st

import oracles
from ecgcine.checkpoint import load_checkpoint, save_checkpoint
from ecgcine.downstream import (ALLOWED_RATIOS, DownstreamConfig, VideoMae, build_mixture, classification_task,
                                finetune_and_eval, pretrain_video_mae, regression_task, synthetic_sources)
from ecgcine.errors import DataError, ParameterError
from ecgcine.metrics import (UndefinedMetricError, fmt_pm, mean_std, metric_acc, metric_auc, metric_mae,
                             metric_r2, pearson_r)
from ecgcine.phantom import PhantomParams, generate_cine

SMALL = dict(patch=(10, 16, 16), width=16, depth=1, heads=2, dec_width=16, dec_depth=1, batch_size=4)

# scores on a 1/8 grid so monotone maps stay strictly monotone in floating point
scores_labels = st.integers(4, 40).flatmap(lambda n: st.tuples(
    st.lists(st.integers(-40, 40).map(lambda k: k / 8), min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n)))


# --- metrics ----------------------------------------------------------------------

def test_metric_examples():
    y = np.array([0, 1, 1, 0, 1])
    assert metric_auc(y, y) == 1.0
    assert metric_acc(y, y) == 1.0
    t = np.array([1.0, 2.0, 4.0, 8.0])
    assert metric_r2(t, t) == 1.0
    assert metric_mae(t, t) == 0.0
    assert metric_r2(np.full(4, t.mean()), t) == pytest.approx(0.0, abs=1e-12)


def test_metric_undefined():
    with pytest.raises(UndefinedMetricError):
        metric_auc([0.1, 0.2], [1, 1])
    with pytest.raises(UndefinedMetricError):
        metric_r2([1.0, 2.0], [3.0, 3.0])
    with pytest.raises(DataError):
        metric_mae([], [])


@given(scores_labels)
def test_auc_matches_pair_count(data):
    s, y = data
    assume(0 < sum(y) < len(y))
    assert abs(metric_auc(s, y) - oracles.auc_pairs(s, y)) <= 1e-9


@given(scores_labels, st.sampled_from(["exp", "cube", "affine"]))
def test_auc_monotone_invariance(data, kind):
    s, y = data
    assume(0 < sum(y) < len(y))
    s = np.array(s)
    f = {"exp": np.exp, "cube": lambda v: v ** 3 + v, "affine": lambda v: 3.0 * v - 2.0}[kind]
    assert metric_auc(f(s), y) == pytest.approx(metric_auc(s, y), abs=1e-12)


@given(st.integers(3, 40).flatmap(lambda n: st.tuples(st.lists(st.floats(-50, 50), min_size=n, max_size=n),
                                                       st.lists(st.floats(-50, 50), min_size=n, max_size=n))))
def test_r2_bound_and_oracle(data):
    p, y = data
    assume(np.var(y) > 1e-6)
    r2 = metric_r2(p, y)
    assert r2 <= 1.0
    assert r2 == pytest.approx(oracles.r2(p, y), rel=1e-9, abs=1e-9)


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=30))
def test_acc_range(pairs):
    p, y = zip(*pairs)
    acc = metric_acc(p, y)
    assert 0.0 <= acc <= 1.0
    assert acc == pytest.approx(sum(a == b for a, b in pairs) / len(pairs))


def test_summaries():
    assert mean_std([1.0, 3.0]) == {"mean": 2.0, "std": 1.0}
    assert fmt_pm([0.7, 0.732]) == "0.716±0.016"
    assert pearson_r([1, 2, 3], [2, 4, 6.5]) > 0.99
    assert pearson_r([1, 1, 1], [1, 2, 3]) == 0.0


# --- mixtures -------------------------------------------------------------------------

def test_mixture_counts():
    real = np.zeros((100, 1))
    pool = np.ones((300, 1))
    mix = build_mixture(real, pool, 2.0)
    assert len(mix.synthetic) == 200 and len(mix) == 300
    assert mix.cines().shape == (300, 1)
    base = build_mixture(real, pool, 0.0)
    assert len(base.synthetic) == 0 and base.cines() is real
    assert ALLOWED_RATIOS == (0.0, 1.0, 2.0, 3.0)


def test_mixture_errors():
    with pytest.raises(ParameterError):
        build_mixture(np.zeros((10, 1)), np.zeros((30, 1)), 1.5)
    with pytest.raises(ParameterError):
        build_mixture(np.zeros((10, 1)), np.zeros((15, 1)), 2.0)


def test_mixtures_are_nested():
    real = np.zeros((5, 1))
    pool = np.arange(15).reshape(15, 1)
    m1, m3 = build_mixture(real, pool, 1.0), build_mixture(real, pool, 3.0)
    assert np.array_equal(m3.synthetic[:5], m1.synthetic)


def test_synthetic_sources_training_only(small_dataset):
    train = small_dataset.ids("train")
    src = synthetic_sources(train, 40, seed=1)
    assert len(src) == 40 and set(src) <= set(train)
    held_out = set(small_dataset.ids("val")) | set(small_dataset.ids("test"))
    assert not set(src) & held_out
    assert src == synthetic_sources(train, 40, seed=1)
    with pytest.raises(DataError):
        synthetic_sources([], 3)


# --- video MAE ------------------------------------------------------------------------

def phantom_cines(n, seed=0, amplitude=None):
    rng = np.random.default_rng(seed)
    out, params = [], []
    for _ in range(n):
        p = PhantomParams(heart_rate_bpm=float(rng.uniform(45, 110)),
                          contraction_amplitude=float(rng.uniform(0.1, 0.5)) if amplitude is None else amplitude,
                          base_inner_radius=float(rng.uniform(0.15, 0.3)))
        out.append(generate_cine(p))
        params.append(p)
    return np.stack(out), params


def test_pretrain_empty():
    with pytest.raises(DataError):
        pretrain_video_mae(np.zeros((0, 1, 50, 96, 96), np.float32), DownstreamConfig(**SMALL))


def test_pretrain_loss_and_checkpoint(tmp_path):
    cines, _ = phantom_cines(8)
    cfg = DownstreamConfig(**SMALL, pretrain_epochs=3)
    model, hist = pretrain_video_mae(cines, cfg, seed=0)
    assert len(hist["loss"]) == 3 and hist["loss"][-1] < hist["loss"][0]
    save_checkpoint(tmp_path / "e", model, "video_mae", {})
    state, _, _ = load_checkpoint(tmp_path / "e", "video_mae")
    fresh = VideoMae(cfg)
    fresh.load_state_dict(state)
    assert all(torch.equal(v, fresh.state_dict()[k]) for k, v in model.state_dict().items())


def test_ratio_zero_is_real_only_pretraining():
    cines, _ = phantom_cines(6)
    cfg = DownstreamConfig(**SMALL, pretrain_epochs=1)
    mix = build_mixture(cines, np.ones((18, 1, 50, 96, 96), np.float32), 0.0)
    a, _ = pretrain_video_mae(mix.cines(), cfg, seed=2)
    b, _ = pretrain_video_mae(cines, cfg, seed=2)
    assert all(torch.equal(v, b.state_dict()[k]) for k, v in a.state_dict().items())


def test_finetune_too_few_samples():
    cines, params = phantom_cines(4)
    with pytest.raises(DataError):
        finetune_and_eval(None, DownstreamConfig(**SMALL), cines, params, classification_task())


def test_task_labels():
    p = PhantomParams(contraction_amplitude=0.2, heart_rate_bpm=70.0, base_inner_radius=0.2)
    assert classification_task(0.3).label_fn(p) == 1.0
    assert classification_task(0.1).label_fn(p) == 0.0
    np.testing.assert_array_equal(regression_task().label_fn(p), [70.0, 0.2, 0.2])


def test_separable_labels_score_perfectly():
    # class decided by amplitude extremes: strongly contracting vs nearly still hearts
    strong, p_strong = phantom_cines(10, seed=1, amplitude=0.5)
    weak, p_weak = phantom_cines(10, seed=2, amplitude=0.1)
    cines = np.concatenate([strong, weak])
    params = p_strong + p_weak
    cfg = DownstreamConfig(**SMALL, finetune_epochs=80, folds=5)
    res = finetune_and_eval(None, cfg, cines, params, classification_task(0.3), seed=0)
    assert len(res["folds"]) == 5
    assert res["summary"]["acc"]["mean"] == 1.0
    assert res["summary"]["auc"]["mean"] == 1.0


def test_shuffled_labels_control():
    cines, params = phantom_cines(100, seed=3)
    cfg = DownstreamConfig(**SMALL, finetune_epochs=3, folds=5)
    res = finetune_and_eval(None, cfg, cines, params, classification_task(0.3), seed=0, shuffle_labels=True)
    assert 0.4 <= res["summary"]["auc"]["mean"] <= 0.6


def test_regression_report_format():
    cines, params = phantom_cines(10, seed=4)
    cfg = DownstreamConfig(**SMALL, finetune_epochs=1, folds=5)
    res = finetune_and_eval(None, cfg, cines, params, regression_task(), seed=0)
    keys = set(res["summary"])
    assert {"heart_rate_bpm/mae", "heart_rate_bpm/r2", "contraction_amplitude/r2", "overall/r2"} <= keys
    for fold in res["folds"]:
        assert np.isfinite(list(fold.values())).all()
    again = finetune_and_eval(None, cfg, cines, params, regression_task(), seed=0)
    assert again["summary"] == res["summary"]


def test_pretrain_step_budget(monkeypatch):
    cines, _ = phantom_cines(10, seed=5)
    calls = []
    original = VideoMae.mae_loss
    monkeypatch.setattr(VideoMae, "mae_loss", lambda self, x, g: calls.append(len(x)) or original(self, x, g))
    cfg = DownstreamConfig(**SMALL, pretrain_steps=7)  # batch 4: passes of 3 steps
    _, hist = pretrain_video_mae(cines, cfg, seed=0)
    assert len(calls) == 7 and len(hist["loss"]) == 3
    calls.clear()
    _, hist = pretrain_video_mae(cines, DownstreamConfig(**SMALL, pretrain_epochs=2), seed=0)
    assert calls == [4, 4, 2, 4, 4, 2] and len(hist["loss"]) == 2


def test_encoder_lr_scale_zero_freezes_encoder(monkeypatch):
    import ecgcine.downstream as dsm
    strong, p_strong = phantom_cines(5, seed=6, amplitude=0.5)
    weak, p_weak = phantom_cines(5, seed=7, amplitude=0.1)
    cines, params = np.concatenate([strong, weak]), p_strong + p_weak
    cfg = DownstreamConfig(**SMALL, finetune_epochs=1, encoder_lr_scale=0.0)
    init = VideoMae(cfg).state_dict()
    seen = {}

    class Spy(dsm.Finetuner):
        def forward(self, video):
            seen["enc"] = {k: v.clone() for k, v in self.encoder.state_dict().items()}
            return super().forward(video)

    monkeypatch.setattr(dsm, "Finetuner", Spy)
    finetune_and_eval(init, cfg, cines, params, classification_task(0.3), seed=0)
    assert all(torch.equal(v, init[k]) for k, v in seen["enc"].items())
