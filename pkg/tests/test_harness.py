import math

import numpy as np
import pytest

from tokshift import harness
from tokshift.harness import (
    LABELS,
    SamplingSpec,
    SyntheticTask,
    TrainSchedule,
    augment,
    make_batch,
    make_clip,
    multi_view_predict,
    sample_clip,
    topk_hits,
    view_starts,
)
from tokshift.model import ModelConfig, init_params, model_forward
from tokshift.shift import ShiftSpec

TASK = SyntheticTask(seed=3, frames=4, height=16, width=16, square=4, speed=2)
CFG = ModelConfig(frames=4, height=16, width=16, patch=8, dim=8, depth=1, heads=2, classes=4)


def quick(**kw):
    base = dict(epochs=1, milestones=(), batch_size=8)
    return TrainSchedule(**{**base, **kw})


# ---------------------------------------------------------------- task


def test_task_rejects_escaping_trajectory():
    with pytest.raises(ValueError, match="leaves"):
        SyntheticTask(frames=8, height=16, width=16, square=6, speed=2)


def test_clip_is_deterministic_and_bounded():
    a, la = make_clip(TASK, 11, 2)
    b, lb = make_clip(TASK, 11, 2)
    np.testing.assert_array_equal(a, b)
    assert la == lb == 2
    assert a.shape == (4, 16, 16, 3)
    assert a.min() >= 0.0 and a.max() <= 1.0


@pytest.mark.parametrize("label", range(4))
def test_square_moves_in_labeled_direction(label):
    task = SyntheticTask(frames=4, height=16, width=16, square=4, speed=2, noise=0.0)
    clip, _ = make_clip(task, 5, label)
    centers = []
    for frame in clip:
        ys, xs = np.nonzero(frame[..., 0])
        centers.append((ys.mean(), xs.mean()))
    dy, dx = np.diff(np.array(centers), axis=0).mean(axis=0)
    expected = {"left": (0, -2), "right": (0, 2), "up": (-2, 0), "down": (2, 0)}[LABELS[label]]
    assert (dy, dx) == expected


def test_zero_speed_left_equals_right():
    task = SyntheticTask(frames=4, height=16, width=16, square=4, speed=0)
    left, _ = make_clip(task, 9, 0)
    right, _ = make_clip(task, 9, 1)
    np.testing.assert_array_equal(left, right)


@pytest.mark.parametrize("forward, backward", [(0, 1), (2, 3)])
def test_reversed_clip_is_opposite_direction(forward, backward):
    task = SyntheticTask(frames=4, height=16, width=16, square=4, speed=2, noise=0.0)
    clip, _ = make_clip(task, 21, forward, start=(6, 7) if forward == 0 else (7, 6))
    end = (6, 7 - 6) if forward == 0 else (7 - 6, 6)
    mirrored, _ = make_clip(task, 21, backward, start=end)
    np.testing.assert_array_equal(clip[::-1], mirrored)


def test_batch_labels_balanced():
    clips, labels = make_batch(TASK, "train", range(8))
    assert clips.shape == (8, 4, 16, 16, 3)
    assert labels.tolist() == [0, 1, 2, 3, 0, 1, 2, 3]
    val, _ = make_batch(TASK, "val", range(2))
    assert not np.array_equal(val[0], clips[0])


def test_augment_flip_remaps_labels():
    clips, labels = make_batch(TASK, "train", range(16))
    out, new = augment(clips, labels, np.random.default_rng(0))
    assert out.shape == clips.shape
    swapped = new != labels
    assert swapped.any()
    assert set(zip(labels[swapped], new[swapped])) <= {(0, 1), (1, 0)}
    again, _ = augment(clips, labels, np.random.default_rng(0))
    np.testing.assert_array_equal(out, again)


# ---------------------------------------------------------------- sampling


def test_sample_clip_first_frames():
    source = np.arange(20)
    np.testing.assert_array_equal(sample_clip(source, SamplingSpec(frames=8)), np.arange(8))


def test_sample_clip_step_32():
    source = np.arange(300)
    np.testing.assert_array_equal(sample_clip(source, SamplingSpec(frames=8, step=32)), np.arange(0, 225, 32))


def test_sample_clip_insufficient_frames():
    with pytest.raises(ValueError, match="sampling frames"):
        sample_clip(np.arange(100), SamplingSpec(frames=8, step=32))


def test_ten_views_evenly_spaced():
    starts = view_starts(300, SamplingSpec(frames=8, views=10))
    assert len(set(starts)) == 10
    assert len(set(np.diff(starts))) == 1
    assert starts[0] == 0 and starts[-1] + 8 <= 300


def test_single_view_is_centered():
    assert view_starts(20, SamplingSpec(frames=8)) == [6]


def test_multi_view_single_equals_forward():
    params = init_params(CFG, 0)
    clip, _ = make_clip(TASK, 1, 0)
    logits, _ = model_forward(clip, params, CFG)
    out = multi_view_predict(params, CFG, clip, SamplingSpec(frames=4))
    np.testing.assert_allclose(out, logits.data, rtol=1e-13, atol=1e-14)


def test_multi_view_identical_subclips():
    params = init_params(CFG, 0)
    clip, _ = make_clip(TASK, 1, 0)
    source = np.concatenate([clip, clip, clip])  # every view start sees the same frames when starts step by 4
    spec = SamplingSpec(frames=4, views=3)
    assert view_starts(len(source), spec) == [0, 4, 8]
    np.testing.assert_allclose(multi_view_predict(params, CFG, source, spec), model_forward(clip, params, CFG)[0].data,
                               rtol=1e-12, atol=1e-14)


def test_multi_view_crops_average():
    params = init_params(CFG, 0)
    source = np.random.default_rng(0).uniform(0, 1, (4, 16, 24, 3))
    out = multi_view_predict(params, CFG, source, SamplingSpec(frames=4, crops=3))
    parts = [model_forward(source[:, :, x:x + 16], params, CFG)[0].data for x in (0, 4, 8)]
    np.testing.assert_allclose(out, np.mean(parts, axis=0), rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(out, np.mean(parts[::-1], axis=0), rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------- evaluation


def test_topk_ties_prefer_lower_index():
    logits = np.zeros((1, 4))
    assert topk_hits(logits, [0], 1).tolist() == [True]
    assert topk_hits(logits, [1], 1).tolist() == [False]
    assert topk_hits(logits, [1], 2).tolist() == [True]


def test_topk_all_classes_and_perfect():
    labels = np.arange(40) % 4
    logits = np.random.default_rng(0).normal(size=(40, 4))
    assert topk_hits(logits, labels, 4).all()
    assert topk_hits(np.eye(4)[labels], labels, 1).all()


def test_random_predictor_near_chance():
    n = 4000
    logits = np.random.default_rng(1).normal(size=(n, 4))
    labels = np.arange(n) % 4
    acc = topk_hits(logits, labels, 1).mean()
    sigma = math.sqrt(0.25 * 0.75 / n)
    assert abs(acc - 0.25) < 3 * sigma


def test_evaluate_validates():
    params = init_params(CFG, 0)
    clips, labels = make_batch(TASK, "val", range(4))
    assert harness.evaluate(params, CFG, clips, labels, k=4) == 1.0
    with pytest.raises(ValueError, match="empty"):
        harness.evaluate(params, CFG, clips[:0], [], k=1)
    with pytest.raises(ValueError, match="outside"):
        harness.evaluate(params, CFG, clips, labels, k=5)


def test_no_shift_model_blind_to_direction():
    cfg = CFG.with_shift(variant="none")
    params = init_params(cfg, 2)
    clip, _ = make_clip(TASK, 4, 0)
    a, _ = model_forward(clip, params, cfg)
    b, _ = model_forward(clip[::-1], params, cfg)
    assert np.abs(a.data - b.data).max() <= 1e-10


# ---------------------------------------------------------------- training


def test_lr_schedule_milestones():
    s = TrainSchedule(epochs=20, base_lr=0.1, milestones=(10, 15))
    lrs = [s.lr_at(e) for e in range(20)]
    assert lrs[:10] == [0.1] * 10
    assert lrs[10:15] == pytest.approx([0.01] * 5)
    assert lrs[15:] == pytest.approx([0.001] * 5)


@pytest.mark.parametrize(
    "kwargs, match",
    [
        (dict(epochs=0), "epochs"),
        (dict(milestones=(5, 3)), "increasing"),
        (dict(epochs=10, milestones=(10,)), "before the last epoch"),
        (dict(base_lr=-1.0), "base_lr"),
        (dict(clip_norm=0.0), "clip_norm"),
    ],
)
def test_schedule_validation(kwargs, match):
    with pytest.raises(ValueError, match=match):
        TrainSchedule(**{"milestones": (), **kwargs})


def test_zero_lr_leaves_params():
    start = init_params(CFG, 0)
    before = {k: v.data.copy() for k, v in start.items()}
    result = harness.train(CFG, TASK, quick(epochs=2, base_lr=0.0), n_train=16, n_val=8)
    for k, v in result.params.items():
        np.testing.assert_array_equal(v.data, before[k])


def test_one_step_descends():
    clips, labels = make_batch(TASK, "train", [0])
    params = init_params(CFG, 0)
    from tokshift import tensor as tn

    def loss():
        return tn.cross_entropy(tn.Tensor(harness.predict(params, CFG, clips)), labels).data[0]

    before = loss()
    harness.train(CFG, TASK, quick(base_lr=1e-3, batch_size=1, clip_norm=None, momentum=0.0),
                  n_train=1, n_val=1, augment_data=False, params=params)
    assert loss() < before


def test_training_is_deterministic():
    lines = []
    for _ in range(2):
        result = harness.train(CFG, TASK, quick(epochs=2), seed=5, n_train=32, n_val=16)
        lines.append([m.line() for m in result.metrics])
    assert lines[0] == lines[1]
    assert len(lines[0]) == 4
    epoch, split, loss, top1 = lines[0][1].split("\t")
    assert (epoch, split) == ("0", "val") and float(loss) > 0 and 0 <= float(top1) <= 1


def test_on_epoch_streams_metrics():
    seen = []
    harness.train(CFG, TASK, quick(), n_train=16, n_val=8, on_epoch=seen.append)
    assert [m.split for m in seen] == ["train", "val"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reported():
    params = init_params(CFG, 0)
    params["head.b"].data[1] = np.inf
    with pytest.raises(harness.TrainingDiverged, match="epoch 0, step 0"):
        harness.train(CFG, TASK, quick(), n_train=16, n_val=8, params=params)


def test_train_rejects_mismatched_task():
    with pytest.raises(ValueError, match="disagree"):
        harness.train(CFG, SyntheticTask(), quick())


def test_toy_config():
    cfg = harness.toy_config()
    assert (cfg.frames, cfg.height, cfg.patch, cfg.dim, cfg.depth, cfg.heads, cfg.classes) == (8, 32, 8, 64, 4, 4, 4)
    assert cfg.shift == ShiftSpec("token")
    assert cfg.num_patches == 16
