import csv
from dataclasses import replace

import numpy as np
import pytest

from muscleseg.phantom import CohortSpec, sample_cohort, synthesize_cohort_member
from muscleseg.phantom.geometry import sample_geometry, synthesize_subject
from muscleseg.prep import CropSpec, SubjectImages, TrainingSample, build_training_set
from muscleseg.trainer import (NonFiniteLossError, TrainConfig, TrainHistory, epoch_order, evaluate_dsc,
                               segment_subject, subject_dsc, train, write_history_csv)
from muscleseg.vnet import ArchitectureSpec, build_model
from muscleseg.voxgrid import LEFT, RIGHT, LandmarkPair, Mask3D, Volume3D, flip_x

DESK = (32, 32, 64)
TINY = (16, 16, 16)


def _tiny_samples(n, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        mask = np.zeros(TINY, np.uint8)
        lo = rng.integers(2, 6, size=3)
        mask[lo[0]:lo[0] + 7, lo[1]:lo[1] + 6, lo[2]:lo[2] + 8] = 1
        img = (mask + 0.2 * rng.standard_normal(TINY)).astype(np.float32)
        img = (img - img.mean()) / img.std()
        out.append(TrainingSample(img, mask, f"T{i}", "right", False, 0))
    return out


def _tiny_config(**kw):
    base = dict(epochs=2, batch_size=2, lr=1e-3, width=0.25, crop_dims=TINY, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def _phantom(index, seed=0, symmetric=False):
    rec = sample_cohort(CohortSpec(index + 1, seed=seed))[index]
    if symmetric:
        rec = replace(rec, true_left_ml=rec.true_right_ml)
        geo = sample_geometry(np.random.default_rng(index), DESK, symmetric=True, noise_sd=0.0)
        vol, mask, lm = synthesize_subject(rec, geo, index)
    else:
        vol, mask, lm = synthesize_cohort_member(rec, index, seed)
    return SubjectImages(rec.id, vol, mask, lm)


@pytest.fixture(scope="module")
def overfit():
    """Desk-scale model fitted to the two canonical crops of one phantom."""
    subj = _phantom(0)
    samples = [s for s in build_training_set([subj], CropSpec(DESK), 0) if not s.mirrored]
    assert len(samples) == 2
    cfg = TrainConfig(epochs=40, batch_size=2, lr=1e-3, width=0.25, crop_dims=DESK, seed=0)
    model, history = train(cfg, samples)
    return model, history, subj


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(train_ids=("a", "b"), val_ids=("b",))


def test_epoch_order_is_seeded_permutation():
    a = epoch_order(5, 1, 20)
    assert sorted(a) == list(range(20))
    np.testing.assert_array_equal(a, epoch_order(5, 1, 20))
    assert not np.array_equal(a, epoch_order(5, 2, 20))
    assert not np.array_equal(a, epoch_order(6, 1, 20))


def test_train_rejects_bad_input():
    with pytest.raises(ValueError):
        train(_tiny_config(), [])
    bad = _tiny_samples(1)[0]
    bad = replace(bad, image=np.zeros((16, 16, 32), np.float32), mask=np.zeros((16, 16, 32), np.uint8))
    with pytest.raises(ValueError):
        train(_tiny_config(), [bad])
    with pytest.raises(ValueError):
        train(_tiny_config(), _tiny_samples(2), model=build_model(ArchitectureSpec(TINY, width=0.5)))


def test_history_length_and_determinism():
    samples = _tiny_samples(5)
    m1, h1 = train(_tiny_config(epochs=3), samples)
    m2, h2 = train(_tiny_config(epochs=3), samples)
    assert h1.epochs == 3 and len(h1.loss) == 3 and h1.val_dsc == []
    assert h1.loss == h2.loss
    for name in m1.params:
        np.testing.assert_array_equal(m1.params[name].data, m2.params[name].data)
    m3, _ = train(_tiny_config(epochs=3, seed=4), samples)
    assert any(not np.array_equal(m1.params[k].data, m3.params[k].data) for k in m1.params)


def test_non_finite_loss_names_epoch_and_step():
    samples = _tiny_samples(4)
    samples[3] = replace(samples[3], image=np.full(TINY, np.nan, np.float32))
    cfg = _tiny_config(epochs=1, batch_size=1)
    pos = list(epoch_order(cfg.seed, 1, 4)).index(3) + 1
    with pytest.raises(NonFiniteLossError, match=f"epoch 1, step {pos}"):
        train(cfg, samples)


def test_loss_descends_over_training():
    _, h = train(_tiny_config(epochs=20, batch_size=2), _tiny_samples(4))
    assert np.mean(h.loss[-10:]) < np.mean(h.loss[:10])


def test_history_csv(tmp_path):
    h = TrainHistory(loss=[0.5, 0.25], val_dsc=[0.7, 0.8], seconds=[1, 1])
    path = tmp_path / "h.csv"
    write_history_csv(h, path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["epoch", "loss", "val_dsc"]
    assert rows[1:] == [["1", "0.5", "0.7"], ["2", "0.25", "0.8"]]
    write_history_csv(TrainHistory(loss=[0.5]), path)
    assert list(csv.reader(open(path)))[1] == ["1", "0.5", ""]


def test_overfit_two_samples(overfit):
    _, history, _ = overfit
    assert history.epochs == 40
    assert min(history.loss) < 0.05


def test_segment_labels_and_volume_bounds(overfit):
    model, _, subj = overfit
    cs = CropSpec(DESK)
    mask, left_ml, right_ml = segment_subject(model, subj.volume, subj.landmarks, cs)
    assert set(np.unique(mask.labels)) <= {0, 1, 2}
    crop_ml = np.prod(DESK) * subj.volume.spacing.voxel_mm3 / 1000
    assert 0 <= left_ml <= crop_ml and 0 <= right_ml <= crop_ml
    assert right_ml > 0 and left_ml > 0
    # training data seen: the fit should be close
    assert subject_dsc(subj.mask, mask) > 0.8


def test_cleanup_keeps_one_component_per_side(overfit):
    from scipy import ndimage
    model, _, subj = overfit
    mask, _, _ = segment_subject(model, subj.volume, subj.landmarks, CropSpec(DESK), cleanup=True)
    for label in (RIGHT, LEFT):
        _, n = ndimage.label(np.asarray(mask.labels) == label)
        assert n <= 1


def test_symmetric_phantom_volumes_match(overfit):
    model, _, _ = overfit
    subj = _phantom(3, symmetric=True)
    np.testing.assert_array_equal(subj.volume.voxels, subj.volume.voxels[::-1])
    _, left_ml, right_ml = segment_subject(model, subj.volume, subj.landmarks, CropSpec(DESK))
    assert right_ml > 0
    assert abs(left_ml - right_ml) <= 0.05 * max(left_ml, right_ml)


def _swap(labels):
    out = np.zeros_like(labels)
    out[labels == RIGHT] = LEFT
    out[labels == LEFT] = RIGHT
    return out


def test_mirror_consistency_symmetric(overfit):
    model, _, _ = overfit
    subj = _phantom(5, symmetric=True)
    mask, _, _ = segment_subject(model, subj.volume, subj.landmarks, CropSpec(DESK))
    np.testing.assert_array_equal(_swap(flip_x(mask).labels), mask.labels)


def test_mirror_consistency_general(overfit):
    model, _, _ = overfit
    subj = _phantom(2)
    cs = CropSpec(DESK)
    mask, l1, r1 = segment_subject(model, subj.volume, subj.landmarks, cs)
    nx = subj.volume.dims[0]
    mask2, l2, r2 = segment_subject(model, flip_x(subj.volume), subj.landmarks.flipped(nx), cs)
    np.testing.assert_array_equal(_swap(flip_x(mask).labels), mask2.labels)
    assert (l1, r1) == (r2, l2)


def test_exact_prediction_scores_one(overfit):
    model, _, subj = overfit
    pred, _, _ = segment_subject(model, subj.volume, subj.landmarks, CropSpec(DESK))
    fake = SubjectImages("X", subj.volume, pred, subj.landmarks)
    assert evaluate_dsc(model, [fake], CropSpec(DESK)) == [1.0]


def test_untrained_model_is_poor():
    model = build_model(ArchitectureSpec(DESK, width=0.25), seed=0)
    subjects = [_phantom(i) for i in range(3)]
    scores = evaluate_dsc(model, subjects, CropSpec(DESK))
    assert len(scores) == 3
    assert all(0 <= s <= 1 for s in scores)
    assert np.mean(scores) < 0.5


def test_crop_mismatch_is_argument_error(overfit):
    model, _, subj = overfit
    with pytest.raises(ValueError, match="crop dims"):
        segment_subject(model, subj.volume, subj.landmarks, CropSpec((32, 32, 32)))


def test_landmark_outside_volume_rejected(overfit):
    model, _, subj = overfit
    bad = LandmarkPair(subj.landmarks.right, (50, 20, 999))
    with pytest.raises(ValueError):
        segment_subject(model, subj.volume, bad, CropSpec(DESK))


def test_validation_recorded_per_epoch():
    vol = Volume3D(np.zeros((40, 24, 24), np.float32), (1, 1, 1))
    mask = Mask3D(np.zeros((40, 24, 24), np.uint8), (1, 1, 1))
    subj = SubjectImages("V", vol, mask, LandmarkPair((10, 12, 4), (29, 12, 4)))
    logs = []
    _, h = train(_tiny_config(epochs=2), _tiny_samples(2), validation=[subj], log=logs.append)
    assert len(h.val_dsc) == 2 and all(0 <= v <= 1 for v in h.val_dsc)
    assert len(logs) == 2 and "val_dsc=" in logs[0]
