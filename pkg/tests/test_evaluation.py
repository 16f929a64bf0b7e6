import csv

import numpy as np
import pytest

from fanlab.arch import FanConfig, build_fan, size_sweep_configs
from fanlab.errors import ConfigurationError, ContractError
from fanlab.evaluation import (DEFAULT_FACE_PX, DEFAULT_NOISE_LEVELS, FanPredictor, PassthroughPredictor,
                               ablation_report, auc_by_yaw, evaluate, mean_nme, prepare_crops)
from fanlab.metrics import auc_from_results

MICRO = FanConfig(num_stacks=1, hg_depth=1, width=8, num_landmarks=5, input_resolution=16)


@pytest.fixture(scope="module")
def micro_model():
    return build_fan(MICRO, np.random.default_rng(0))


def test_passthrough_is_perfect(small_dataset):
    res = evaluate(PassthroughPredictor(num_landmarks=5), small_dataset)
    assert mean_nme(res) < 1e-12
    assert auc_from_results(res) == pytest.approx(1.0)


def test_passthrough_under_noise_is_still_perfect(small_dataset):
    res = evaluate(PassthroughPredictor(num_landmarks=5), small_dataset, noise=0.3, face_px=30)
    assert mean_nme(res) < 1e-9


def test_landmark_count_mismatch(small_dataset):
    with pytest.raises(ContractError):
        evaluate(PassthroughPredictor(num_landmarks=68), small_dataset)


def test_crops_are_order_independent(small_dataset):
    a = prepare_crops(small_dataset, 64, noise=0.2, seed=4)
    b = prepare_crops(small_dataset[5:], 64, noise=0.2, seed=4)
    # the key includes the index, so shifting the list changes the draw but
    # recomputing the same list does not
    again = prepare_crops(small_dataset, 64, noise=0.2, seed=4)
    for (ca, aa), (cb, ab) in zip(a, again):
        np.testing.assert_array_equal(aa.matrix, ab.matrix)
    assert not np.array_equal(a[5][1].matrix, b[0][1].matrix)


def test_fan_predictor_shapes(micro_model, small_dataset):
    crops = [c for c, _ in prepare_crops(small_dataset[:3], 16)]
    maps = FanPredictor(micro_model).heatmaps(crops)
    assert maps.shape == (3, 5, 4, 4)
    preds = FanPredictor(micro_model).predict(crops)
    assert len(preds) == 3 and len(preds[0]) == 5


def test_noise_zero_row_equals_plain_evaluation(micro_model, small_dataset):
    table = ablation_report(micro_model, small_dataset, "noise")
    assert table.shape == (4, 3)
    assert table.conditions == ["0", "0.1", "0.2", "0.3"]
    plain, _ = auc_by_yaw(evaluate(micro_model, small_dataset))
    np.testing.assert_array_equal(np.nan_to_num(table.values[0], nan=-1), np.nan_to_num(plain, nan=-1))
    assert DEFAULT_NOISE_LEVELS == (0.0, 0.1, 0.2, 0.3)


def test_yaw_and_resolution_shapes(micro_model, small_dataset, tmp_path):
    yaw = ablation_report(micro_model, small_dataset, "yaw")
    assert yaw.shape == (1, 3)
    assert yaw.counts.sum() == len(small_dataset)
    res = ablation_report(micro_model, small_dataset, "resolution")
    assert 30 in DEFAULT_FACE_PX and res.shape == (len(DEFAULT_FACE_PX), 3)
    res.to_csv(tmp_path / "r.csv")
    with open(tmp_path / "r.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["condition", "[0,30)", "[30,60)", "[60,90]"]
    assert [r[0] for r in rows[1:]] == ["native", "60px", "45px", "30px", "20px"]


def test_size_protocol(small_dataset):
    ladder = [(str(i), build_fan(FanConfig(num_stacks=s, hg_depth=1, width=8, num_landmarks=5,
                                           input_resolution=16), np.random.default_rng(i)))
              for i, s in enumerate((2, 1))]
    table = ablation_report(ladder, small_dataset, "size")
    assert table.shape == (2, 3)
    with pytest.raises(ConfigurationError):
        ablation_report(ladder[0][1], small_dataset, "size")
    assert len(size_sweep_configs()) >= 6


def test_unknown_protocol(micro_model, small_dataset):
    with pytest.raises(ConfigurationError):
        ablation_report(micro_model, small_dataset, "pose")
