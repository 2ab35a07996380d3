# test_inference.py
import json

import numpy as np
import pytest
import torch

from app.core.errors import CheckpointError, ManifestError, ShapeMismatchError
from app.core.inference import (
    evaluate, evaluate_case, predict, sliding_window_probabilities, window_starts
)
from app.core.model import build_model
from app.core.trainer import train
from app.core.volume_io import (
    DatasetManifest, Labeling, LabelScheme, LabelVolume, ManifestEntry, Volume, load_volume, read_manifest
)

from tests.conftest import tiny_train_config


@pytest.fixture(scope='module')
def trained(phantom_manifest, tmp_path_factory):
    config = tiny_train_config(tmp_path_factory.mktemp('trained'), max_epochs=1, steps_per_epoch=1)
    return train(config, read_manifest(phantom_manifest)), config


@pytest.mark.parametrize('size,patch,stride,expected', [
    (32, 16, 8, [0, 8, 16]),
    (20, 16, 8, [0, 4]),
    (16, 16, 8, [0]),
    (10, 16, 8, [0]),
    (33, 16, 16, [0, 16, 17])
])
def test_window_starts(size, patch, stride, expected):
    assert window_starts(size, patch, stride) == expected


def test_single_window_equals_one_forward_pass(tiny_config):
    model = build_model(tiny_config).eval()
    image = np.random.default_rng(0).random((2, 16, 16, 16)).astype(np.float32)
    probabilities = sliding_window_probabilities(model, image, (16, 16, 16))
    with torch.no_grad():
        direct = model(torch.from_numpy(image)[None])[0].numpy()
    assert probabilities.shape == (4, 16, 16, 16)
    assert np.allclose(probabilities, direct, atol=1e-6)


def test_small_and_uneven_volumes_are_cropped_back(tiny_config):
    model = build_model(tiny_config)
    image = np.random.default_rng(1).random((2, 10, 24, 16)).astype(np.float32)
    probabilities = sliding_window_probabilities(model, image, (16, 16, 16), overlap=0.5)
    assert probabilities.shape == (4, 10, 24, 16)
    assert np.all((probabilities >= 0.0) & (probabilities <= 1.0))

    with pytest.raises(ShapeMismatchError):
        sliding_window_probabilities(model, image, (16, 16, 16), overlap=1.0)
    with pytest.raises(ShapeMismatchError):
        sliding_window_probabilities(model, image[0], (16, 16, 16))


def test_predict_keeps_geometry(tiny_config):
    model = build_model(tiny_config)
    data = np.full((20, 16, 16), -800.0, dtype=np.float32)
    volume = Volume(data, spacing=(0.7, 0.7, 1.5), origin=(1.0, 2.0, 3.0))
    labels = predict((model, tiny_config), volume)
    assert labels.shape == (20, 16, 16)
    assert labels.scheme is LabelScheme.FIVE_CLASS
    assert labels.spacing == (0.7, 0.7, 1.5)
    assert labels.origin == (1.0, 2.0, 3.0)
    assert labels.data.max() <= 4

    with pytest.raises(ShapeMismatchError):
        predict((model, tiny_config), np.zeros((3, 16, 16, 16), dtype=np.float32))
    with pytest.raises(CheckpointError):
        predict('/nonexistent/best.pt', volume)


def _five_class_labels():
    data = np.zeros((8, 6, 6), dtype=np.uint8)
    data[1:3, 1:3, 1:3] = 1
    data[1:3, 3:5, 3:5] = 2
    data[5:7, 1:3, 1:3] = 3
    data[5:7, 3:5, 3:5] = 4
    return LabelVolume(data, LabelScheme.FIVE_CLASS)


def test_perfect_prediction_scores_perfectly():
    labels = _five_class_labels()
    rows = evaluate_case(labels, labels)
    assert [(kind, name) for kind, name, _ in rows] == [
        ('structure', 'artery'), ('structure', 'vein'),
        ('class', 'left_artery'), ('class', 'left_vein'),
        ('class', 'right_artery'), ('class', 'right_vein')
    ]
    for _, _, values in rows:
        assert values['dsc'] == 100.0
        assert values['hd95'] == 0.0
        assert values['nsd'] == 1.0


def test_half_labeled_cases_ignore_the_unannotated_side():
    truth = _five_class_labels()
    left_only = truth.data.copy()
    left_only[4:] = 0
    ground_truth = LabelVolume(left_only, LabelScheme.FIVE_CLASS)

    rows = evaluate_case(truth, ground_truth, Labeling.HALF_LEFT)
    assert [name for kind, name, _ in rows if kind == 'class'] == ['left_artery', 'left_vein']
    assert all(values['dsc'] == 100.0 for _, _, values in rows)

    full = evaluate_case(truth, ground_truth, Labeling.FULL)
    assert dict((name, v['dsc']) for _, name, v in full)['artery'] < 100.0


def test_three_class_predictions_only_score_structures():
    truth = _five_class_labels()
    collapsed = LabelVolume(np.where(truth.data > 2, truth.data - 2, truth.data).astype(np.uint8),
                            LabelScheme.THREE_CLASS)
    rows = evaluate_case(collapsed, truth)
    assert [kind for kind, _, _ in rows] == ['structure', 'structure']
    assert rows[0][2]['dsc'] == 100.0

    with pytest.raises(ShapeMismatchError):
        evaluate_case(collapsed, LabelVolume(np.zeros((4, 4, 4), dtype=np.uint8)))


def test_evaluate_trained_checkpoint(trained, phantom_manifest, tmp_path):
    result, config = trained
    manifest = read_manifest(phantom_manifest)
    subset = DatasetManifest(entries=manifest.entries[:3], seed=manifest.seed)
    output = tmp_path / 'metrics.jsonl'
    report = evaluate(result.last_checkpoint, subset, output=str(output))

    assert report.metadata['config_hash'] == config.config_hash()
    assert report.metadata['nsd_tau'] == 1.0
    assert report.metadata['epoch'] == 0
    assert len(report.metadata['state_hash']) == 64

    structure_rows = [r for r in report.records if r['kind'] == 'structure']
    assert len(structure_rows) == 6
    artery = np.mean([r['dsc'] for r in structure_rows if r['name'] == 'artery'])
    assert report.aggregate('structure')['artery']['dsc'] == pytest.approx(artery)

    # half-left case scores left classes only, half-right case right classes only
    classes = {(r['case'], r['name']) for r in report.records if r['kind'] == 'class'}
    assert ('case_000_image', 'right_artery') not in classes
    assert ('case_001_image', 'left_vein') not in classes
    assert ('case_002_image', 'left_artery') in classes

    summary = json.loads(output.read_text().splitlines()[-1])
    assert summary['cases'] == 3

    tighter = evaluate(result.last_checkpoint, subset, tau=0.5)
    assert tighter.metadata['nsd_tau'] == 0.5


def test_evaluate_needs_ground_truth(trained, phantom_manifest):
    result, _ = trained
    entry = read_manifest(phantom_manifest).entries[0]
    unlabeled = DatasetManifest(entries=[ManifestEntry(entry.volume_path, None, Labeling.FULL)])
    with pytest.raises(ManifestError):
        evaluate(result.last_checkpoint, unlabeled)


def test_predict_from_checkpoint_path(trained, phantom_manifest):
    result, _ = trained
    volume = load_volume(read_manifest(phantom_manifest).entries[0].volume_path)
    labels = predict(result.best_checkpoint, volume)
    assert labels.shape == volume.shape
    assert labels.spacing == volume.spacing
