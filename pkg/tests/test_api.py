# test_api.py
import os

import pytest

from app import create_app
from app.core.volume_io import load_labels


@pytest.fixture(scope='module')
def client():
    app = create_app()
    return app.test_client()


@pytest.fixture(scope='module')
def phantoms(client, tmp_path_factory):
    out = tmp_path_factory.mktemp('api_phantoms')
    response = client.post('/api/phantom/generate', json={
        'out': str(out), 'count': 2, 'shape': [32, 32, 32], 'seed': 9, 'half_fraction': 0.5
    })
    assert response.status_code == 200
    return response.get_json()


def test_health_check(client):
    response = client.get('/health')
    assert response.status_code == 200
    assert response.get_json() == {'status': 'ok'}


def test_swagger_lists_the_namespaces(client):
    response = client.get('/api/swagger.json')
    assert response.status_code == 200
    paths = response.get_json()['paths']
    assert {'/phantom/generate', '/inference/predict', '/evaluation/run'} <= set(paths)


def test_generate_phantoms(phantoms):
    assert os.path.exists(phantoms['manifest'])
    assert [case['labeling'] for case in phantoms['cases']] == ['half_left', 'full']
    labels = load_labels(phantoms['cases'][0]['label_path'])
    assert labels.shape == (32, 32, 32)


def test_generate_requires_an_output_directory(client):
    response = client.post('/api/phantom/generate', json={'count': 2})
    assert response.status_code == 400


def test_pipeline_errors_keep_their_status(client, tmp_path):
    response = client.post('/api/phantom/generate', json={'out': str(tmp_path), 'count': 0})
    assert response.status_code == 400
    assert 'error' in response.get_json()


def test_predict_with_missing_checkpoint(client, phantoms, tmp_path):
    response = client.post('/api/inference/predict', json={
        'checkpoint': str(tmp_path / 'missing.pt'),
        'volume': phantoms['cases'][0]['volume_path'],
        'output': str(tmp_path / 'labels.nii.gz')
    })
    assert response.status_code == 404
    body = response.get_json()
    assert body['status_code'] == 404
    assert 'missing.pt' in body['error']


def test_predict_requires_all_fields(client):
    response = client.post('/api/inference/predict', json={'checkpoint': 'best.pt'})
    assert response.status_code == 400


def test_evaluation_requires_checkpoint_and_manifest(client):
    response = client.post('/api/evaluation/run', json={'manifest': 'manifest.jsonl'})
    assert response.status_code == 400
