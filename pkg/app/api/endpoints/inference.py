from flask import request
from flask_restx import Resource, fields
import numpy as np

from app.api import inference_ns
from app.core.inference import predict
from app.core.volume_io import load_volume, save_volume

predict_request = inference_ns.model('PredictRequest', {
  'checkpoint': fields.String(required=True, description='Checkpoint path'),
  'volume': fields.String(required=True, description='Input CT volume (NIfTI)'),
  'output': fields.String(required=True, description='Where to write the predicted labels')
})

predict_result = inference_ns.model('PredictResult', {
  'output': fields.String(description='Written label file'),
  'shape': fields.List(fields.Integer),
  'scheme': fields.String(description='Label scheme of the prediction'),
  'voxel_counts': fields.Raw(description='Voxels per label value')
})


@inference_ns.route('/predict')
class Predict(Resource):
  @inference_ns.doc('predict')
  @inference_ns.expect(predict_request)
  @inference_ns.marshal_with(predict_result)
  def post(self):
    """Label a CT volume with a trained checkpoint"""
    data = request.json or {}
    if not all(data.get(key) for key in ('checkpoint', 'volume', 'output')):
      inference_ns.abort(400, "Missing required fields: checkpoint, volume, output")

    labels = predict(data['checkpoint'], load_volume(data['volume']))
    save_volume(labels, data['output'])
    values, counts = np.unique(labels.data, return_counts=True)
    return {
      'output': data['output'],
      'shape': list(labels.shape),
      'scheme': labels.scheme.value,
      'voxel_counts': {str(int(v)): int(c) for v, c in zip(values, counts)}
    }
