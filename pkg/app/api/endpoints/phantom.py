from flask import request
from flask_restx import Resource, fields

from app.api import phantom_ns
from app.core.config import Config
from app.core.phantom import PhantomConfig, write_phantom_dataset
from app.core.volume_io import read_manifest

config = Config()

generate_request = phantom_ns.model('PhantomRequest', {
  'out': fields.String(required=True, description='Output directory'),
  'count': fields.Integer(default=4, description='Number of cases'),
  'shape': fields.List(fields.Integer, description='Volume shape, three integers'),
  'seed': fields.Integer(default=0, description='Dataset seed'),
  'half_fraction': fields.Float(default=0.5, description='Share of half-labeled cases')
})

case_model = phantom_ns.model('PhantomCase', {
  'case_id': fields.String(description='Case identifier'),
  'volume_path': fields.String(description='Image file'),
  'label_path': fields.String(description='Three-class label file'),
  'labeling': fields.String(description='full | half_left | half_right')
})

generate_result = phantom_ns.model('PhantomResult', {
  'manifest': fields.String(description='Written manifest path'),
  'cases': fields.List(fields.Nested(case_model))
})


@phantom_ns.route('/generate')
class GeneratePhantoms(Resource):
  @phantom_ns.doc('generate_phantoms')
  @phantom_ns.expect(generate_request)
  @phantom_ns.marshal_with(generate_result)
  def post(self):
    """Write a synthetic phantom dataset and its manifest"""
    data = request.json or {}
    if not data.get('out'):
      phantom_ns.abort(400, "Missing required field: out")

    section = dict(config.get('phantom', {}))
    for key in ('shape', 'seed'):
      if data.get(key) is not None:
        section[key] = data[key]
    phantom_config = PhantomConfig.from_dict(section)

    manifest_path = write_phantom_dataset(
      data['out'],
      int(data.get('count', 4)),
      phantom_config,
      float(data.get('half_fraction', 0.5))
    )
    manifest = read_manifest(manifest_path)
    return {
      'manifest': manifest_path,
      'cases': [
        {
          'case_id': entry.case_id,
          'volume_path': entry.volume_path,
          'label_path': entry.label_path,
          'labeling': entry.labeling.value
        }
        for entry in manifest.entries
      ]
    }
