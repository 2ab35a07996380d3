from flask import request
from flask_restx import Resource, fields

from app.api import evaluation_ns
from app.core.inference import evaluate

evaluation_request = evaluation_ns.model('EvaluationRequest', {
  'checkpoint': fields.String(required=True, description='Checkpoint path'),
  'manifest': fields.String(required=True, description='Manifest of cases with ground truth'),
  'output': fields.String(description='Optional JSON-lines report path'),
  'nsd_tau': fields.Float(description='NSD tolerance in mm')
})


@evaluation_ns.route('/run')
class RunEvaluation(Resource):
  @evaluation_ns.doc('run_evaluation')
  @evaluation_ns.expect(evaluation_request)
  def post(self):
    """Evaluate a checkpoint and return the report summary"""
    data = request.json or {}
    if not data.get('checkpoint') or not data.get('manifest'):
      evaluation_ns.abort(400, "Missing required fields: checkpoint, manifest")

    report = evaluate(data['checkpoint'], data['manifest'], data.get('nsd_tau'), data.get('output'))
    return report.summary()
