import logging

from flask_restx import Api, fields

from app.core.errors import VesselSegError

logger = logging.getLogger(__name__)

# Initialize the API
api = Api(
  version='1.0',
  title='Vessel Segmentation API',
  description='Phantom generation, prediction and evaluation for language-guided artery/vein segmentation',
  doc='/api/docs',
  prefix='/api'
)


@api.errorhandler(VesselSegError)
def handle_pipeline_error(e):
  """Pipeline errors keep their own status code and details"""
  logger.warning(f"Request failed: {e.message}")
  return e.to_dict(), e.status_code


# Create namespaces for each endpoint group
phantom_ns = api.namespace('phantom', description='Synthetic phantom datasets')
inference_ns = api.namespace('inference', description='Prediction with a trained checkpoint')
evaluation_ns = api.namespace('evaluation', description='Checkpoint evaluation on a manifest')

# Define common models
metric_values = api.model('MetricValues', {
  'dsc': fields.Float(description='Dice similarity in percent'),
  'jaccard': fields.Float(description='Jaccard index in percent'),
  'nsd': fields.Float(description='Normalized surface distance, fraction within tau'),
  'hd95': fields.Float(description='95th percentile Hausdorff distance in mm')
})

error_model = api.model('Error', {
  'error': fields.String(description='Error message'),
  'status_code': fields.Integer(description='HTTP status code')
})

# Import endpoints to register them with the API
# This is crucial for the swagger UI to pick up all endpoints
import app.api.endpoints.phantom
import app.api.endpoints.inference
import app.api.endpoints.evaluation
