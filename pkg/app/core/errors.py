from typing import Any, Dict, Optional


class VesselSegError(Exception):
  """Base error for the segmentation pipeline.

  Carries an HTTP status so the API layer can report it without guessing.
  """
  status_code = 400

  def __init__(self, message: str, status_code: Optional[int] = None, details: Optional[Dict[str, Any]] = None):
    super().__init__(message)
    self.message = message
    if status_code is not None:
      self.status_code = status_code
    self.details = details or {}

  def to_dict(self) -> Dict[str, Any]:
    response = {
      'error': self.message,
      'status_code': self.status_code
    }
    response.update(self.details)
    return response


class ConfigError(VesselSegError):
  pass


class VolumeFormatError(VesselSegError):
  def __init__(self, path: str, reason: str):
    super().__init__(f"{path}: {reason}", details={'path': str(path)})
    self.path = str(path)
    self.reason = reason


class VolumeWriteError(VesselSegError):
  def __init__(self, path: str, reason: str):
    super().__init__(f"Cannot write {path}: {reason}", details={'path': str(path)})
    self.path = str(path)


class ManifestError(VesselSegError):
  pass


class SplitError(VesselSegError):
  pass


class LabelSchemeError(VesselSegError):
  pass


class PreprocessError(VesselSegError):
  pass


class ShapeMismatchError(VesselSegError):
  pass


class EmbeddingProviderError(VesselSegError):
  def __init__(self, message: str, prompt: Optional[str] = None):
    super().__init__(message, details={'prompt': prompt} if prompt is not None else None)
    self.prompt = prompt


class PhantomError(VesselSegError):
  pass


class CheckpointError(VesselSegError):
  status_code = 404


class DivergenceError(VesselSegError):
  status_code = 500

  def __init__(self, step: int, terms: Dict[str, float]):
    super().__init__(
      f"Non-finite loss at step {step}",
      details={'step': step, 'terms': terms}
    )
    self.step = step
    self.terms = terms
