import os
import json
import logging
from logging.handlers import RotatingFileHandler
from typing import Any, Dict, Optional

from flask import has_request_context, request


class ContextFormatter(logging.Formatter):
  """
  Add the request's remote address (or the process role outside a request) to each record.
  """
  def __init__(self, fmt: str, role: str = 'cli'):
    super().__init__(fmt)
    self.role = role

  def format(self, record):
    record.context = request.remote_addr if has_request_context() else self.role
    return super().format(record)


def setup_logging(log_dir: str = 'log', level: int = logging.INFO, role: str = 'cli') -> logging.Logger:
  os.makedirs(log_dir, exist_ok=True)

  formatter = ContextFormatter(
    '%(asctime)s - %(name)s - %(levelname)s - %(context)s - %(message)s',
    role=role
  )

  file_handler = RotatingFileHandler(
    os.path.join(log_dir, 'vesselseg.log'),
    maxBytes=10485760,  # 10MB
    backupCount=5
  )
  file_handler.setFormatter(formatter)

  console_handler = logging.StreamHandler()
  console_handler.setFormatter(formatter)

  root_logger = logging.getLogger()
  root_logger.setLevel(level)
  root_logger.handlers.clear()
  root_logger.addHandler(file_handler)
  root_logger.addHandler(console_handler)

  logging.getLogger('werkzeug').setLevel(logging.WARNING)
  logging.getLogger('nibabel').setLevel(logging.WARNING)

  return root_logger


class JsonLinesWriter:
  """Append-only structured record log, one JSON object per line with sorted keys."""

  def __init__(self, path: str):
    self.path = path
    parent = os.path.dirname(path)
    if parent:
      os.makedirs(parent, exist_ok=True)

  def write(self, record: Dict[str, Any]) -> None:
    with open(self.path, 'a') as f:
      f.write(json.dumps(record, sort_keys=True) + '\n')

  def read(self, kind: Optional[str] = None) -> list:
    """Read records back, optionally filtered by their 'kind' field"""
    if not os.path.exists(self.path):
      return []
    records = []
    with open(self.path, 'r') as f:
      for line in f:
        line = line.strip()
        if not line:
          continue
        record = json.loads(line)
        if kind is None or record.get('kind') == kind:
          records.append(record)
    return records
