#!/usr/bin/env python3
"""
Command-line entry point.

Usage:
  python -m app.cli phantom generate --count 20 --shape 64 --seed 0 --out data/phantoms
  python -m app.cli preprocess --manifest data/phantoms/manifest.jsonl --out data/preprocessed
  python -m app.cli train --manifest data/phantoms/manifest.jsonl --epochs 20
  python -m app.cli eval --checkpoint runs/default/best.pt --manifest data/phantoms/manifest.jsonl
  python -m app.cli predict --checkpoint runs/default/best.pt --input ct.nii.gz --output labels.nii.gz
  python -m app.cli serve

Every action accepts --config (default: $CONFIG_PATH or config/config.json)
and --log-dir.
"""
import sys
import json
import logging
import argparse
from typing import Dict, List, Optional

from app import create_app
from app.core.config import Config, load_train_config
from app.core.errors import VesselSegError
from app.core.inference import evaluate, predict
from app.core.phantom import PhantomConfig, write_phantom_dataset
from app.core.preprocess import export_preprocessed
from app.core.trainer import run_seeds, train
from app.core.volume_io import load_volume, read_manifest, save_volume
from app.utils.logging import setup_logging

logger = logging.getLogger('app.cli')


def parse_args(argv: Optional[List[str]] = None):
  """Parse command line arguments"""
  parser = argparse.ArgumentParser(description='Language-guided artery/vein segmentation')
  common = argparse.ArgumentParser(add_help=False)
  common.add_argument('--config', help='JSON configuration file')
  common.add_argument('--log-dir', help='Directory for vesselseg.log')

  sub = parser.add_subparsers(dest='command', required=True)

  phantom_parser = sub.add_parser('phantom', help='Synthetic phantom datasets')
  phantom_actions = phantom_parser.add_subparsers(dest='action', required=True)
  generate_parser = phantom_actions.add_parser('generate', parents=[common], help='Write a synthetic phantom dataset')
  generate_parser.add_argument('--count', type=int, default=20, help='Number of cases')
  generate_parser.add_argument('--shape', type=int, nargs='+', help='Volume shape (one or three integers)')
  generate_parser.add_argument('--seed', type=int, help='Dataset seed')
  generate_parser.add_argument('--out', required=True, help='Output directory')
  generate_parser.add_argument('--half-fraction', type=float, default=0.5, help='Share of half-labeled cases')

  preprocess_parser = sub.add_parser('preprocess', parents=[common], help='Export windowed, Hessian and label volumes')
  preprocess_parser.add_argument('--manifest', required=True, help='Input manifest')
  preprocess_parser.add_argument('--out', required=True, help='Output directory')

  train_parser = sub.add_parser('train', parents=[common], help='Train a segmenter')
  train_parser.add_argument('--manifest', help='Training manifest (overrides data.manifest)')
  train_parser.add_argument('--epochs', type=int, help='Overrides training.max_epochs')
  train_parser.add_argument('--seed', type=int, nargs='+', help='One seed, or several for a repeated-seed run')
  train_parser.add_argument('--out', help='Overrides training.out_dir')

  evaluate_parser = sub.add_parser('eval', parents=[common], help='Evaluate a checkpoint on a manifest')
  evaluate_parser.add_argument('--checkpoint', required=True, help='Checkpoint path')
  evaluate_parser.add_argument('--manifest', required=True, help='Manifest with ground truth')
  evaluate_parser.add_argument('--out', help='JSON-lines report path')
  evaluate_parser.add_argument('--tau', type=float, help='NSD tolerance in mm')

  predict_parser = sub.add_parser('predict', parents=[common], help='Label one CT volume')
  predict_parser.add_argument('--checkpoint', required=True, help='Checkpoint path')
  predict_parser.add_argument('--input', required=True, help='CT volume (NIfTI)')
  predict_parser.add_argument('--output', required=True, help='Predicted label volume (NIfTI)')

  sub.add_parser('serve', parents=[common], help='Run the REST API')
  return parser.parse_args(argv)


def _shape(values: Optional[List[int]]):
  if not values:
    return None
  if len(values) == 1:
    return [values[0]] * 3
  if len(values) != 3:
    raise VesselSegError(f"--shape takes one or three integers, got {values}")
  return values


def run_phantom(args, config: Config) -> None:
  section = dict(config.get('phantom', {}))
  shape = _shape(args.shape)
  if shape:
    section['shape'] = shape
  if args.seed is not None:
    section['seed'] = args.seed
  manifest = write_phantom_dataset(args.out, args.count, PhantomConfig.from_dict(section), args.half_fraction)
  print(manifest)


def run_preprocess(args, config: Config) -> None:
  train_config = load_train_config(config.config_path)
  manifest = export_preprocessed(read_manifest(args.manifest), train_config.preprocess, args.out)
  print(manifest)


def run_train(args, config: Config) -> None:
  overrides: Dict = {
    'data.manifest': args.manifest,
    'training.max_epochs': args.epochs,
    'training.out_dir': args.out
  }
  seeds = args.seed or []
  if len(seeds) == 1:
    overrides['training.seed'] = seeds[0]
  train_config = load_train_config(config.config_path, overrides)

  if len(seeds) > 1:
    summary = run_seeds(train_config, seeds)
    print(json.dumps({k: summary[k] for k in ('seeds', 'mean', 'std', 'metrics', 'wall_time')}))
    return
  result = train(train_config)
  print(json.dumps({'checkpoint': result.best_checkpoint, 'best_val_dsc': result.best_val_dsc}))


def run_eval(args, config: Config) -> None:
  report = evaluate(args.checkpoint, args.manifest, args.tau, args.out)
  print(json.dumps(report.summary(), sort_keys=True))


def run_predict(args, config: Config) -> None:
  labels = predict(args.checkpoint, load_volume(args.input))
  save_volume(labels, args.output)
  print(args.output)


def run_serve(args, config: Config) -> None:
  app_config = config.get('app', {})
  create_app().run(
    host=app_config.get('host', '127.0.0.1'),
    port=app_config.get('port', 5000),
    debug=app_config.get('debug', False)
  )


COMMANDS = {
  'phantom': run_phantom,
  'preprocess': run_preprocess,
  'train': run_train,
  'eval': run_eval,
  'predict': run_predict,
  'serve': run_serve
}


def main(argv: Optional[List[str]] = None) -> int:
  """Main function"""
  args = parse_args(argv)
  config = Config(args.config)
  log_dir = args.log_dir or config.get('logging', {}).get('dir', 'log')
  level = getattr(logging, str(config.get('logging', {}).get('level', 'INFO')).upper(), logging.INFO)
  setup_logging(log_dir, level, role='api' if args.command == 'serve' else 'cli')

  logger.info(f"Running {args.command} with configuration {config.config_path}")
  try:
    COMMANDS[args.command](args, config)
  except VesselSegError as e:
    logger.error(f"{args.command} failed: {e.message}")
    sys.exit(1)
  return 0


if __name__ == '__main__':
  main()
