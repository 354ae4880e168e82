# Copyright 2024 The gemlab Authors.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
# https://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Default base configuration for training and evaluating embedding models."""

import importlib
import importlib.util
import json
import os
from typing import Any, Sequence

from gemlab import constants
import ml_collections

# Flat keys of a JSON config file are routed to one of these sections.
ROUTED_SECTIONS = ('model', 'train')


def default() -> ml_collections.ConfigDict:
  """Create set of default parameters for a training run.

  Returns:
    ml_collections.ConfigDict containing default settings.
  """
  cfg = ml_collections.ConfigDict({
      # Seed of every random stream unless model.seed or train.seed is set.
      'seed': constants.DEFAULT_SEED,
      'model': {
          'n_layers': 4,
          'n_heads': 4,
          'd_model': 128,
          'd_ff': 512,
          'vocab_size': 8192,
          'max_positions': constants.MAX_SEQ_LEN_CAP,
          'dropout_rate': 0.1,
          'seed': None,  # None: follow the top-level seed.
          'dtype': 'float32',  # float64 requires jax_enable_x64.
      },
      'train': {
          'p_raw': 0.8,  # probability of a plain example
          'k_specials': 1,
          'batch_size': 32,
          'max_seq_len': 128,
          'lr_ntp': 1.e-4,
          'lr_cl': 1.e-5,
          'switch_step': 100,
          'total_steps': 1000,
          'dropout_rate_prefix': 0.15,
          'reconstruct_share': 0.5,
          'seed': None,
          # False keeps alpha at 0 for the whole run.
          'contrastive': True,
          'symmetric_contrastive': False,
          'pooling': 'mean',
          'grad_clip': 1.0,
          'adam_b1': 0.9,
          'adam_b2': 0.999,
          'adam_eps': 1.e-8,
      },
      'vocab': {
          'cap': 8192,
      },
      'embed': {
          'k': 1,
          'pooling': 'mean',
      },
      'eval': {
          'suite': 'retrieval',  # one of retrieval, sts, ppl
          'noise_rate': 0.3,
          'num_docs': 200,
          'num_sts_pairs': 100,
          'baseline': False,  # also score vanilla mean-pool embeddings
      },
      'reconstruct': {
          'k': 1,
          'max_len': 64,
      },
      'synthetic': {
          'num_docs': 500,
          'num_rows': 32000,
          'min_len': 20,
          'max_len': 60,
          'num_topics': 25,
          'topic_words': 40,
          'common_words': 60,
          'topic_share': 0.7,
      },
      'ablation': {
          'mix_ratios': (0.0, 0.8, 0.99),
          'k_values': (1, 5),
          'base_steps': 200,
          'steps': 400,
          'studies': ('mix', 'k', 'objective'),
      },
      'log': {
          'save_path': '',
          # Checkpoint whose parameters initialise a new run.
          'init_from': '',
          'stats_frequency': 10,  # steps between log lines
          'save_frequency': 500,  # steps between checkpoints; 0 for final only
      },
      'debug': {
          # Check parameters and optimizer state are finite after each step.
          'check_nan': False,
      },
  })
  return cfg


def resolve(cfg: ml_collections.ConfigDict) -> ml_collections.ConfigDict:
  """Fills derived values and checks cross-section constraints.

  model.seed and train.seed default to the top-level seed.

  Args:
    cfg: ml_collections.ConfigDict containing settings.

  Returns:
    A resolved copy of cfg.

  Raises:
    ValueError: if sections are inconsistent.
  """
  cfg = cfg.copy_and_resolve_references()
  with cfg.ignore_type():
    for section in ROUTED_SECTIONS:
      if cfg[section].seed is None:
        cfg[section].seed = cfg.seed
  if cfg.train.max_seq_len > cfg.model.max_positions:
    raise ValueError(
        f'train.max_seq_len ({cfg.train.max_seq_len}) exceeds '
        f'model.max_positions ({cfg.model.max_positions}).')
  if cfg.vocab.cap > cfg.model.vocab_size:
    raise ValueError(f'vocab.cap ({cfg.vocab.cap}) exceeds model.vocab_size '
                     f'({cfg.model.vocab_size}).')
  return cfg


def _set(cfg: ml_collections.ConfigDict, path: str, value: Any) -> None:
  *sections, key = path.split('.')
  node = cfg
  for section in sections:
    if section not in node or not isinstance(node[section],
                                             ml_collections.ConfigDict):
      raise ValueError(f'Unknown config section {path!r}.')
    node = node[section]
  if key not in node:
    raise ValueError(f'Unknown config key {path!r}.')
  if isinstance(value, list):
    value = tuple(value)
  try:
    if node[key] is None or value is None:
      with node.ignore_type():
        node[key] = value
    else:
      node[key] = value
  except TypeError as e:
    raise ValueError(f'Bad value {value!r} for {path}: {e}') from e


def _merge(cfg: ml_collections.ConfigDict, values: Any, prefix: str) -> None:
  for key, value in values.items():
    path = f'{prefix}{key}'
    if isinstance(value, dict):
      _merge(cfg, value, path + '.')
    else:
      _set(cfg, path, value)


def _route(key: str, cfg: ml_collections.ConfigDict) -> str:
  if key in cfg:
    return key
  for section in ROUTED_SECTIONS:
    if key in cfg[section]:
      return f'{section}.{key}'
  raise ValueError(f'Unknown config key {key!r}.')


def from_json(data: str) -> ml_collections.ConfigDict:
  """Builds a config from JSON text.

  Flat keys are routed to the model or train section by field name; nested
  objects are merged into the section they name.
  """
  cfg = default()
  values = json.loads(data)
  if not isinstance(values, dict):
    raise ValueError('Config file must hold a JSON object.')
  for key, value in values.items():
    if isinstance(value, dict):
      _merge(cfg, {key: value}, '')
    else:
      _set(cfg, _route(key, cfg), value)
  return cfg


def load(path: str) -> ml_collections.ConfigDict:
  """Loads a config file.

  Args:
    path: a JSON file, a Python file defining get_config(), or the name of a
      preset in gemlab/configs (e.g. 'desk').

  Returns:
    The (unresolved) config.
  """
  if path.endswith('.json'):
    with open(path, 'r', encoding='utf-8') as f:
      return from_json(f.read())
  if path.endswith('.py'):
    spec = importlib.util.spec_from_file_location(
        os.path.splitext(os.path.basename(path))[0], path)
    if spec is None or spec.loader is None:
      raise OSError(f'Cannot import config file {path}.')
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
  else:
    try:
      module = importlib.import_module(f'gemlab.configs.{path}')
    except ImportError as e:
      raise ValueError(f'Unknown config preset {path!r}.') from e
  return module.get_config()


def parse_override(override: str):
  """Splits 'section.key=value', decoding value as JSON when possible."""
  if '=' not in override:
    raise ValueError(f'Override {override!r} is not of the form key=value.')
  path, raw = override.split('=', 1)
  try:
    value = json.loads(raw)
  except json.JSONDecodeError:
    value = raw
  return path.strip(), value


def apply_overrides(cfg: ml_collections.ConfigDict,
                    overrides: Sequence[str]) -> ml_collections.ConfigDict:
  """Applies 'section.key=value' overrides in place and returns cfg."""
  for override in overrides:
    path, value = parse_override(override)
    _set(cfg, path if '.' in path else _route(path, cfg), value)
  return cfg
