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

"""Checkpoints as a JSON manifest line followed by a raw tensor payload.

A checkpoint file holds one line of UTF-8 JSON (sorted keys) describing the
model configuration, the step, the temperature, the vocabulary and every
tensor (name, shape, dtype, offset, nbytes), then a newline, then the
concatenated little-endian tensor bytes in manifest order. Parameters are
stored as float32 (float64 for 64-bit models); optimizer step counters as
int32.
"""

import datetime
import json
import os
from typing import Any, List, Mapping, Optional, Tuple

from absl import logging
import attr
from gemlab import corpus
from gemlab import networks
import jax
import jax.numpy as jnp
import numpy as np

FORMAT = 'gemlab-checkpoint-1'
PREFIX = 'gem_ckpt_'
SUFFIX = '.bin'


@attr.s(auto_attribs=True)
class Checkpoint:
  """Everything restored from a checkpoint file.

  Attributes:
    state: the model.
    step: number of completed training steps.
    opt_state: optimizer state, if one was stored and a template was given.
    vocab: the vocabulary, if stored.
    config: the effective run configuration as a plain dict, if stored.
  """
  state: networks.ModelState
  step: int
  opt_state: Any = None
  vocab: Optional[corpus.Vocab] = None
  config: Optional[Mapping[str, Any]] = None


def _named_leaves(tree, prefix: str) -> List[Tuple[str, Any]]:
  leaves, _ = jax.tree_util.tree_flatten_with_path(tree)
  return [(prefix + jax.tree_util.keystr(path), leaf) for path, leaf in leaves]


def _storage_dtype(leaf) -> np.dtype:
  dtype = np.dtype(leaf.dtype)
  if np.issubdtype(dtype, np.integer):
    return np.dtype('<i4')
  if dtype == np.float64:
    return np.dtype('<f8')
  return np.dtype('<f4')


def _encode(params, opt_state):
  """Returns (tensor entries, payload bytes)."""
  named = _named_leaves(params, 'params')
  if opt_state is not None:
    named += _named_leaves(opt_state, 'opt_state')
  entries, chunks, offset = [], [], 0
  for name, leaf in named:
    array = np.asarray(leaf)
    dtype = _storage_dtype(array)
    data = np.ascontiguousarray(array, dtype=dtype).tobytes()
    entries.append({'name': name, 'shape': list(array.shape),
                    'dtype': dtype.str, 'offset': offset,
                    'nbytes': len(data)})
    chunks.append(data)
    offset += len(data)
  return entries, b''.join(chunks)


def save_checkpoint(path: str,
                    state: networks.ModelState,
                    step: int = 0,
                    opt_state=None,
                    vocab: Optional[corpus.Vocab] = None,
                    config: Optional[Mapping[str, Any]] = None) -> str:
  """Writes a checkpoint file.

  Args:
    path: file to write.
    state: the model.
    step: number of completed training steps.
    opt_state: optimizer state pytree, optional.
    vocab: vocabulary used to encode the training data, optional.
    config: effective run configuration, must be JSON serializable.

  Returns:
    path.
  """
  entries, payload = _encode(state.params, opt_state)
  manifest = {
      'format': FORMAT,
      'model': state.config.to_dict(),
      'config': config,
      'step': int(step),
      'temperature': state.temperature,
      'vocab': vocab.to_dict() if vocab is not None else None,
      'tensors': entries,
      'payload_nbytes': len(payload),
  }
  header = json.dumps(manifest, sort_keys=True, separators=(',', ':'))
  logging.info('Saving checkpoint %s', path)
  with open(path, 'wb') as f:
    f.write(header.encode('utf-8'))
    f.write(b'\n')
    f.write(payload)
  return path


def _read(path: str):
  with open(path, 'rb') as f:
    header = f.readline()
    payload = f.read()
  if not header.endswith(b'\n'):
    raise ValueError(f'Checkpoint {path} has no manifest line.')
  try:
    manifest = json.loads(header.decode('utf-8'))
  except (UnicodeDecodeError, json.JSONDecodeError) as e:
    raise ValueError(f'Checkpoint {path} has a malformed manifest.') from e
  if manifest.get('format') != FORMAT:
    raise ValueError(f'Checkpoint {path} has unknown format '
                     f'{manifest.get("format")!r}.')
  if len(payload) != manifest['payload_nbytes']:
    raise ValueError(
        f'Checkpoint {path} payload has {len(payload)} bytes, manifest '
        f'declares {manifest["payload_nbytes"]}.')
  return manifest, payload


def _decode(template, prefix: str, tensors: Mapping[str, Mapping[str, Any]],
            payload: bytes):
  """Fills the leaves of template from the payload."""
  named = _named_leaves(template, prefix)
  treedef = jax.tree_util.tree_structure(template)
  leaves = []
  for name, leaf in named:
    if name not in tensors:
      raise ValueError(f'Checkpoint lacks tensor {name}.')
    entry = tensors[name]
    shape = tuple(entry['shape'])
    if shape != tuple(np.shape(leaf)):
      raise ValueError(f'Tensor {name} has shape {shape}, expected '
                       f'{tuple(np.shape(leaf))}.')
    dtype = np.dtype(entry['dtype'])
    if entry['offset'] + entry['nbytes'] > len(payload):
      raise ValueError(f'Tensor {name} extends past the payload.')
    array = np.frombuffer(payload, dtype=dtype, count=int(np.prod(shape)),
                          offset=entry['offset']).reshape(shape)
    leaves.append(jnp.asarray(array, dtype=leaf.dtype))
  return jax.tree_util.tree_unflatten(treedef, leaves)


def restore(path: str, opt_template=None) -> Checkpoint:
  """Restores a checkpoint.

  Args:
    path: checkpoint file.
    opt_template: optimizer state with the structure to restore into, usually
      optimizer.init(params). If None, optimizer state is not restored.

  Returns:
    The checkpoint contents.

  Raises:
    ValueError: if the manifest is malformed or does not match the payload.
      Nothing is constructed in that case.
  """
  logging.info('Loading checkpoint %s', path)
  manifest, payload = _read(path)
  config = networks.ModelConfig(**manifest['model'])
  tensors = {entry['name']: entry for entry in manifest['tensors']}
  params_template = jax.eval_shape(lambda: networks.init_model(config).params)
  params = _decode(params_template, 'params', tensors, payload)
  opt_state = None
  if opt_template is not None and any(
      name.startswith('opt_state') for name in tensors):
    opt_state = _decode(opt_template, 'opt_state', tensors, payload)
  vocab = None
  if manifest['vocab'] is not None:
    vocab = corpus.Vocab.from_dict(manifest['vocab'])
  return Checkpoint(
      state=networks.ModelState(config=config, params=params),
      step=manifest['step'],
      opt_state=opt_state,
      vocab=vocab,
      config=manifest['config'])


def load_checkpoint(path: str) -> networks.ModelState:
  """Loads only the model of a checkpoint."""
  return restore(path).state


def checkpoint_filename(save_path: str, step: int) -> str:
  return os.path.join(save_path, f'{PREFIX}{step:06d}{SUFFIX}')


def save(save_path: str, step: int, state: networks.ModelState, opt_state,
         vocab: Optional[corpus.Vocab],
         config: Optional[Mapping[str, Any]]) -> str:
  """Saves save_path/gem_ckpt_<step>.bin, step being completed steps."""
  return save_checkpoint(checkpoint_filename(save_path, step), state, step,
                         opt_state, vocab, config)


def find_last_checkpoint(ckpt_path: Optional[str] = None) -> Optional[str]:
  """Finds the most recent valid checkpoint in a directory.

  Args:
    ckpt_path: directory containing checkpoints.

  Returns:
    Last checkpoint (ordered by name) whose manifest parses and whose payload
    is complete, or None if there is none or ckpt_path is not given or does
    not exist.
  """
  if ckpt_path and os.path.isdir(ckpt_path):
    files = [f for f in os.listdir(ckpt_path)
             if f.startswith(PREFIX) and f.endswith(SUFFIX)]
    # Skip truncated or corrupt files left by an interrupted run.
    for file in sorted(files, reverse=True):
      fname = os.path.join(ckpt_path, file)
      try:
        _read(fname)
        return fname
      except (OSError, ValueError, KeyError):
        logging.info('Error loading checkpoint %s. Trying next checkpoint...',
                     fname)
  return None


def create_save_path(save_path: Optional[str]) -> str:
  """Creates the directory for saving checkpoints, if it doesn't exist.

  Args:
    save_path: directory to use. If false, create a directory in the working
      directory based upon the current time.

  Returns:
    Path to save checkpoints to.
  """
  timestamp = datetime.datetime.now().strftime('%Y_%m_%d_%H:%M:%S')
  default_save_path = os.path.join(os.getcwd(), f'gemlab_{timestamp}')
  ckpt_save_path = save_path or default_save_path
  if ckpt_save_path and not os.path.isdir(ckpt_save_path):
    os.makedirs(ckpt_save_path)
  return ckpt_save_path
