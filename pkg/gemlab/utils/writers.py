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

"""Writers for CSV and JSONL outputs with a configuration sidecar."""

import contextlib
import csv
import json
import os
from typing import Any, Mapping, Optional, Sequence

from absl import logging
import numpy as np

MANIFEST_SUFFIX = '.manifest.json'


def format_value(value: Any) -> str:
  """Formats a scalar reproducibly; floats use the shortest exact repr."""
  if hasattr(value, 'dtype') and np.ndim(value) == 0:
    value = np.asarray(value).item()
  if isinstance(value, (bool, np.bool_)):
    return str(bool(value))
  if isinstance(value, (int, np.integer)):
    return str(int(value))
  if isinstance(value, (float, np.floating)):
    return repr(float(value))
  return str(value)


def write_manifest(path: str, manifest: Mapping[str, Any]) -> str:
  """Writes manifest as <path>.manifest.json and returns its filename."""
  filename = path + MANIFEST_SUFFIX
  with open(filename, 'w', encoding='UTF-8') as f:
    json.dump(manifest, f, sort_keys=True, indent=2)
    f.write('\n')
  return filename


class Writer(contextlib.AbstractContextManager):
  """Write data to CSV, as well as logging data to stderr if desired.

  Values holding a comma, quote or newline are quoted as in RFC 4180.
  """

  def __init__(self,
               name: str,
               schema: Sequence[str],
               directory: str = 'logs/',
               iteration_key: Optional[str] = None,
               log: bool = False,
               append: bool = False,
               manifest: Optional[Mapping[str, Any]] = None):
    """Initialise Writer.

    Args:
      name: file name for CSV, without extension. A name ending in '.csv' is
        used as is.
      schema: sequence of keys, corresponding to each data item.
      directory: directory path to write file to.
      iteration_key: if not None or a null string, also include the iteration
        index as the first column in the CSV output with the given key.
      log: Also log each entry.
      append: continue an existing file instead of truncating it. The header
        is only written to a new or empty file.
      manifest: if given, written alongside the CSV as a JSON sidecar.
    """
    self._schema = schema
    if directory and not os.path.isdir(directory):
      os.makedirs(directory)
    if not name.endswith('.csv'):
      name += '.csv'
    self._filename = os.path.join(directory, name)
    self._iteration_key = iteration_key
    self._log = log
    self._append = append
    self._manifest = manifest

  @property
  def filename(self) -> str:
    return self._filename

  def __enter__(self):
    resume = (self._append and os.path.exists(self._filename) and
              os.path.getsize(self._filename) > 0)
    self._file = open(self._filename, 'a' if resume else 'w',
                      encoding='UTF-8', newline='')
    self._csv = csv.writer(self._file, lineterminator='\n')
    if not resume:
      header = list(self._schema)
      if self._iteration_key:
        header.insert(0, self._iteration_key)
      self._csv.writerow(header)
    if self._manifest is not None:
      write_manifest(self._filename, self._manifest)
    return self

  def write(self, t: int, **data):
    """Writes one row.

    Args:
      t: iteration index.
      **data: data items with keys as given in schema.
    """
    for key in data:
      if key not in self._schema:
        raise ValueError(f'Not a recognized key for writer: {key}')
    row = [format_value(data[key]) if key in data else ''
           for key in self._schema]
    if self._iteration_key:
      row.insert(0, str(t))
    self._csv.writerow(row)
    if self._log:
      logging.info('Iteration %s: %s', t, data)

  def __exit__(self, exc_type, exc_val, exc_tb):
    self._file.close()


class JsonlWriter(contextlib.AbstractContextManager):
  """Writes one JSON object per line, keys in insertion order."""

  def __init__(self, path: str,
               manifest: Optional[Mapping[str, Any]] = None):
    self._path = path
    self._manifest = manifest
    self.count = 0

  def __enter__(self):
    directory = os.path.dirname(self._path)
    if directory and not os.path.isdir(directory):
      os.makedirs(directory)
    self._file = open(self._path, 'w', encoding='UTF-8')
    if self._manifest is not None:
      write_manifest(self._path, self._manifest)
    return self

  def write(self, record: Mapping[str, Any]):
    self._file.write(json.dumps(record, ensure_ascii=False) + '\n')
    self.count += 1

  def __exit__(self, exc_type, exc_val, exc_tb):
    self._file.close()
