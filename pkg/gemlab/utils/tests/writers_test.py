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

"""Tests for gemlab.utils.writers."""

import json
import os

from absl.testing import absltest
from absl.testing import parameterized
from gemlab.utils import writers
import numpy as np
import pandas as pd


class FormatValueTest(parameterized.TestCase):

  @parameterized.parameters(
      (0.1, '0.1'),
      (np.float32(0.5), '0.5'),
      (np.asarray(2.0), '2.0'),
      (3, '3'),
      (np.int32(4), '4'),
      (True, 'True'),
      ('mean', 'mean'),
  )
  def test_format(self, value, expected):
    self.assertEqual(writers.format_value(value), expected)

  def test_float_round_trip(self):
    value = 1 / 3
    self.assertEqual(float(writers.format_value(value)), value)


class WriterTest(absltest.TestCase):

  def setUp(self):
    super().setUp()
    self.directory = self.create_tempdir().full_path

  def _lines(self, writer):
    with open(writer.filename) as f:
      return f.read().splitlines()

  def test_rows(self):
    writer = writers.Writer('stats', ('step', 'loss'), directory=self.directory)
    with writer:
      writer.write(0, step=0, loss=1.5)
      writer.write(1, step=1)
    self.assertEqual(self._lines(writer), ['step,loss', '0,1.5', '1,'])
    self.assertEqual(writer.filename, os.path.join(self.directory,
                                                   'stats.csv'))

  def test_iteration_key(self):
    writer = writers.Writer('stats.csv', ('loss',), directory=self.directory,
                            iteration_key='t')
    with writer:
      writer.write(7, loss=2.0)
    self.assertEqual(self._lines(writer), ['t,loss', '7,2.0'])

  def test_quotes_delimiters(self):
    writer = writers.Writer('results', ('variant', 'value'),
                            directory=self.directory)
    names = ['p=0.8,k=2', 'say "hi"', 'two\nlines']
    with writer:
      for i, name in enumerate(names):
        writer.write(i, variant=name, value=i)
    self.assertEqual(self._lines(writer)[:3],
                     ['variant,value', '"p=0.8,k=2",0', '"say ""hi""",1'])
    df = pd.read_csv(writer.filename)
    self.assertEqual(list(df.variant), names)
    self.assertEqual(list(df.value), [0, 1, 2])

  def test_unknown_key(self):
    with writers.Writer('stats', ('loss',),
                        directory=self.directory) as writer:
      with self.assertRaises(ValueError):
        writer.write(0, accuracy=1.0)

  def test_append(self):
    with writers.Writer('stats', ('loss',), directory=self.directory) as w:
      w.write(0, loss=1.0)
    with writers.Writer('stats', ('loss',), directory=self.directory,
                        append=True) as w:
      w.write(1, loss=2.0)
    self.assertEqual(self._lines(w), ['loss', '1.0', '2.0'])

  def test_truncates_without_append(self):
    for loss in (1.0, 2.0):
      with writers.Writer('stats', ('loss',), directory=self.directory) as w:
        w.write(0, loss=loss)
    self.assertEqual(self._lines(w), ['loss', '2.0'])

  def test_manifest(self):
    with writers.Writer('stats', ('loss',), directory=self.directory,
                        manifest={'seed': 1, 'k': 2}) as w:
      w.write(0, loss=1.0)
    with open(w.filename + writers.MANIFEST_SUFFIX) as f:
      self.assertEqual(json.load(f), {'k': 2, 'seed': 1})

  def test_creates_directory(self):
    directory = os.path.join(self.directory, 'a', 'b')
    with writers.Writer('stats', ('loss',), directory=directory):
      pass
    self.assertTrue(os.path.isdir(directory))


class JsonlWriterTest(absltest.TestCase):

  def test_rows(self):
    path = os.path.join(self.create_tempdir().full_path, 'out', 'rows.jsonl')
    with writers.JsonlWriter(path, manifest={'command': 'embed'}) as writer:
      writer.write({'id': 'b', 'dim': 2})
      writer.write({'id': 'a', 'dim': 2})
    self.assertEqual(writer.count, 2)
    with open(path) as f:
      self.assertEqual(f.read(), '{"id": "b", "dim": 2}\n{"id": "a", "dim": 2}\n')
    self.assertTrue(os.path.exists(path + writers.MANIFEST_SUFFIX))


if __name__ == '__main__':
  absltest.main()
