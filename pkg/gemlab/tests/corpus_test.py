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

"""Tests for gemlab.corpus."""

import json
import os

from absl.testing import absltest
from absl.testing import parameterized
from gemlab import constants
from gemlab import corpus
import numpy as np


def _docs(*texts):
  return [corpus.Document(id=str(i), text=t) for i, t in enumerate(texts)]


class LoadCorpusTest(parameterized.TestCase):

  def _write(self, content):
    path = os.path.join(self.create_tempdir().full_path, 'docs.txt')
    with open(path, 'w', encoding='utf-8') as f:
      f.write(content)
    return path

  def test_plain_text_skips_blank_lines(self):
    docs = corpus.load_corpus(self._write('a b\n\nc\n'))
    self.assertEqual([d.id for d in docs], ['line-1', 'line-3'])
    self.assertEqual([d.text for d in docs], ['a b', 'c'])

  def test_jsonl(self):
    docs = corpus.load_corpus(self._write(
        '{"text": "hello world"}\n{"id": "x", "text": "bye"}\n'))
    self.assertEqual(docs[0], corpus.Document(id='line-1', text='hello world'))
    self.assertEqual(docs[1].id, 'x')

  def test_malformed_jsonl_names_line(self):
    path = self._write('{"text": "ok"}\n{not json\n')
    with self.assertRaisesRegex(ValueError, 'line 2'):
      corpus.load_corpus(path)

  @parameterized.parameters(
      '{"text": "ok"}\n{"text": 7}\n',
      '{"text": "ok"}\n{"text": null}\n',
      '{"text": "ok"}\n{"id": 3, "text": "bye"}\n',
  )
  def test_non_string_field_names_line(self, content):
    with self.assertRaisesRegex(ValueError, 'line 2 must hold string'):
      corpus.load_corpus(self._write(content))

  def test_missing_file(self):
    with self.assertRaises(OSError):
      corpus.load_corpus('/nonexistent/gemlab/docs.txt')

  def test_blank_document_rejected(self):
    with self.assertRaises(ValueError):
      corpus.Document(id='a', text='   ')


class VocabTest(parameterized.TestCase):

  def test_frequency_order(self):
    vocab = corpus.build_vocab(_docs('a a b'), cap=7)
    self.assertEqual(vocab.tokens[:5], constants.RESERVED_TOKENS)
    self.assertEqual(vocab.token_to_id['a'], 5)
    self.assertEqual(vocab.token_to_id['b'], 6)

  def test_cap(self):
    vocab = corpus.build_vocab(_docs('x y', 'y'), cap=6)
    self.assertIn('y', vocab.token_to_id)
    self.assertNotIn('x', vocab.token_to_id)
    self.assertLen(vocab, 6)

  def test_lexicographic_tie_break(self):
    vocab = corpus.build_vocab(_docs('b a'), cap=7)
    self.assertEqual(vocab.token_to_id['a'], 5)
    self.assertEqual(vocab.token_to_id['b'], 6)

  def test_reserved_words_not_added(self):
    vocab = corpus.build_vocab(_docs('<emb> word'), cap=10)
    self.assertEqual(vocab.tokens, constants.RESERVED_TOKENS + ('word',))

  @parameterized.parameters(0, 5)
  def test_cap_too_small(self, cap):
    with self.assertRaises(ValueError):
      corpus.build_vocab(_docs('a'), cap=cap)

  def test_empty_corpus(self):
    with self.assertRaises(ValueError):
      corpus.build_vocab([], cap=10)

  def test_serialization_is_deterministic(self):
    docs = _docs('the cat sat', 'the dog sat down')
    first = corpus.build_vocab(docs, cap=20).to_json()
    second = corpus.build_vocab(docs, cap=20).to_json()
    self.assertEqual(first, second)
    self.assertEqual(json.loads(first)['cap'], 20)

  def test_save_and_load(self):
    vocab = corpus.build_vocab(_docs('a b c'), cap=10)
    path = os.path.join(self.create_tempdir().full_path, 'vocab.json')
    vocab.save(path)
    self.assertEqual(corpus.Vocab.load(path), vocab)

  def test_rejects_bad_prefix(self):
    with self.assertRaises(ValueError):
      corpus.Vocab(cap=10, tokens=('a', 'b'))


class EncodeDecodeTest(absltest.TestCase):

  def setUp(self):
    super().setUp()
    self.vocab = corpus.build_vocab(_docs('a a b'), cap=7)

  def test_encode(self):
    np.testing.assert_array_equal(corpus.encode(self.vocab, 'a b'), [5, 6])

  def test_unknown_word(self):
    np.testing.assert_array_equal(corpus.encode(self.vocab, 'zzz'),
                                  [constants.UNK_ID])

  def test_reserved_spelling_maps_to_unk(self):
    np.testing.assert_array_equal(corpus.encode(self.vocab, '<emb> a'),
                                  [constants.UNK_ID, 5])

  def test_decode_renders_reserved(self):
    self.assertEqual(corpus.decode(self.vocab, [5, 4, 6]), 'a <emb> b')

  def test_round_trip_normalizes(self):
    ids = corpus.encode(self.vocab, '  A   b ')
    self.assertEqual(corpus.decode(self.vocab, ids), 'a b')

  def test_decode_out_of_range(self):
    with self.assertRaises(ValueError):
      corpus.decode(self.vocab, [7])

  def test_lenient_decode(self):
    self.assertEqual(corpus.decode(self.vocab, [5, 7], lenient=True),
                     'a <unk>')
    with self.assertRaises(ValueError):
      corpus.decode(self.vocab, [-1], lenient=True)


if __name__ == '__main__':
  absltest.main()
