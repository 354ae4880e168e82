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

"""Tests for gemlab.batching."""

from absl.testing import absltest
from absl.testing import parameterized
from gemlab import batching
from gemlab import constants
from gemlab import corpus
from gemlab import masking
from gemlab import train
import numpy as np

EMB = constants.EMB_ID
Kind = masking.SequenceKind


def _documents(num_docs=30, min_len=5, max_len=40, seed=0):
  rng = np.random.default_rng(seed)
  docs = []
  for i in range(num_docs):
    words = rng.integers(0, 50, size=rng.integers(min_len, max_len + 1))
    docs.append(corpus.Document(
        id=f'd{i}', text=' '.join(f'w{w}' for w in words)))
  return docs


def _encoded(**kwargs):
  docs = _documents(**kwargs)
  return batching.EncodedCorpus(docs, corpus.build_vocab(docs, cap=64))


def _config(**kwargs):
  options = dict(p_raw=0.8, k_specials=2, batch_size=8, max_seq_len=32,
                 switch_step=10, total_steps=20, seed=0)
  options.update(kwargs)
  return train.TrainConfig(**options)


class InsertSpecialsTest(parameterized.TestCase):

  def test_compress(self):
    seq = batching.insert_specials([10, 11, 12], 1, 2, Kind.COMPRESS)
    np.testing.assert_array_equal(seq.tokens, [10, EMB, EMB, 11, 12])
    self.assertEqual(seq.segments, (1, 2, 2))
    self.assertEqual(seq.kind, Kind.COMPRESS)

  def test_compress_at_end(self):
    seq = batching.insert_specials([10, 11, 12], 3, 1, Kind.COMPRESS)
    np.testing.assert_array_equal(seq.tokens, [10, 11, 12, EMB])
    self.assertEqual(seq.segments, (3, 1, 0))

  def test_reconstruct(self):
    seq = batching.insert_specials([10, 11], 0, 1, Kind.RECONSTRUCT)
    np.testing.assert_array_equal(seq.tokens, [10, 11, EMB, 10, 11])
    self.assertEqual(seq.segments, (2, 1, 2))

  @parameterized.parameters(
      ([10, 11], 0, 1, Kind.COMPRESS),
      ([10, 11], 3, 1, Kind.COMPRESS),
      ([10, 11], 1, 0, Kind.COMPRESS),
      ([10, 11], 1, 1, Kind.PLAIN),
      ([], 0, 1, Kind.RECONSTRUCT),
  )
  def test_invalid(self, tokens, position, k, kind):
    with self.assertRaises(ValueError):
      batching.insert_specials(tokens, position, k, kind)


class DropoutPrefixTest(absltest.TestCase):

  def setUp(self):
    super().setUp()
    self.seq = batching.insert_specials(
        np.arange(10, 30), 20, 2, Kind.COMPRESS)

  def test_zero_rate_is_identity(self):
    twin = batching.dropout_prefix(self.seq, 0.0, np.random.default_rng(0))
    self.assertEqual(twin, self.seq)

  def test_keeps_order_specials_and_suffix(self):
    seq = batching.insert_specials(np.arange(10, 30), 12, 2, Kind.COMPRESS)
    twin = batching.dropout_prefix(seq, 0.5, np.random.default_rng(1))
    np.testing.assert_array_equal(twin.specials, [EMB, EMB])
    np.testing.assert_array_equal(twin.suffix, seq.suffix)
    self.assertTrue(np.all(np.diff(twin.prefix) > 0))
    self.assertTrue(set(twin.prefix) <= set(seq.prefix))

  def test_expected_kept_length(self):
    rng = np.random.default_rng(2)
    draws, rate = 10_000, 0.15
    kept = [batching.dropout_prefix(self.seq, rate, rng).m
            for _ in range(draws)]
    # Each of the 20 prefix tokens survives independently.
    std = np.sqrt(20 * rate * (1 - rate) / draws)
    self.assertAlmostEqual(np.mean(kept), 20 * (1 - rate), delta=3 * std)

  def test_never_empty(self):
    seq = batching.insert_specials([10, 11, 12], 3, 1, Kind.COMPRESS)
    rng = np.random.default_rng(3)
    for _ in range(200):
      self.assertGreaterEqual(batching.dropout_prefix(seq, 0.99, rng).m, 1)

  def test_reconstruct_twin(self):
    seq = batching.insert_specials(np.arange(10, 30), 0, 1, Kind.RECONSTRUCT)
    same = batching.dropout_prefix(seq, 0.0, np.random.default_rng(4))
    self.assertEqual(same.kind, Kind.RECONSTRUCT)
    shorter = batching.dropout_prefix(seq, 0.5, np.random.default_rng(4))
    self.assertEqual(shorter.kind, Kind.COMPRESS)
    np.testing.assert_array_equal(shorter.suffix, seq.suffix)

  def test_plain_rejected(self):
    with self.assertRaises(ValueError):
      batching.dropout_prefix(masking.plain_sequence([10, 11]), 0.1,
                              np.random.default_rng(0))

  def test_rate_range(self):
    with self.assertRaises(ValueError):
      batching.dropout_prefix(self.seq, 1.0, np.random.default_rng(0))


class EncodedCorpusTest(absltest.TestCase):

  def test_skips_short_documents(self):
    docs = [corpus.Document(id='a', text='one'),
            corpus.Document(id='b', text='one two three')]
    encoded = batching.EncodedCorpus(docs, corpus.build_vocab(docs))
    self.assertEqual(encoded.doc_ids, ['b'])
    self.assertLen(encoded, 1)

  def test_all_short(self):
    docs = [corpus.Document(id='a', text='one')]
    with self.assertRaises(ValueError):
      batching.EncodedCorpus(docs, corpus.build_vocab(docs))

  def test_epoch_visits_every_document(self):
    encoded = _encoded(num_docs=12)
    indices = np.concatenate(
        [encoded.batch_indices(step, 4, seed=3) for step in range(3)])
    self.assertCountEqual(indices, range(12))
    np.testing.assert_array_equal(encoded.batch_indices(1, 4, seed=3),
                                  indices[4:8])

  def test_batches_span_epochs(self):
    encoded = _encoded(num_docs=5)
    indices = encoded.batch_indices(1, 4, seed=0)
    first_epoch = np.random.default_rng([0, 0]).permutation(5)
    second_epoch = np.random.default_rng([0, 1]).permutation(5)
    np.testing.assert_array_equal(indices, [first_epoch[4], *second_epoch[:3]])


class ComposeBatchTest(parameterized.TestCase):

  def setUp(self):
    super().setUp()
    self.corpus = _encoded()

  def _batch(self, config, step=0, seed=0):
    return batching.compose_batch(self.corpus, None, config,
                                  np.random.default_rng(seed), step)

  def test_all_plain(self):
    batch = self._batch(_config(p_raw=1.0))
    self.assertEqual(batch.segmented_fraction, 0.0)
    for example, partner in zip(batch.examples, batch.partners):
      self.assertEqual(example.kind, Kind.PLAIN)
      self.assertNotIn(EMB, example.tokens)
      self.assertIsNone(partner)

  def test_all_segmented(self):
    batch = self._batch(_config(p_raw=0.0))
    self.assertEqual(batch.segmented_fraction, 1.0)
    for example, partner in batch.pairs:
      self.assertEqual(example.k, 2)
      self.assertEqual(partner.k, 2)
      np.testing.assert_array_equal(partner.suffix, example.suffix)

  def test_mix_fraction(self):
    config = _config(p_raw=0.8, batch_size=20, contrastive=False)
    rng = np.random.default_rng(5)
    fractions = [
        batching.compose_batch(self.corpus, None, config, rng,
                               step).segmented_fraction
        for step in range(1000)]
    self.assertAlmostEqual(np.mean(fractions), 0.2, delta=0.02)

  def test_contrastive_phase_is_segmented(self):
    config = _config(p_raw=1.0, switch_step=5)
    self.assertEqual(self._batch(config, step=4).segmented_fraction, 0.0)
    self.assertEqual(self._batch(config, step=5).segmented_fraction, 1.0)

  def test_no_contrastive_phase(self):
    config = _config(p_raw=1.0, switch_step=5, contrastive=False)
    self.assertEqual(self._batch(config, step=7).segmented_fraction, 0.0)

  @parameterized.parameters(0.0, 0.5, 1.0)
  def test_length_bound(self, share):
    config = _config(p_raw=0.3, max_seq_len=16, k_specials=3,
                     reconstruct_share=share)
    for step in range(20):
      batch = self._batch(config, step=step, seed=step)
      for seq in batch.examples + tuple(p for p in batch.partners if p):
        self.assertLessEqual(len(seq), 16)

  def test_reconstruct_only(self):
    batch = self._batch(_config(p_raw=0.0, reconstruct_share=1.0))
    for example, _ in batch.pairs:
      self.assertEqual(example.kind, Kind.RECONSTRUCT)
      np.testing.assert_array_equal(example.prefix, example.suffix)

  def test_deterministic(self):
    a = self._batch(_config(), step=3, seed=9)
    b = self._batch(_config(), step=3, seed=9)
    self.assertEqual(a.examples, b.examples)
    self.assertEqual(a.partners, b.partners)

  def test_documents_need_vocab(self):
    with self.assertRaises(ValueError):
      batching.compose_batch(_documents(), None, _config(),
                             np.random.default_rng(0), 0)


class TrainingBatchTest(absltest.TestCase):

  def test_partner_alignment(self):
    plain = masking.plain_sequence([10, 11])
    with self.assertRaises(ValueError):
      batching.TrainingBatch(examples=(plain,), partners=(plain,))
    with self.assertRaises(ValueError):
      batching.TrainingBatch(examples=(plain,), partners=())


class PaddingTest(absltest.TestCase):

  def test_bucket_length(self):
    self.assertEqual(batching.bucket_length(5, 512), 16)
    self.assertEqual(batching.bucket_length(16, 512), 16)
    self.assertEqual(batching.bucket_length(17, 512), 32)
    self.assertEqual(batching.bucket_length(100, 64 + 40), 104)
    with self.assertRaises(ValueError):
      batching.bucket_length(65, 64)

  def test_pad_sequence(self):
    seq = batching.insert_specials([10, 11, 12], 2, 1, Kind.COMPRESS)
    arrays = batching.pad_sequence(seq, 6)
    np.testing.assert_array_equal(arrays.tokens, [10, 11, EMB, 12, 0, 0])
    np.testing.assert_array_equal(arrays.allowed[:4, :4],
                                  masking.build_gem_mask(2, 1, 1))
    np.testing.assert_array_equal(arrays.allowed[4:], np.eye(6, dtype=bool)[4:])
    self.assertFalse(arrays.allowed[:4, 4:].any())
    np.testing.assert_array_equal(arrays.loss_mask,
                                  [True, False, True, False, False])
    np.testing.assert_array_equal(arrays.positions, np.arange(6))
    np.testing.assert_array_equal(arrays.special_positions, [2])

  def test_plain_special_positions(self):
    arrays = batching.pad_sequence(masking.plain_sequence([10, 11]), 4,
                                   num_specials=2)
    np.testing.assert_array_equal(arrays.special_positions, [0, 0])

  def test_too_long(self):
    with self.assertRaises(ValueError):
      batching.pad_sequence(masking.plain_sequence([10, 11, 12]), 2)

  def test_stack(self):
    seqs = [masking.plain_sequence([10, 11]),
            batching.insert_specials([10, 11], 1, 2, Kind.COMPRESS)]
    arrays = batching.stack_sequences(seqs, 8, num_specials=2)
    self.assertEqual(arrays.tokens.shape, (2, 8))
    self.assertEqual(arrays.allowed.shape, (2, 8, 8))
    self.assertEqual(arrays.loss_mask.shape, (2, 7))
    np.testing.assert_array_equal(arrays.special_positions, [[0, 0], [1, 2]])

  def test_contrastive_arrays_need_two_pairs(self):
    seq = batching.insert_specials([10, 11], 1, 1, Kind.COMPRESS)
    batch = batching.TrainingBatch(
        examples=(seq, masking.plain_sequence([10, 11])),
        partners=(seq, None))
    with self.assertRaises(ValueError):
      batching.contrastive_arrays(batch, 8, 1)


if __name__ == '__main__':
  absltest.main()
