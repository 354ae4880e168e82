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

"""Tests for gemlab.loss."""

from absl.testing import absltest
from absl.testing import parameterized
from gemlab import batching
from gemlab import constants
from gemlab import loss
from gemlab import masking
from gemlab import networks
from gemlab import train
import jax
import jax.numpy as jnp
import numpy as np
import optax


def _log_softmax(x, axis):
  x = x - x.max(axis=axis, keepdims=True)
  return x - np.log(np.exp(x).sum(axis=axis, keepdims=True))


def _brute_force_infonce(q, d, temperature):
  qn = q / np.linalg.norm(q, axis=1, keepdims=True)
  dn = d / np.linalg.norm(d, axis=1, keepdims=True)
  total = 0.0
  for i in range(len(q)):
    scores = temperature * np.array([qn[i] @ dn[j] for j in range(len(d))])
    total -= scores[i] - np.log(np.sum(np.exp(scores)))
  return total / len(q)


class NextTokenLossTest(absltest.TestCase):

  def test_uniform_logits(self):
    logits = jnp.zeros((5, 8))
    targets = jnp.arange(5)
    mask = jnp.ones(5, dtype=bool)
    np.testing.assert_allclose(loss.ntp_loss(logits, targets, mask), np.log(8),
                               rtol=1E-6)

  def test_mask_selects_positions(self):
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(6, 10)).astype(np.float32)
    targets = rng.integers(0, 10, size=6)
    mask = np.array([True, False, True, False, True, False])
    ce = -_log_softmax(logits, axis=-1)[np.arange(6), targets]
    np.testing.assert_allclose(
        loss.ntp_loss(jnp.asarray(logits), jnp.asarray(targets), mask),
        ce[mask].mean(), rtol=1E-5)

  def test_batch_mean_over_positions(self):
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(2, 4, 7)).astype(np.float32)
    targets = rng.integers(0, 7, size=(2, 4))
    mask = np.array([[True, True, True, True], [True, False, False, False]])
    ce = -np.take_along_axis(_log_softmax(logits, axis=-1),
                             targets[..., None], axis=-1)[..., 0]
    np.testing.assert_allclose(
        loss.ntp_loss(jnp.asarray(logits), jnp.asarray(targets), mask),
        ce[mask].mean(), rtol=1E-5)

  def test_empty_mask(self):
    with self.assertRaises(ValueError):
      loss.ntp_loss(jnp.zeros((3, 4)), jnp.zeros(3, dtype=int),
                    np.zeros(3, dtype=bool))

  def test_shape_mismatch(self):
    with self.assertRaises(ValueError):
      loss.ntp_loss(jnp.zeros((3, 4)), jnp.zeros(2, dtype=int),
                    np.ones(3, dtype=bool))


class ContrastiveLossTest(parameterized.TestCase):

  def test_identical_similarities(self):
    q = np.ones((4, 3), dtype=np.float32)
    np.testing.assert_allclose(
        loss.contrastive_loss(q, q, constants.TEMPERATURE_INIT), np.log(4),
        rtol=1E-6)

  def test_zero_temperature(self):
    rng = np.random.default_rng(2)
    q = rng.normal(size=(5, 6)).astype(np.float32)
    d = rng.normal(size=(5, 6)).astype(np.float32)
    np.testing.assert_allclose(loss.contrastive_loss(q, d, 0.0), np.log(5),
                               rtol=1E-6)

  @parameterized.parameters(0.5, 3.0, np.log(20.0))
  def test_matches_brute_force(self, temperature):
    rng = np.random.default_rng(3)
    q = rng.normal(size=(6, 8))
    d = rng.normal(size=(6, 8))
    np.testing.assert_allclose(
        loss.contrastive_loss(jnp.asarray(q, jnp.float32),
                              jnp.asarray(d, jnp.float32), temperature),
        _brute_force_infonce(q, d, temperature), rtol=1E-5)

  def test_scale_invariant(self):
    rng = np.random.default_rng(4)
    q = rng.normal(size=(4, 5)).astype(np.float32)
    d = rng.normal(size=(4, 5)).astype(np.float32)
    np.testing.assert_allclose(loss.contrastive_loss(3.0 * q, 0.5 * d, 2.0),
                               loss.contrastive_loss(q, d, 2.0), rtol=1E-5)

  def test_symmetric(self):
    rng = np.random.default_rng(5)
    q = rng.normal(size=(4, 5))
    d = rng.normal(size=(4, 5))
    expected = 0.5 * (_brute_force_infonce(q, d, 2.0) +
                      _brute_force_infonce(d, q, 2.0))
    np.testing.assert_allclose(
        loss.contrastive_loss(jnp.asarray(q, jnp.float32),
                              jnp.asarray(d, jnp.float32), 2.0,
                              symmetric=True), expected, rtol=1E-5)

  def test_aligned_pairs_lower_loss(self):
    rng = np.random.default_rng(6)
    q = rng.normal(size=(8, 16)).astype(np.float32)
    aligned = loss.contrastive_loss(q, q, 5.0)
    shuffled = loss.contrastive_loss(q, np.roll(q, 1, axis=0), 5.0)
    self.assertLess(float(aligned), float(shuffled))

  def test_single_pair(self):
    with self.assertRaises(ValueError):
      loss.contrastive_loss(np.ones((1, 3)), np.ones((1, 3)), 1.0)

  def test_shape_mismatch(self):
    with self.assertRaises(ValueError):
      loss.contrastive_loss(np.ones((2, 3)), np.ones((3, 3)), 1.0)

  def test_zero_norm(self):
    q = np.ones((2, 3))
    q[1] = 0.0
    with self.assertRaisesRegex(ValueError, 'Zero-norm'):
      loss.contrastive_loss(q, np.ones((2, 3)), 1.0)


class ScheduleTest(absltest.TestCase):

  def test_combined(self):
    breakdown = loss.combined_loss(2.0, 4.0, 0.25)
    self.assertAlmostEqual(breakdown.total, 2.5)
    self.assertEqual(breakdown.alpha, 0.25)

  def test_combined_alpha_range(self):
    with self.assertRaises(ValueError):
      loss.combined_loss(1.0, 1.0, 1.5)

  def test_alpha_schedule(self):
    self.assertEqual(loss.alpha_schedule(0), 0.0)
    self.assertEqual(loss.alpha_schedule(99), 0.0)
    self.assertEqual(loss.alpha_schedule(100), 1.0)
    self.assertEqual(loss.alpha_schedule(5, switch_step=5), 1.0)
    self.assertEqual(loss.alpha_schedule(3, switch_step=0), 1.0)

  def test_clamp_temperature(self):
    self.assertEqual(float(loss.clamp_temperature(-1.0)), 0.0)
    self.assertAlmostEqual(float(loss.clamp_temperature(10.0)), np.log(100.0),
                           places=6)
    self.assertAlmostEqual(float(loss.clamp_temperature(2.0)), 2.0)


class TemperatureClampTest(absltest.TestCase):

  def test_stays_in_range_under_large_updates(self):
    config = networks.ModelConfig(n_layers=1, n_heads=2, d_model=8, d_ff=16,
                                  vocab_size=32, max_positions=16,
                                  dropout_rate=0.0, seed=0)
    state = networks.init_model(config)
    rng = np.random.default_rng(0)
    examples = [batching.insert_specials(
        rng.integers(constants.NUM_RESERVED, 32, size=8), 4, 1,
        masking.SequenceKind.COMPRESS) for _ in range(4)]
    partners = [batching.dropout_prefix(seq, 0.5, rng) for seq in examples]
    data = batching.ContrastiveArrays(
        examples=batching.stack_sequences(examples, 16, 1),
        partners=batching.stack_sequences(partners, 16, 1))
    contrastive = loss.make_contrastive_loss(config)
    optimizer = optax.identity()
    for push, bound in ((-100.0, constants.TEMPERATURE_MAX),
                        (100.0, constants.TEMPERATURE_MIN)):

      def objective(params, key, data, push=push):
        value, breakdown = contrastive(params, key, data)
        return value + push * params['temperature'], breakdown

      update = train.make_update(objective, optimizer)
      params = state.params
      opt_state = optimizer.init(params)
      temperatures = []
      for _ in range(1000):
        params, opt_state, _, _ = update(params, opt_state, None, data,
                                         jnp.asarray(0.1, jnp.float32))
        temperatures.append(float(params['temperature']))
      temperatures = np.asarray(temperatures)
      self.assertTrue(np.all(np.isfinite(temperatures)))
      self.assertGreaterEqual(temperatures.min(), constants.TEMPERATURE_MIN)
      # Allows for float32 rounding of log 100.
      self.assertLessEqual(temperatures.max(), constants.TEMPERATURE_MAX + 1E-6)
      np.testing.assert_allclose(temperatures, bound, atol=1E-6)


class BatchLossTest(absltest.TestCase):

  def setUp(self):
    super().setUp()
    self.config = networks.ModelConfig(
        n_layers=2, n_heads=2, d_model=16, d_ff=32, vocab_size=32,
        max_positions=32, dropout_rate=0.0, seed=3)
    self.state = networks.init_model(self.config)
    rng = np.random.default_rng(7)
    self.seqs = []
    for m, n in ((3, 4), (5, 2), (2, 6)):
      tokens = rng.integers(constants.NUM_RESERVED, 32, size=m + n)
      self.seqs.append(batching.insert_specials(
          tokens, m, 2, masking.SequenceKind.COMPRESS))
    self.seqs.append(masking.plain_sequence(rng.integers(5, 32, size=9)))

  def test_ntp_matches_per_sequence_forward(self):
    data = batching.stack_sequences(self.seqs, 16, num_specials=2)
    value, breakdown = loss.make_ntp_loss(self.config)(
        self.state.params, None, data)
    losses = []
    for seq in self.seqs:
      _, logits = networks.forward(self.state, seq.tokens,
                                   masking.build_gem_mask(*seq.segments),
                                   np.arange(len(seq)))
      ce = -_log_softmax(np.asarray(logits[:-1], np.float64), axis=-1)[
          np.arange(len(seq) - 1), seq.tokens[1:]]
      losses.append(ce[masking.build_loss_mask(seq)])
    np.testing.assert_allclose(value, np.concatenate(losses).mean(),
                               rtol=1E-5)
    self.assertEqual(float(breakdown.alpha), 0.0)
    self.assertEqual(float(breakdown.cl), 0.0)

  def test_contrastive_matches_special_hidden_states(self):
    examples = self.seqs[:3]
    partners = [batching.dropout_prefix(s, 0.5, np.random.default_rng(i))
                for i, s in enumerate(examples)]
    data = batching.ContrastiveArrays(
        examples=batching.stack_sequences(examples, 16, 2),
        partners=batching.stack_sequences(partners, 16, 2))
    value, breakdown = loss.make_contrastive_loss(self.config)(
        self.state.params, None, data)

    def embed(seq):
      hidden, _ = networks.forward(self.state, seq.tokens,
                                   masking.build_gem_mask(*seq.segments),
                                   np.arange(len(seq)))
      return np.asarray(hidden)[seq.special_positions].mean(axis=0)

    q = np.stack([embed(s) for s in examples])
    d = np.stack([embed(s) for s in partners])
    np.testing.assert_allclose(
        value, _brute_force_infonce(q, d, self.state.temperature), rtol=1E-4)
    self.assertEqual(float(breakdown.alpha), 1.0)
    self.assertEqual(float(breakdown.ntp), 0.0)

  def test_padding_does_not_change_loss(self):
    fn = loss.make_ntp_loss(self.config)
    short, _ = fn(self.state.params, None,
                  batching.stack_sequences(self.seqs, 16, 2))
    long, _ = fn(self.state.params, None,
                 batching.stack_sequences(self.seqs, 24, 2))
    np.testing.assert_allclose(short, long, rtol=1E-5)

  def test_dropout_key_changes_loss(self):
    config = networks.ModelConfig(
        n_layers=2, n_heads=2, d_model=16, d_ff=32, vocab_size=32,
        max_positions=32, dropout_rate=0.3, seed=3)
    data = batching.stack_sequences(self.seqs, 16, 2)
    fn = loss.make_ntp_loss(config)
    eval_loss, _ = fn(self.state.params, None, data)
    train_loss, _ = fn(self.state.params, jax.random.PRNGKey(0), data)
    self.assertNotAlmostEqual(float(eval_loss), float(train_loss), places=5)


if __name__ == '__main__':
  absltest.main()
