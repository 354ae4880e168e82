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

"""Two-phase training: mixed next-token prediction, then contrastive."""

import functools
import math
import os
from typing import Any, Mapping, Tuple

from absl import logging
import attr
import chex
from gemlab import base_config
from gemlab import batching
from gemlab import checkpoint
from gemlab import constants
from gemlab import corpus
from gemlab import embedder
from gemlab import loss as gem_loss
from gemlab import networks
from gemlab.utils import analysis_tools
from gemlab.utils import statistics
from gemlab.utils import writers
import jax
import jax.numpy as jnp
import ml_collections
import numpy as np
import optax

STATS_NAME = 'train_stats'
STATS_SCHEMA = ('step', 'lr', 'alpha', 'loss_ntp', 'loss_cl', 'loss_total')


def _probability(instance, attribute, value):
  del instance  # unused
  if not 0.0 <= value <= 1.0:
    raise ValueError(f'{attribute.name} must lie in [0, 1], got {value}.')


def _positive(instance, attribute, value):
  del instance  # unused
  if value <= 0:
    raise ValueError(f'{attribute.name} must be positive, got {value}.')


@attr.s(auto_attribs=True, frozen=True, kw_only=True)
class TrainConfig:
  """Batch composition and optimisation settings.

  Attributes:
    p_raw: probability that a batch slot holds plain text.
    k_specials: number of special tokens inserted into segmented examples.
    batch_size: examples per step.
    max_seq_len: length every sequence is padded to; no example is longer.
    lr_ntp: base learning rate of the next-token phase.
    lr_cl: base learning rate of the contrastive phase.
    switch_step: first step of the contrastive phase.
    total_steps: number of training steps.
    dropout_rate_prefix: deletion rate used to build positive partners.
    reconstruct_share: share of segmented examples that are reconstructions.
    seed: seed of batch composition and dropout.
    contrastive: whether to switch to the contrastive loss at switch_step.
    symmetric_contrastive: average both directions of the contrastive loss.
    pooling: aggregation of special-token states, 'mean' or 'concat'.
    grad_clip: maximum global gradient norm.
    adam_b1: Adam first-moment decay.
    adam_b2: Adam second-moment decay.
    adam_eps: Adam epsilon.
  """
  p_raw: float = attr.ib(default=0.8, validator=_probability)
  k_specials: int = attr.ib(default=1, validator=_positive)
  batch_size: int = attr.ib(default=32, validator=_positive)
  max_seq_len: int = 128
  lr_ntp: float = attr.ib(default=1.e-4, validator=_positive)
  lr_cl: float = attr.ib(default=1.e-5, validator=_positive)
  switch_step: int = 100
  total_steps: int = attr.ib(default=1000, validator=_positive)
  dropout_rate_prefix: float = 0.15
  reconstruct_share: float = attr.ib(default=0.5, validator=_probability)
  seed: int = constants.DEFAULT_SEED
  contrastive: bool = True
  symmetric_contrastive: bool = False
  pooling: str = attr.ib(
      default='mean', validator=attr.validators.in_(embedder.POOLINGS))
  grad_clip: float = attr.ib(default=1.0, validator=_positive)
  adam_b1: float = 0.9
  adam_b2: float = 0.999
  adam_eps: float = 1.e-8

  def __attrs_post_init__(self):
    if not self.k_specials + 2 <= self.max_seq_len <= constants.MAX_SEQ_LEN_CAP:
      raise ValueError(
          f'max_seq_len must lie in [{self.k_specials + 2}, '
          f'{constants.MAX_SEQ_LEN_CAP}], got {self.max_seq_len}.')
    if not 0.0 <= self.dropout_rate_prefix < 1.0:
      raise ValueError('dropout_rate_prefix must lie in [0, 1), got '
                       f'{self.dropout_rate_prefix}.')
    if self.switch_step < 0:
      raise ValueError(f'switch_step must be >= 0, got {self.switch_step}.')
    if self.has_contrastive_phase and self.batch_size < 2:
      raise ValueError('The contrastive phase needs batch_size >= 2.')

  @property
  def has_contrastive_phase(self) -> bool:
    return self.contrastive and self.switch_step < self.total_steps

  @classmethod
  def from_config(cls, cfg: ml_collections.ConfigDict) -> 'TrainConfig':
    fields = attr.fields_dict(cls)
    return cls(**{key: cfg[key] for key in fields if key in cfg})


def cosine_lr(step: int, base_lr: float, total_steps: int) -> float:
  """Cosine decay from base_lr at step 0 to 0 at total_steps.

  Raises:
    ValueError: if step lies outside [0, total_steps].
  """
  if not 0 <= step <= total_steps:
    raise ValueError(f'step {step} outside [0, {total_steps}].')
  return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def phase_alpha(step: int, config: TrainConfig) -> float:
  """Contrastive weight at step; always 0 without a contrastive phase."""
  if not config.contrastive:
    return 0.0
  return gem_loss.alpha_schedule(step, config.switch_step)


def learning_rate(step: int, config: TrainConfig) -> float:
  base_lr = config.lr_cl if phase_alpha(step, config) else config.lr_ntp
  return cosine_lr(step, base_lr, config.total_steps)


def make_optimizer(config: TrainConfig) -> optax.GradientTransformation:
  """Clipped Adam; the learning rate is applied by the update step."""
  return optax.chain(
      optax.clip_by_global_norm(config.grad_clip),
      optax.scale_by_adam(
          b1=config.adam_b1, b2=config.adam_b2, eps=config.adam_eps))


@attr.s(auto_attribs=True)
class TrainingState:
  """The model being trained and its optimizer state."""
  model: networks.ModelState
  opt_state: optax.OptState


def make_update(evaluate_loss: gem_loss.LossFn,
                optimizer: optax.GradientTransformation):
  """Returns a jitted (params, opt_state, key, data, lr) update.

  The temperature is clamped after every update.
  """

  @jax.jit
  def update(params, opt_state, key, data, lr):
    loss_and_grad = jax.value_and_grad(evaluate_loss, argnums=0, has_aux=True)
    (loss, breakdown), grad = loss_and_grad(params, key, data)
    updates, opt_state = optimizer.update(grad, opt_state, params)
    updates = jax.tree_util.tree_map(lambda u: -lr * u, updates)
    params = optax.apply_updates(params, updates)
    params['temperature'] = gem_loss.clamp_temperature(params['temperature'])
    return params, opt_state, loss, breakdown

  return update


@attr.s(auto_attribs=True, frozen=True)
class _Updates:
  optimizer: optax.GradientTransformation
  ntp: Any
  contrastive: Any


@functools.lru_cache(maxsize=8)
def _updates(model_config: networks.ModelConfig,
             config: TrainConfig) -> _Updates:
  optimizer = make_optimizer(config)
  return _Updates(
      optimizer=optimizer,
      ntp=make_update(gem_loss.make_ntp_loss(model_config), optimizer),
      contrastive=make_update(
          gem_loss.make_contrastive_loss(
              model_config, config.pooling, config.symmetric_contrastive),
          optimizer))


def init_training_state(model: networks.ModelState,
                        config: TrainConfig) -> TrainingState:
  return TrainingState(
      model=model, opt_state=make_optimizer(config).init(model.params))


def dropout_key(seed: int, step: int) -> chex.PRNGKey:
  return jax.random.fold_in(jax.random.PRNGKey(seed), step)


def train_step(
    state: TrainingState,
    batch: batching.TrainingBatch,
    config: TrainConfig,
    step: int,
) -> Tuple[TrainingState, gem_loss.LossBreakdown]:
  """Applies one optimisation step.

  Before switch_step (or always, without a contrastive phase) the gradient of
  the masked next-token loss over every example is used with the lr_ntp
  schedule. From switch_step the gradient of the contrastive loss over the
  (example, partner) pairs is used with the lr_cl schedule; Adam moments are
  reset when the phase starts.

  Args:
    state: model and optimizer state.
    batch: the composed batch of this step.
    config: training settings.
    step: global step index.

  Returns:
    The updated state and the losses before the update, as floats.

  Raises:
    FloatingPointError: if the loss is not finite. The message names the step.
  """
  model_config = state.model.config
  if config.max_seq_len > model_config.max_positions:
    raise ValueError(f'max_seq_len ({config.max_seq_len}) exceeds '
                     f'max_positions ({model_config.max_positions}).')
  updates = _updates(model_config, config)
  alpha = phase_alpha(step, config)
  lr = learning_rate(step, config)
  opt_state = state.opt_state
  if alpha:
    if step == config.switch_step:
      logging.info('Step %05d: switching to the contrastive loss.', step)
      opt_state = updates.optimizer.init(state.model.params)
    data = batching.contrastive_arrays(batch, config.max_seq_len,
                                       config.k_specials)
    update = updates.contrastive
  else:
    data = batching.ntp_arrays(batch, config.max_seq_len, config.k_specials)
    update = updates.ntp
  params, opt_state, loss, breakdown = update(
      state.model.params, opt_state, dropout_key(config.seed, step), data,
      jnp.asarray(lr, dtype=model_config.jnp_dtype))
  if not np.isfinite(float(loss)):
    raise FloatingPointError(f'Non-finite loss {float(loss)} at step {step}.')
  breakdown = gem_loss.LossBreakdown(
      ntp=float(breakdown.ntp), cl=float(breakdown.cl),
      alpha=float(breakdown.alpha), total=float(breakdown.total))
  model = networks.ModelState(config=model_config, params=params)
  return TrainingState(model=model, opt_state=opt_state), breakdown


@attr.s(auto_attribs=True, frozen=True)
class TrainResult:
  checkpoint_path: str
  stats_path: str
  steps: int


def manifest_config(cfg: ml_collections.ConfigDict) -> Mapping[str, Any]:
  """The configuration echoed into artifacts, without the output location."""
  values = cfg.to_dict()
  values['log'] = dict(values['log'], save_path='')
  return values


def _truncate_stats(filename: str, step: int) -> None:
  """Drops rows of steps >= step, left behind by an interrupted run."""
  if not os.path.exists(filename):
    return
  with open(filename, 'r', encoding='UTF-8') as f:
    lines = f.readlines()
  kept = lines[:1] + [line for line in lines[1:]
                      if line.strip() and int(line.split(',', 1)[0]) < step]
  with open(filename, 'w', encoding='UTF-8') as f:
    f.writelines(kept)


def _initial_state(cfg: ml_collections.ConfigDict,
                   documents, model_config: networks.ModelConfig):
  """Returns (model, vocab) for a fresh run."""
  if cfg.log.init_from:
    logging.info('Initialising parameters from %s', cfg.log.init_from)
    base = checkpoint.restore(cfg.log.init_from)
    if base.vocab is None:
      raise ValueError(f'Checkpoint {cfg.log.init_from} has no vocabulary.')
    return base.state, base.vocab
  vocab = corpus.build_vocab(documents, cap=cfg.vocab.cap)
  return networks.init_model(model_config), vocab


def _log_phase_summary(stats_path: str) -> None:
  if not os.path.exists(stats_path):
    return
  summary = analysis_tools.summarize_phases(
      analysis_tools.load_stats(stats_path))
  for row in summary.itertuples():
    logging.info('Phase %s: steps %d-%d, loss %.4f -> %.4f (mean %.4f).',
                 row.phase, row.first_step, row.last_step, row.first_loss,
                 row.last_loss, row.mean_loss)


def train(corpus_path: str,
          cfg: ml_collections.ConfigDict,
          writer_manager=None) -> TrainResult:
  """Trains a model on a corpus file.

  Checkpoints go to cfg.log.save_path as gem_ckpt_<step>.bin, together with
  train_stats.csv. If save_path already holds a checkpoint, training resumes
  from it, continuing the step count, the schedule and the log.

  Args:
    corpus_path: corpus file, see corpus.load_corpus.
    cfg: configuration, see base_config.default.
    writer_manager: context manager with a write method for logging
      statistics. If None, a writers.Writer is used.

  Returns:
    Paths of the final checkpoint and of the statistics CSV.
  """
  cfg = base_config.resolve(cfg)
  config = TrainConfig.from_config(cfg.train)
  save_path = checkpoint.create_save_path(cfg.log.save_path)
  documents = corpus.load_corpus(corpus_path)
  echo = manifest_config(cfg)

  ckpt_restore_filename = checkpoint.find_last_checkpoint(save_path)
  if ckpt_restore_filename:
    params_only = checkpoint.restore(ckpt_restore_filename)
    optimizer = make_optimizer(config)
    opt_template = jax.eval_shape(optimizer.init, params_only.state.params)
    restored = checkpoint.restore(ckpt_restore_filename, opt_template)
    model, vocab, t_init = restored.state, restored.vocab, restored.step
    opt_state = restored.opt_state
    if opt_state is None:
      opt_state = optimizer.init(model.params)
  else:
    logging.info('No checkpoint found. Training new model.')
    model, vocab = _initial_state(
        cfg, documents, networks.ModelConfig.from_config(cfg.model))
    opt_state = make_optimizer(config).init(model.params)
    t_init = 0
  if len(vocab) > model.config.vocab_size:
    raise ValueError(f'Vocabulary of {len(vocab)} tokens does not fit '
                     f'vocab_size={model.config.vocab_size}.')
  state = TrainingState(model=model, opt_state=opt_state)
  encoded = batching.EncodedCorpus(documents, vocab)
  logging.info('Training on %d documents for %d steps from step %d.',
               len(encoded), config.total_steps, t_init)

  stats_path = os.path.join(save_path, STATS_NAME + '.csv')
  if t_init:
    _truncate_stats(stats_path, t_init)
  if writer_manager is None:
    writer_manager = writers.Writer(
        name=STATS_NAME,
        schema=STATS_SCHEMA,
        directory=save_path,
        append=t_init > 0,
        manifest=echo)

  ckpt_filename = ckpt_restore_filename
  weighted_stats = None
  with writer_manager as writer:
    for t in range(t_init, config.total_steps):
      rng = np.random.default_rng([config.seed, t])
      batch = batching.compose_batch(encoded, None, config, rng, t)
      lr = learning_rate(t, config)
      state, breakdown = train_step(state, batch, config, t)

      if cfg.debug.check_nan:
        chex.assert_tree_all_finite(
            {'params': state.model.params, 'optim': state.opt_state})

      weighted_stats = statistics.exponentialy_weighted_stats(
          alpha=0.1, observation=breakdown.total, previous_stats=weighted_stats)
      writer.write(
          t,
          step=t,
          lr=lr,
          alpha=breakdown.alpha,
          loss_ntp=breakdown.ntp,
          loss_cl=breakdown.cl,
          loss_total=breakdown.total)
      if t % cfg.log.stats_frequency == 0:
        logging.info(
            'Step %05d: lr=%.3g alpha=%.0f ntp=%.4f cl=%.4f total=%.4f '
            'ewmean=%.4f', t, lr, breakdown.alpha, breakdown.ntp, breakdown.cl,
            breakdown.total, weighted_stats.mean)

      completed = t + 1
      if (cfg.log.save_frequency and completed % cfg.log.save_frequency == 0
          and completed < config.total_steps):
        checkpoint.save(save_path, completed, state.model, state.opt_state,
                        vocab, echo)

  if ckpt_filename is None or t_init < config.total_steps:
    ckpt_filename = checkpoint.save(save_path, config.total_steps, state.model,
                                    state.opt_state, vocab, echo)
  _log_phase_summary(stats_path)
  return TrainResult(checkpoint_path=ckpt_filename, stats_path=stats_path,
                     steps=config.total_steps)
