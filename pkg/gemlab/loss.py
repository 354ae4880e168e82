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

"""Masked next-token, contrastive and combined losses."""

from typing import Optional, Tuple, Union

import chex
from gemlab import constants
from gemlab import embedder
from gemlab import networks
import jax
import jax.numpy as jnp
import numpy as np
from typing_extensions import Protocol

Scalar = Union[float, jnp.ndarray]


@chex.dataclass
class LossBreakdown:
  """Losses of one evaluation of the combined objective.

  Attributes:
    ntp: masked next-token prediction loss (0 if not evaluated).
    cl: contrastive loss (0 if not evaluated).
    alpha: weight of the contrastive loss.
    total: (1 - alpha) * ntp + alpha * cl.
  """
  ntp: Scalar
  cl: Scalar
  alpha: Scalar
  total: Scalar


def _concrete(x) -> Optional[np.ndarray]:
  """Returns x as a numpy array, or None if x is being traced."""
  try:
    return np.asarray(x)
  except (jax.errors.TracerArrayConversionError,
          jax.errors.ConcretizationTypeError):
    return None


def per_position_cross_entropy(logits: jnp.ndarray,
                               targets: jnp.ndarray) -> jnp.ndarray:
  """Cross-entropy of each position, shape logits.shape[:-1]."""
  log_probs = jax.nn.log_softmax(logits, axis=-1)
  picked = jnp.take_along_axis(log_probs, targets[..., None], axis=-1)
  return -picked[..., 0]


def ntp_loss(logits: jnp.ndarray, targets: jnp.ndarray,
             loss_mask: jnp.ndarray) -> jnp.ndarray:
  """Mean cross-entropy over the included positions.

  Args:
    logits: predictions, shape (..., T, V).
    targets: target ids, shape (..., T).
    loss_mask: boolean, shape (..., T); positions to include.

  Returns:
    Scalar mean over every included position (across the batch, if any).

  Raises:
    ValueError: if shapes disagree or (for concrete inputs) no position is
      included.
  """
  if logits.shape[:-1] != targets.shape or targets.shape != loss_mask.shape:
    raise ValueError(f'Inconsistent shapes: logits {logits.shape}, targets '
                     f'{targets.shape}, loss mask {loss_mask.shape}.')
  mask_value = _concrete(loss_mask)
  if mask_value is not None and not np.any(mask_value):
    raise ValueError('Loss mask excludes every position.')
  ce = per_position_cross_entropy(logits, targets)
  weights = loss_mask.astype(ce.dtype)
  return jnp.sum(ce * weights) / jnp.sum(weights)


def cosine_similarity_matrix(q: jnp.ndarray, d: jnp.ndarray) -> jnp.ndarray:
  qn = q / jnp.linalg.norm(q, axis=-1, keepdims=True)
  dn = d / jnp.linalg.norm(d, axis=-1, keepdims=True)
  return jnp.dot(qn, dn.T)


def contrastive_loss(q: jnp.ndarray,
                     d: jnp.ndarray,
                     temperature: Scalar,
                     symmetric: bool = False) -> jnp.ndarray:
  """In-batch InfoNCE loss with cosine similarity.

  Row i of d is the positive of row i of q; every other row of d is a
  negative. The loss is the mean over i of
  -log softmax_j(temperature * s(q_i, d_j))[i].

  Args:
    q: query embeddings, shape (B, dim).
    d: document embeddings, shape (B, dim).
    temperature: scale applied to the similarities.
    symmetric: if true, average with the d -> q direction.

  Returns:
    Scalar loss.

  Raises:
    ValueError: if B < 2, shapes differ or (for concrete inputs) a row has zero
      norm.
  """
  if q.shape != d.shape or q.ndim != 2:
    raise ValueError(
        f'Expected two (B, dim) arrays, got {q.shape} and {d.shape}.')
  if q.shape[0] < 2:
    raise ValueError(
        f'Contrastive loss needs at least 2 pairs, got {q.shape[0]}.')
  for name, x in (('q', q), ('d', d)):
    value = _concrete(x)
    if value is not None and np.any(np.linalg.norm(value, axis=-1) == 0):
      raise ValueError(f'Zero-norm embedding in {name}.')
  scores = temperature * cosine_similarity_matrix(q, d)
  forward = -jnp.mean(jnp.diagonal(jax.nn.log_softmax(scores, axis=1)))
  if not symmetric:
    return forward
  backward = -jnp.mean(jnp.diagonal(jax.nn.log_softmax(scores, axis=0)))
  return 0.5 * (forward + backward)


def combined_loss(ntp: Scalar, cl: Scalar, alpha: float) -> LossBreakdown:
  """Weights the two losses: (1 - alpha) * ntp + alpha * cl.

  Raises:
    ValueError: if alpha lies outside [0, 1].
  """
  if not 0.0 <= alpha <= 1.0:
    raise ValueError(f'alpha must lie in [0, 1], got {alpha}.')
  return LossBreakdown(
      ntp=ntp, cl=cl, alpha=alpha, total=(1.0 - alpha) * ntp + alpha * cl)


def alpha_schedule(step: int, switch_step: int = 100) -> float:
  """Returns 0 (next-token prediction only) before switch_step, else 1."""
  return 0.0 if step < switch_step else 1.0


def clamp_temperature(temperature: Scalar) -> Scalar:
  """Clamps the contrastive temperature to [0, log 100]."""
  return jnp.clip(temperature, constants.TEMPERATURE_MIN,
                  constants.TEMPERATURE_MAX)


class LossFn(Protocol):

  def __call__(
      self,
      params: networks.ParamTree,
      key: Optional[chex.PRNGKey],
      data,
  ) -> Tuple[jnp.ndarray, LossBreakdown]:
    """Evaluates a loss on a batch.

    Args:
      params: network parameters.
      key: PRNG state for dropout, or None to evaluate in eval mode.
      data: batch arrays (see batching.SequenceArrays and
        batching.ContrastiveArrays).

    Returns:
      (loss, breakdown).
    """


def _split(key: Optional[chex.PRNGKey], num: int):
  return None if key is None else jax.random.split(key, num=num)


def make_ntp_loss(config: networks.ModelConfig) -> LossFn:
  """Creates the masked next-token loss of a batch of sequences."""

  def evaluate(params, key, data):
    _, logits, _ = networks.batch_apply(
        params, data.tokens, data.allowed, data.positions, config,
        _split(key, data.tokens.shape[0]))
    ntp = ntp_loss(logits[:, :-1], data.tokens[:, 1:], data.loss_mask)
    return ntp, combined_loss(ntp, jnp.zeros_like(ntp), 0.0)

  return evaluate


def special_embeddings(params: networks.ParamTree,
                       key: Optional[chex.PRNGKey],
                       data,
                       config: networks.ModelConfig,
                       pooling: str) -> jnp.ndarray:
  """Pooled final-layer hidden states at the special positions of a batch."""
  hidden, _, _ = networks.batch_apply(
      params, data.tokens, data.allowed, data.positions, config,
      _split(key, data.tokens.shape[0]))
  specials = jnp.take_along_axis(
      hidden, data.special_positions[..., None], axis=1)
  return embedder.pool(specials, pooling)


def make_contrastive_loss(config: networks.ModelConfig,
                          pooling: str = 'mean',
                          symmetric: bool = False) -> LossFn:
  """Creates the in-batch contrastive loss over (example, partner) pairs."""

  def evaluate(params, key, data):
    if key is None:
      example_key = partner_key = None
    else:
      example_key, partner_key = jax.random.split(key)
    q = special_embeddings(params, example_key, data.examples, config, pooling)
    d = special_embeddings(params, partner_key, data.partners, config, pooling)
    cl = contrastive_loss(q, d, params['temperature'], symmetric=symmetric)
    return cl, combined_loss(jnp.zeros_like(cl), cl, 1.0)

  return evaluate
