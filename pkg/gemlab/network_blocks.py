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

"""Neural network building blocks."""

from typing import Mapping, Optional

import chex
import jax
import jax.numpy as jnp


def init_linear_layer(key: chex.PRNGKey,
                      fan_in: int,
                      fan_out: int,
                      scale: float = 1.0,
                      dtype=jnp.float32) -> Mapping[str, jnp.ndarray]:
  """Returns {'w': (fan_in, fan_out), 'b': (fan_out,)} for a dense projection.

  Weights are normal with standard deviation scale / sqrt(fan_in); biases
  start at zero.
  """
  std = scale / jnp.sqrt(float(fan_in))
  return {
      'w': std * jax.random.normal(key, (fan_in, fan_out), dtype=dtype),
      'b': jnp.zeros((fan_out,), dtype=dtype),
  }


def linear_layer(x: jnp.ndarray,
                 w: jnp.ndarray,
                 b: Optional[jnp.ndarray] = None) -> jnp.ndarray:
  """Projects the last axis of x with w and adds b if given."""
  out = x @ w
  if b is None:
    return out
  return out + b


def init_layer_norm(dim: int, dtype=jnp.float32) -> Mapping[str, jnp.ndarray]:
  return {'scale': jnp.ones((dim,), dtype=dtype),
          'offset': jnp.zeros((dim,), dtype=dtype)}


def layer_norm(x: jnp.ndarray,
               scale: jnp.ndarray,
               offset: jnp.ndarray,
               eps: float = 1.e-5) -> jnp.ndarray:
  """Normalises over the last axis, then applies a learned affine map."""
  mean = jnp.mean(x, axis=-1, keepdims=True)
  variance = jnp.mean(jnp.square(x - mean), axis=-1, keepdims=True)
  return (x - mean) * jax.lax.rsqrt(variance + eps) * scale + offset


def dropout(key: Optional[chex.PRNGKey], x: jnp.ndarray,
            rate: float) -> jnp.ndarray:
  """Inverted dropout. Identity if key is None or rate is zero."""
  if key is None or rate == 0.0:
    return x
  keep = jax.random.bernoulli(key, 1.0 - rate, shape=x.shape)
  return jnp.where(keep, x / (1.0 - rate), jnp.zeros_like(x))


def masked_softmax(scores: jnp.ndarray, allowed: jnp.ndarray) -> jnp.ndarray:
  """Softmax over the last axis with disallowed entries set to -inf.

  Every row must allow at least one entry; disallowed entries receive exactly
  zero probability.
  """
  scores = jnp.where(allowed, scores, -jnp.inf)
  return jax.nn.softmax(scores, axis=-1)
