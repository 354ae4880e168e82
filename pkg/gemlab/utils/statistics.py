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

"""Running statistics and ranking metrics."""

from typing import Generic, Optional, Sequence, TypeVar, Union

import attr
from jax import numpy as jnp
import numpy as np
import scipy.stats

T = TypeVar('T', float, np.ndarray, jnp.ndarray)


@attr.s(auto_attribs=True)
class WeightedStats(Generic[T]):
  mean: T
  variance: T


def exponentialy_weighted_stats(
    alpha: Union[float, T],
    observation: T,
    previous_stats: Optional[WeightedStats[T]] = None,
) -> WeightedStats[T]:
  """Returns the exponentially-weighted mean and variance of a loss stream.

  mu_t = mu_{t-1} + alpha (x_t - mu_{t-1}), with the variance updated
  incrementally alongside.

  Args:
    alpha: weight of the new observation.
    observation: latest value.
    previous_stats: statistics before this observation, or None if this is the
      first one.
  """
  if previous_stats is None:
    return WeightedStats[T](mean=observation, variance=0.0 * observation)
  diff = observation - previous_stats.mean
  increment = alpha * diff
  return WeightedStats[T](
      mean=previous_stats.mean + increment,
      variance=(1 - alpha) * (previous_stats.variance + diff * increment))


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
  """Spearman rank correlation with average ranks for ties.

  Raises:
    ValueError: on length mismatch, fewer than two points, or a constant input
      for which the correlation is undefined.
  """
  x = np.asarray(x, dtype=np.float64)
  y = np.asarray(y, dtype=np.float64)
  if x.shape != y.shape or x.ndim != 1:
    raise ValueError(f'Need two 1D sequences of equal length, got {x.shape} '
                     f'and {y.shape}.')
  if len(x) < 2:
    raise ValueError('Spearman correlation needs at least two points.')
  if np.all(x == x[0]) or np.all(y == y[0]):
    raise ValueError('Spearman correlation is undefined for constant input.')
  return float(scipy.stats.spearmanr(x, y).correlation)


def ndcg_single(rank: int, cutoff: int = 10) -> float:
  """nDCG@cutoff of a ranking with a single relevant item at 1-based rank."""
  if rank < 1:
    raise ValueError(f'Ranks start at 1, got {rank}.')
  if rank > cutoff:
    return 0.0
  return float(1.0 / np.log2(rank + 1))
