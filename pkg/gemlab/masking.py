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

"""Bottleneck attention masks and next-token loss masks.

A segmented sequence is laid out as prefix (m tokens), special slots (k EMB
tokens) and suffix (n tokens). Under the bottleneck mask, prefix tokens are
causal, each special token sees the prefix and itself only, and suffix
tokens see the special tokens and the causal part of the suffix, never the
prefix.
"""

import enum

import attr
from gemlab import constants
import numpy as np


class SequenceKind(enum.Enum):
  """How a training sequence was formed."""
  PLAIN = enum.auto()
  COMPRESS = enum.auto()
  RECONSTRUCT = enum.auto()


def _as_token_array(tokens) -> np.ndarray:
  array = np.asarray(tokens, dtype=np.int32)
  array.setflags(write=False)
  return array


@attr.s(auto_attribs=True, frozen=True, eq=False)
class SegmentedSequence:
  """Tokens partitioned into prefix, special slots and suffix.

  Attributes:
    tokens: token ids, shape (T,).
    m: prefix length.
    k: number of special (EMB) slots.
    n: suffix length.
    kind: how the sequence was formed.
  """
  tokens: np.ndarray = attr.ib(converter=_as_token_array)
  m: int
  k: int
  n: int
  kind: SequenceKind = SequenceKind.COMPRESS

  def __attrs_post_init__(self):
    if min(self.m, self.k, self.n) < 0:
      raise ValueError(
          f'Segment lengths must be non-negative, got {self.segments}.')
    if self.tokens.ndim != 1 or len(self.tokens) != self.m + self.k + self.n:
      raise ValueError(f'Sequence of length {len(self.tokens)} does not match '
                       f'segments (m, k, n)={self.segments}.')
    if np.any(self.specials != constants.EMB_ID):
      raise ValueError('Special slots must all hold the EMB token.')
    if (np.any(self.prefix == constants.EMB_ID) or
        np.any(self.suffix == constants.EMB_ID)):
      raise ValueError('EMB token found outside the special slots.')
    if self.kind == SequenceKind.PLAIN and self.k:
      raise ValueError('Plain sequences cannot contain special tokens.')
    if (self.kind == SequenceKind.RECONSTRUCT and
        not np.array_equal(self.prefix, self.suffix)):
      raise ValueError('Reconstruction suffix must replicate the prefix.')

  @property
  def segments(self):
    return self.m, self.k, self.n

  @property
  def prefix(self) -> np.ndarray:
    return self.tokens[:self.m]

  @property
  def specials(self) -> np.ndarray:
    return self.tokens[self.m:self.m + self.k]

  @property
  def suffix(self) -> np.ndarray:
    return self.tokens[self.m + self.k:]

  @property
  def special_positions(self) -> np.ndarray:
    return np.arange(self.m, self.m + self.k)

  def __len__(self) -> int:
    return len(self.tokens)

  def __eq__(self, other):
    if not isinstance(other, SegmentedSequence):
      return NotImplemented
    return (self.segments == other.segments and self.kind == other.kind and
            np.array_equal(self.tokens, other.tokens))


def plain_sequence(tokens) -> SegmentedSequence:
  """Wraps tokens as a plain sequence with no special slots."""
  tokens = _as_token_array(tokens)
  return SegmentedSequence(
      tokens=tokens, m=len(tokens), k=0, n=0, kind=SequenceKind.PLAIN)


def causal_mask(length: int) -> np.ndarray:
  """Returns the (length, length) lower-triangular boolean mask."""
  return np.tril(np.ones((length, length), dtype=bool))


def build_gem_mask(m: int, k: int, n: int) -> np.ndarray:
  """Builds the bottleneck attention mask.

  Args:
    m: prefix length.
    k: number of special tokens.
    n: suffix length.

  Returns:
    Boolean array of shape (T, T), T = m + k + n. Entry (i, j) is True if query
    position i may attend key position j. Without special tokens there is no
    bottleneck and the mask is causal.

  Raises:
    ValueError: if any length is negative or all lengths are zero.
  """
  if min(m, k, n) < 0:
    raise ValueError(f'Lengths must be non-negative, got {(m, k, n)}.')
  total = m + k + n
  if total < 1:
    raise ValueError('Mask needs at least one position.')
  if not k:
    return causal_mask(total)
  i = np.arange(total)[:, None]
  j = np.arange(total)[None, :]
  causal = j <= i
  special_start, suffix_start = m, m + k
  in_prefix_i = i < special_start
  in_special_i = (i >= special_start) & (i < suffix_start)
  in_suffix_i = i >= suffix_start
  in_prefix_j = j < special_start
  in_special_j = (j >= special_start) & (j < suffix_start)
  in_suffix_j = j >= suffix_start
  allowed = (
      in_prefix_i
      | (in_special_i & (in_prefix_j | (j == i)))
      | (in_suffix_i & (in_special_j | in_suffix_j)))
  return allowed & causal


def build_loss_mask(seq: SegmentedSequence) -> np.ndarray:
  """Builds the next-token loss mask of a sequence.

  Args:
    seq: the sequence.

  Returns:
    Boolean array of shape (T-1,). Entry i is True if the prediction made at
    position i (of token i+1) contributes to the loss, i.e. unless token i+1 is
    EMB. The last special position predicts the first suffix token and is
    therefore included.

  Raises:
    ValueError: if the sequence has fewer than two tokens.
  """
  if len(seq) < 2:
    raise ValueError(
        f'Loss mask needs at least two tokens, got {len(seq)}.')
  return seq.tokens[1:] != constants.EMB_ID


def oracle_allowed(m: int, k: int, n: int, i: int, j: int) -> bool:
  """Pointwise restatement of the bottleneck rule, for testing.

  Raises:
    ValueError: if i or j lies outside [0, m + k + n).
  """
  total = m + k + n
  if not (0 <= i < total and 0 <= j < total):
    raise ValueError(f'Position ({i}, {j}) outside sequence of length {total}.')
  if j > i:
    return False
  if not k:
    return True
  specials = range(m, m + k)
  if i < m:
    return True
  if i in specials:
    return j < m or j == i
  return j in specials or j >= m + k


def format_mask(mask: np.ndarray) -> str:
  """Renders a boolean mask as rows of 0/1."""
  return '\n'.join(' '.join(str(int(v)) for v in row) for row in mask)
