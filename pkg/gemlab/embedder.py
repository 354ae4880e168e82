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

"""Text embeddings from the final-layer states of special tokens."""

from typing import Callable, Sequence, Union

from absl import logging
import attr
from gemlab import batching
from gemlab import corpus
from gemlab import masking
from gemlab import networks
import jax.numpy as jnp
import numpy as np

POOLINGS = ('mean', 'concat')
# Vanilla arm: mean over every token of a plain causal pass.
BASELINE_POOLING = 'baseline-mean'

ArrayLike = Union[np.ndarray, jnp.ndarray]


@attr.s(auto_attribs=True, frozen=True, eq=False)
class Embedding:
  """An embedding vector and how it was produced.

  Attributes:
    vector: shape (d_model,) for mean pooling, (k * d_model,) for concat.
    pooling: one of POOLINGS or BASELINE_POOLING.
    source_len: number of text tokens that were embedded.
    truncated: whether the text was cut to fit max_positions.
  """
  vector: np.ndarray = attr.ib(converter=np.asarray)
  pooling: str
  source_len: int
  truncated: bool = False

  def __attrs_post_init__(self):
    if not np.all(np.isfinite(self.vector)):
      raise FloatingPointError('Embedding has non-finite entries.')

  @property
  def dim(self) -> int:
    return int(self.vector.shape[-1])


def pool(specials: ArrayLike, pooling: str) -> ArrayLike:
  """Aggregates special-token states of shape (..., k, d).

  Returns:
    Shape (..., d) for 'mean' and (..., k * d) for 'concat'.
  """
  if pooling == 'mean':
    return specials.mean(axis=-2)
  elif pooling == 'concat':
    return specials.reshape(specials.shape[:-2] + (-1,))
  else:
    raise ValueError(f'Unknown pooling {pooling!r}; expected one of {POOLINGS}.')


def _encode_nonempty(vocab: corpus.Vocab, text: str) -> np.ndarray:
  tokens = corpus.encode(vocab, text)
  if not len(tokens):
    raise ValueError('Cannot embed an empty text.')
  return tokens


def _truncate(tokens: np.ndarray, limit: int):
  if len(tokens) <= limit:
    return tokens, False
  logging.warning('Truncating text of %d tokens to %d.', len(tokens), limit)
  return tokens[:limit], True


def _hidden_states(state: networks.ModelState,
                   seq: masking.SegmentedSequence) -> np.ndarray:
  """Eval-mode hidden states of seq under its bottleneck mask, shape (T, d)."""
  length = batching.bucket_length(len(seq), state.config.max_positions)
  arrays = batching.pad_sequence(seq, length)
  hidden, _ = networks.forward(
      state, arrays.tokens, arrays.allowed, arrays.positions)
  return np.asarray(hidden[:len(seq)])


def embed_text(state: networks.ModelState,
               vocab: corpus.Vocab,
               text: str,
               k: int = 1,
               pooling: str = 'mean') -> Embedding:
  """Embeds text through k special tokens appended after it.

  The sequence is the text tokens followed by k EMB tokens (no suffix),
  evaluated in eval mode under the bottleneck mask; the final-layer states at
  the special positions are pooled.

  Raises:
    ValueError: if text has no tokens, k < 1 or pooling is unknown.
  """
  if k < 1:
    raise ValueError(f'k must be at least 1, got {k}.')
  if pooling not in POOLINGS:
    raise ValueError(f'Unknown pooling {pooling!r}; expected one of {POOLINGS}.')
  tokens = _encode_nonempty(vocab, text)
  tokens, truncated = _truncate(tokens, state.config.max_positions - k)
  seq = batching.insert_specials(
      tokens, len(tokens), k, masking.SequenceKind.COMPRESS)
  hidden = _hidden_states(state, seq)
  vector = pool(hidden[seq.special_positions], pooling)
  return Embedding(vector=vector, pooling=pooling, source_len=len(tokens),
                   truncated=truncated)


def embed_baseline_meanpool(state: networks.ModelState, vocab: corpus.Vocab,
                            text: str) -> Embedding:
  """Mean of the final-layer states of a plain causal pass over text."""
  tokens = _encode_nonempty(vocab, text)
  tokens, truncated = _truncate(tokens, state.config.max_positions)
  hidden = _hidden_states(state, masking.plain_sequence(tokens))
  return Embedding(vector=hidden.mean(axis=0), pooling=BASELINE_POOLING,
                   source_len=len(tokens), truncated=truncated)


def cosine_sim(a: Union[Embedding, ArrayLike],
               b: Union[Embedding, ArrayLike]) -> float:
  """Cosine similarity of two embeddings.

  Raises:
    ValueError: if dimensions differ or either vector is zero.
  """
  a = np.asarray(a.vector if isinstance(a, Embedding) else a, dtype=np.float64)
  b = np.asarray(b.vector if isinstance(b, Embedding) else b, dtype=np.float64)
  if a.shape != b.shape:
    raise ValueError(f'Dimension mismatch: {a.shape} vs {b.shape}.')
  norm_a, norm_b = np.linalg.norm(a), np.linalg.norm(b)
  if norm_a == 0 or norm_b == 0:
    raise ValueError('Cosine similarity of a zero vector is undefined.')
  return float(np.clip(np.dot(a, b) / (norm_a * norm_b), -1.0, 1.0))


EmbedFn = Callable[[str], np.ndarray]


def make_embed_fn(state: networks.ModelState,
                  vocab: corpus.Vocab,
                  k: int = 1,
                  pooling: str = 'mean') -> EmbedFn:
  """Returns text -> vector. pooling may also be BASELINE_POOLING."""
  if pooling == BASELINE_POOLING:
    return lambda text: embed_baseline_meanpool(state, vocab, text).vector
  return lambda text: embed_text(state, vocab, text, k, pooling).vector


def embed_texts(embed_fn: EmbedFn, texts: Sequence[str]) -> np.ndarray:
  """Stacks the embeddings of texts, shape (len(texts), dim) or (0, 0)."""
  if not texts:
    return np.zeros((0, 0), dtype=np.float32)
  return np.stack([embed_fn(text) for text in texts])

