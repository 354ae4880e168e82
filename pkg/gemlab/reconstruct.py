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

"""Compressing a text into special-token KV caches and decoding it back."""

from typing import Sequence

from absl import logging
import attr
from gemlab import batching
from gemlab import corpus
from gemlab import masking
from gemlab import networks
import numpy as np


def compress(state: networks.ModelState, vocab: corpus.Vocab, text: str,
             k: int = 1) -> networks.KVCacheSnapshot:
  """Captures the KV cache of k special tokens appended to text.

  Raises:
    ValueError: if text has no tokens or text plus specials exceeds
      max_positions.
  """
  tokens = corpus.encode(vocab, text)
  if not len(tokens):
    raise ValueError('Cannot compress an empty text.')
  if len(tokens) + k > state.config.max_positions:
    raise ValueError(f'Text of {len(tokens)} tokens plus {k} special tokens '
                     f'exceeds max_positions={state.config.max_positions}.')
  seq = batching.insert_specials(
      tokens, len(tokens), k, masking.SequenceKind.COMPRESS)
  return networks.capture_special_kv(state, seq)


def reconstruct_tokens(state: networks.ModelState,
                       cache: networks.KVCacheSnapshot,
                       max_len: int = 64) -> np.ndarray:
  """Greedily decodes at most max_len tokens from cache, stopping at EOS.

  max_len is reduced to the positions left after the cached tokens.
  """
  available = state.config.max_positions - (cache.m + cache.k)
  if available < 1:
    raise ValueError('No positions left to decode after the cache.')
  if max_len > available:
    logging.warning('Reducing max_len from %d to %d.', max_len, available)
    max_len = available
  return networks.decode_from_cache(state, cache, max_len, greedy=True)


def reconstruct_text(state: networks.ModelState, vocab: corpus.Vocab,
                     cache: networks.KVCacheSnapshot,
                     max_len: int = 64) -> str:
  return corpus.decode(
      vocab, reconstruct_tokens(state, cache, max_len), lenient=True)


def token_accuracy(reference: Sequence[int],
                   hypothesis: Sequence[int]) -> float:
  """Share of reference positions where hypothesis holds the same token.

  Missing hypothesis positions count as mismatches; extra ones are ignored.

  Raises:
    ValueError: if reference is empty.
  """
  reference = np.asarray(reference)
  if not len(reference):
    raise ValueError('Reference must contain at least one token.')
  hypothesis = np.asarray(hypothesis)[:len(reference)]
  matches = np.sum(reference[:len(hypothesis)] == hypothesis)
  return float(matches / len(reference))


@attr.s(auto_attribs=True, frozen=True)
class Reconstruction:
  input_text: str
  recovered_text: str
  accuracy: float


def round_trip(state: networks.ModelState, vocab: corpus.Vocab, text: str,
               k: int = 1, max_len: int = 64) -> Reconstruction:
  """Compresses text, decodes it back and scores the recovery."""
  reference = corpus.encode(vocab, text)
  cache = compress(state, vocab, text, k)
  hypothesis = reconstruct_tokens(state, cache, max_len)
  return Reconstruction(
      input_text=corpus.decode(vocab, reference),
      recovered_text=corpus.decode(vocab, hypothesis, lenient=True),
      accuracy=token_accuracy(reference, hypothesis))
