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

"""Composition of mixed training batches and their padded array form."""

import math
from typing import Optional, Sequence, Tuple, Union

from absl import logging
import attr
import chex
from gemlab import constants
from gemlab import corpus
from gemlab import masking
import numpy as np
from typing_extensions import Protocol

SequenceKind = masking.SequenceKind

# Smallest padded length used when bucketing single sequences.
MIN_BUCKET = 16


class BatchOptions(Protocol):
  """The TrainConfig fields batch composition reads."""
  p_raw: float
  k_specials: int
  batch_size: int
  max_seq_len: int
  dropout_rate_prefix: float
  reconstruct_share: float
  switch_step: int
  contrastive: bool
  seed: int


def insert_specials(tokens, position: int, k: int,
                    kind: SequenceKind) -> masking.SegmentedSequence:
  """Inserts k EMB tokens into tokens.

  Args:
    tokens: token ids of the text.
    position: insertion point for COMPRESS, in [1, len(tokens)]. Ignored for
      RECONSTRUCT, which always inserts after the whole text.
    k: number of special tokens.
    kind: COMPRESS or RECONSTRUCT.

  Returns:
    COMPRESS: tokens[:position] + k EMB + tokens[position:].
    RECONSTRUCT: tokens + k EMB + tokens.

  Raises:
    ValueError: if position is out of range, k < 1 or kind is PLAIN.
  """
  tokens = np.asarray(tokens, dtype=np.int32)
  if k < 1:
    raise ValueError(f'k must be at least 1, got {k}.')
  specials = np.full(k, constants.EMB_ID, dtype=np.int32)
  if kind == SequenceKind.RECONSTRUCT:
    if not len(tokens):
      raise ValueError('Cannot reconstruct an empty text.')
    return masking.SegmentedSequence(
        tokens=np.concatenate([tokens, specials, tokens]),
        m=len(tokens), k=k, n=len(tokens), kind=kind)
  elif kind == SequenceKind.COMPRESS:
    if not 1 <= position <= len(tokens):
      raise ValueError(
          f'Insertion position {position} outside [1, {len(tokens)}].')
    return masking.SegmentedSequence(
        tokens=np.concatenate(
            [tokens[:position], specials, tokens[position:]]),
        m=position, k=k, n=len(tokens) - position, kind=kind)
  else:
    raise ValueError(f'Cannot insert special tokens for kind {kind}.')


def dropout_prefix(seq: masking.SegmentedSequence, rate: float,
                   rng: np.random.Generator) -> masking.SegmentedSequence:
  """Deletes each prefix token independently with probability rate.

  At least one prefix token is always kept. Special tokens and suffix are
  unchanged. The twin of a RECONSTRUCT sequence no longer replicates its
  prefix and is returned as COMPRESS.

  Raises:
    ValueError: if seq has no special tokens, an empty prefix, or rate is
      outside [0, 1).
  """
  if seq.k < 1:
    raise ValueError('Prefix dropout needs a segmented sequence.')
  if seq.m < 1:
    raise ValueError('Cannot drop out an empty prefix.')
  if not 0.0 <= rate < 1.0:
    raise ValueError(f'Dropout rate must lie in [0, 1), got {rate}.')
  keep = rng.random(seq.m) >= rate
  if not keep.any():
    keep[rng.integers(seq.m)] = True
  prefix = seq.prefix[keep]
  kind = seq.kind
  if kind == SequenceKind.RECONSTRUCT and len(prefix) != seq.m:
    kind = SequenceKind.COMPRESS
  return masking.SegmentedSequence(
      tokens=np.concatenate([prefix, seq.specials, seq.suffix]),
      m=len(prefix), k=seq.k, n=seq.n, kind=kind)


@attr.s(auto_attribs=True, frozen=True)
class TrainingBatch:
  """Examples of one step and the prefix-dropout twins of segmented ones.

  Attributes:
    examples: the batch sequences.
    partners: aligned with examples; None for plain examples.
  """
  examples: Tuple[masking.SegmentedSequence, ...]
  partners: Tuple[Optional[masking.SegmentedSequence], ...]

  def __attrs_post_init__(self):
    if len(self.examples) != len(self.partners):
      raise ValueError('Every example needs a partner slot.')
    for example, partner in zip(self.examples, self.partners):
      if (example.kind == SequenceKind.PLAIN) != (partner is None):
        raise ValueError('Exactly the segmented examples carry partners.')

  @property
  def pairs(self):
    """(example, partner) for every segmented example."""
    return [(e, p) for e, p in zip(self.examples, self.partners)
            if p is not None]

  @property
  def segmented_fraction(self) -> float:
    return len(self.pairs) / len(self.examples)


class EncodedCorpus:
  """Encoded documents with at least two tokens, in corpus order."""

  def __init__(self, documents: Sequence[corpus.Document],
               vocab: corpus.Vocab):
    self.doc_ids = []
    self.tokens = []
    for doc in documents:
      tokens = corpus.encode(vocab, doc.text)
      if len(tokens) < 2:
        logging.warning('Skipping document %s with %d token(s).', doc.id,
                        len(tokens))
        continue
      self.doc_ids.append(doc.id)
      self.tokens.append(tokens)
    if not self.tokens:
      raise ValueError('Corpus has no document with at least two tokens.')

  def __len__(self) -> int:
    return len(self.tokens)

  def batch_indices(self, step: int, batch_size: int, seed: int) -> np.ndarray:
    """Document indices of a step, walking a seeded permutation per epoch."""
    global_index = step * batch_size + np.arange(batch_size)
    epochs, offsets = np.divmod(global_index, len(self))
    indices = np.empty(batch_size, dtype=np.int64)
    for epoch in np.unique(epochs):
      order = np.random.default_rng([seed, int(epoch)]).permutation(len(self))
      selected = epochs == epoch
      indices[selected] = order[offsets[selected]]
    return indices


def _segment(tokens: np.ndarray, config: BatchOptions,
             rng: np.random.Generator) -> masking.SegmentedSequence:
  k = config.k_specials
  if rng.random() < config.reconstruct_share:
    tokens = tokens[:(config.max_seq_len - k) // 2]
    return insert_specials(tokens, len(tokens), k, SequenceKind.RECONSTRUCT)
  tokens = tokens[:config.max_seq_len - k]
  position = int(rng.integers(1, len(tokens) + 1))
  return insert_specials(tokens, position, k, SequenceKind.COMPRESS)


def compose_batch(documents: Union[EncodedCorpus, Sequence[corpus.Document]],
                  vocab: Optional[corpus.Vocab],
                  config: BatchOptions,
                  rng: np.random.Generator,
                  step: int) -> TrainingBatch:
  """Composes the training batch of a step.

  Each slot is plain with probability p_raw, otherwise segmented (reconstruct
  with probability reconstruct_share, else compress at a uniform position in
  [1, len]) and paired with a prefix-dropout twin. From switch_step onwards,
  when the contrastive phase is enabled, every slot is segmented. Texts are
  truncated before insertion so that no sequence exceeds max_seq_len.

  Args:
    documents: the corpus, pre-encoded or as documents.
    vocab: used to encode documents; unused for an EncodedCorpus.
    config: batch options.
    rng: source of the mix, insertion and dropout decisions.
    step: global step index; selects the documents and the phase.

  Returns:
    The batch.
  """
  if not isinstance(documents, EncodedCorpus):
    if vocab is None:
      raise ValueError('A vocabulary is needed to encode documents.')
    documents = EncodedCorpus(documents, vocab)
  contrastive_phase = config.contrastive and step >= config.switch_step
  examples, partners = [], []
  for index in documents.batch_indices(step, config.batch_size, config.seed):
    tokens = documents.tokens[index]
    if not contrastive_phase and rng.random() < config.p_raw:
      examples.append(masking.plain_sequence(tokens[:config.max_seq_len]))
      partners.append(None)
      continue
    example = _segment(tokens, config, rng)
    examples.append(example)
    partners.append(dropout_prefix(example, config.dropout_rate_prefix, rng))
  return TrainingBatch(examples=tuple(examples), partners=tuple(partners))


@chex.dataclass
class SequenceArrays:
  """Padded model inputs; leading batch axis optional.

  Attributes:
    tokens: (..., L) token ids, PAD after the sequence.
    allowed: (..., L, L) attention mask; pad rows see only themselves.
    positions: (..., L) position indices.
    loss_mask: (..., L-1) next-token loss mask; False on padding.
    special_positions: (..., k) indices of the special tokens.
  """
  tokens: np.ndarray
  allowed: np.ndarray
  positions: np.ndarray
  loss_mask: np.ndarray
  special_positions: np.ndarray


@chex.dataclass
class ContrastiveArrays:
  """Row i of partners is the positive of row i of examples."""
  examples: SequenceArrays
  partners: SequenceArrays


def bucket_length(length: int, max_positions: int) -> int:
  """Padded length for a single sequence: a power of two, at least MIN_BUCKET.

  Raises:
    ValueError: if length exceeds max_positions.
  """
  if length > max_positions:
    raise ValueError(
        f'Sequence of length {length} exceeds max_positions={max_positions}.')
  bucket = max(MIN_BUCKET, 2**math.ceil(math.log2(max(length, 1))))
  return min(bucket, max_positions)


def pad_sequence(seq: masking.SegmentedSequence, length: int,
                 num_specials: Optional[int] = None) -> SequenceArrays:
  """Pads seq to length.

  Args:
    seq: the sequence.
    length: padded length, at least len(seq).
    num_specials: size of special_positions. Sequences with a different number
      of special tokens (plain ones) get zeros. Defaults to seq.k.

  Returns:
    Unbatched SequenceArrays.
  """
  size = len(seq)
  if size > length:
    raise ValueError(f'Sequence of length {size} exceeds padded length '
                     f'{length}.')
  tokens = np.full(length, constants.PAD_ID, dtype=np.int32)
  tokens[:size] = seq.tokens
  allowed = np.eye(length, dtype=bool)
  allowed[:size, :size] = masking.build_gem_mask(*seq.segments)
  loss_mask = np.zeros(length - 1, dtype=bool)
  if size >= 2:
    loss_mask[:size - 1] = masking.build_loss_mask(seq)
  num_specials = seq.k if num_specials is None else num_specials
  if seq.k == num_specials:
    special_positions = seq.special_positions.astype(np.int32)
  else:
    special_positions = np.zeros(num_specials, dtype=np.int32)
  return SequenceArrays(
      tokens=tokens,
      allowed=allowed,
      positions=np.arange(length, dtype=np.int32),
      loss_mask=loss_mask,
      special_positions=special_positions)


def stack_sequences(seqs: Sequence[masking.SegmentedSequence], length: int,
                    num_specials: int) -> SequenceArrays:
  """Pads and stacks sequences along a leading batch axis."""
  padded = [pad_sequence(seq, length, num_specials) for seq in seqs]
  return SequenceArrays(**{
      field: np.stack([p[field] for p in padded])
      for field in ('tokens', 'allowed', 'positions', 'loss_mask',
                    'special_positions')})


def ntp_arrays(batch: TrainingBatch, length: int,
               num_specials: int) -> SequenceArrays:
  return stack_sequences(batch.examples, length, num_specials)


def contrastive_arrays(batch: TrainingBatch, length: int,
                       num_specials: int) -> ContrastiveArrays:
  """Arrays of the (example, partner) pairs of a batch.

  Raises:
    ValueError: if the batch has fewer than two pairs.
  """
  pairs = batch.pairs
  if len(pairs) < 2:
    raise ValueError(
        f'Contrastive loss needs at least two pairs, got {len(pairs)}.')
  examples, partners = zip(*pairs)
  return ContrastiveArrays(
      examples=stack_sequences(examples, length, num_specials),
      partners=stack_sequences(partners, length, num_specials))
