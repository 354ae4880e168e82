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

"""Text ingestion, vocabulary construction and token encoding.

Tokenization is word-level: text is lowercased and split on whitespace. The
lowest ids are reserved (see constants.RESERVED_TOKENS); the embedding token
EMB is shared by every special slot of a sequence.
"""

import collections
import json
import os
from typing import Any, Dict, Iterable, List, Mapping, Sequence

from absl import logging
import attr
from gemlab import constants
import numpy as np


def _non_blank(instance, attribute, value):
  del instance  # unused
  if not value.strip():
    raise ValueError(f'{attribute.name} must be non-empty after trimming.')


@attr.s(auto_attribs=True, frozen=True)
class Document:
  """A single text document.

  Attributes:
    id: document identifier, unique within a corpus.
    text: UTF-8 text, non-empty after whitespace trimming.
  """
  id: str
  text: str = attr.ib(validator=_non_blank)


def normalize(text: str) -> str:
  """Lowercases text and collapses whitespace to single spaces."""
  return ' '.join(text.lower().split())


def tokenize(text: str) -> List[str]:
  """Splits text into lowercased whitespace-delimited words."""
  return text.lower().split()


@attr.s(auto_attribs=True, frozen=True)
class Vocab:
  """Immutable word-level vocabulary.

  Attributes:
    cap: maximum number of entries, reserved tokens included.
    tokens: all tokens in id order. The first constants.NUM_RESERVED entries
      are constants.RESERVED_TOKENS.
    token_to_id: inverse mapping of tokens.
  """
  cap: int
  tokens: Sequence[str] = attr.ib(converter=tuple)
  token_to_id: Dict[str, int] = attr.ib(init=False, eq=False, repr=False)

  def __attrs_post_init__(self):
    if tuple(self.tokens[:constants.NUM_RESERVED]) != constants.RESERVED_TOKENS:
      raise ValueError('Vocabulary must start with the reserved tokens '
                       f'{constants.RESERVED_TOKENS}.')
    if len(self.tokens) > self.cap:
      raise ValueError(
          f'Vocabulary of {len(self.tokens)} tokens exceeds cap {self.cap}.')
    mapping = {token: i for i, token in enumerate(self.tokens)}
    if len(mapping) != len(self.tokens):
      raise ValueError('Vocabulary contains duplicate tokens.')
    object.__setattr__(self, 'token_to_id', mapping)

  @property
  def id_to_token(self) -> Sequence[str]:
    return self.tokens

  def __len__(self) -> int:
    return len(self.tokens)

  def to_dict(self) -> Dict[str, Any]:
    return {'cap': self.cap, 'tokens': list(self.tokens)}

  @classmethod
  def from_dict(cls, payload: Mapping[str, Any]) -> 'Vocab':
    return cls(cap=payload['cap'], tokens=payload['tokens'])

  def to_json(self) -> str:
    return json.dumps(self.to_dict(), ensure_ascii=False)

  @classmethod
  def from_json(cls, data: str) -> 'Vocab':
    return cls.from_dict(json.loads(data))

  def save(self, path: str) -> None:
    with open(path, 'w', encoding='utf-8') as f:
      f.write(self.to_json())

  @classmethod
  def load(cls, path: str) -> 'Vocab':
    with open(path, 'r', encoding='utf-8') as f:
      return cls.from_json(f.read())


def load_corpus(path: str) -> List[Document]:
  """Loads documents from a text or JSONL file.

  The format is detected once per file: if the first non-blank line starts
  with '{', every line is parsed as a JSON object with a 'text' field (and an
  optional 'id'); otherwise each line is raw text.

  Args:
    path: path to a UTF-8 file.

  Returns:
    Documents in file order. Blank lines are skipped. Documents without an id
    are given the id 'line-<n>', where n is the 1-based line number.

  Raises:
    OSError: if the file cannot be read.
    ValueError: if a line in a JSONL file is not a JSON object with a string
      "text" field, or its "id" is present and not a string.
  """
  with open(path, 'r', encoding='utf-8') as f:
    lines = f.read().splitlines()
  first = next((line.strip() for line in lines if line.strip()), '')
  jsonl = first.startswith('{')
  docs = []
  for n, line in enumerate(lines, start=1):
    if not line.strip():
      continue
    doc_id = f'line-{n}'
    if jsonl:
      try:
        record = json.loads(line)
      except json.JSONDecodeError as exc:
        raise ValueError(f'{path}: malformed JSON on line {n}.') from exc
      if not isinstance(record, dict) or 'text' not in record:
        raise ValueError(f'{path}: line {n} has no "text" field.')
      text = record['text']
      doc_id = record.get('id', doc_id)
      if not isinstance(text, str) or not isinstance(doc_id, str):
        raise ValueError(
            f'{path}: line {n} must hold string "text" and "id" fields, got '
            f'{type(text).__name__} and {type(doc_id).__name__}.')
    else:
      text = line
    if not text.strip():
      logging.warning('Skipping empty document on line %d of %s.', n, path)
      continue
    docs.append(Document(id=doc_id, text=text))
  logging.info('Loaded %d documents from %s.', len(docs), os.fspath(path))
  return docs


def build_vocab(docs: Iterable[Document], cap: int = 8192) -> Vocab:
  """Builds a frequency-ranked vocabulary.

  Args:
    docs: documents to count words in.
    cap: maximum vocabulary size including the reserved tokens. Must be at
      least constants.NUM_RESERVED + 1.

  Returns:
    Vocab holding the reserved tokens followed by the (cap - NUM_RESERVED)
    most frequent words. Frequency ties are broken lexicographically. Words
    spelled like a reserved token are never added.

  Raises:
    ValueError: if cap is too small or the corpus contains no words.
  """
  if cap < constants.NUM_RESERVED + 1:
    raise ValueError(
        f'Vocabulary cap must be at least {constants.NUM_RESERVED + 1}, '
        f'got {cap}.')
  counts = collections.Counter()
  for doc in docs:
    counts.update(tokenize(doc.text))
  for token in constants.RESERVED_TOKENS:
    counts.pop(token, None)
  if not counts:
    raise ValueError('Cannot build a vocabulary from an empty corpus.')
  ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
  words = [word for word, _ in ranked[:cap - constants.NUM_RESERVED]]
  return Vocab(cap=cap, tokens=constants.RESERVED_TOKENS + tuple(words))


def encode(vocab: Vocab, text: str) -> np.ndarray:
  """Maps text to token ids. Unknown and reserved-looking words map to UNK."""
  ids = []
  for word in tokenize(text):
    idx = vocab.token_to_id.get(word, constants.UNK_ID)
    if idx < constants.NUM_RESERVED:
      idx = constants.UNK_ID
    ids.append(idx)
  return np.asarray(ids, dtype=np.int32)


def decode(vocab: Vocab, ids: Iterable[int], lenient: bool = False) -> str:
  """Maps token ids back to space-separated text.

  Args:
    vocab: the vocabulary.
    ids: token ids.
    lenient: render ids beyond the vocabulary as UNK instead of failing. Model
      output can hold such ids when vocab_size exceeds the vocabulary.

  Raises:
    ValueError: if an id is negative or (unless lenient) not smaller than the
      vocabulary size.
  """
  words = []
  for idx in ids:
    idx = int(idx)
    if lenient and idx >= len(vocab):
      idx = constants.UNK_ID
    if not 0 <= idx < len(vocab):
      raise ValueError(
          f'Token id {idx} out of range for vocabulary of size {len(vocab)}.')
    words.append(vocab.tokens[idx])
  return ' '.join(words)
