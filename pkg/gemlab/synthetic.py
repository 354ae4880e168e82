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

"""Topic-structured synthetic corpora for desk-scale experiments."""

from typing import Any, List, Mapping, Optional, Sequence

from gemlab import corpus
from gemlab.utils import writers
import numpy as np

# Draws allowed per requested document before giving up on distinct texts.
MAX_DRAWS_PER_DOC = 100


def topic_word(topic: int, index: int) -> str:
  return f't{topic:02d}w{index:02d}'


def common_word(index: int) -> str:
  return f'c{index:02d}'


def make_corpus(num_docs: int,
                min_len: int,
                max_len: int,
                rng: np.random.Generator,
                num_topics: int = 25,
                topic_words: int = 40,
                common_words: int = 60,
                topic_share: float = 0.7) -> List[corpus.Document]:
  """Generates distinct documents, each drawn around one topic.

  Every word is taken from the document's topic vocabulary with probability
  topic_share and from a vocabulary shared by all topics otherwise.

  Args:
    num_docs: number of documents.
    min_len: minimum number of words per document.
    max_len: maximum number of words per document (inclusive).
    rng: source of randomness.
    num_topics: number of topics.
    topic_words: words per topic.
    common_words: words shared by all topics.
    topic_share: probability of a topic word.

  Returns:
    Documents with ids doc-00000, doc-00001, ...

  Raises:
    ValueError: if a length or topic_share is out of range, or fewer than
      num_docs distinct texts turn up in MAX_DRAWS_PER_DOC * num_docs draws.
  """
  if not 1 <= min_len <= max_len:
    raise ValueError(f'Need 1 <= min_len <= max_len, got {min_len}, {max_len}.')
  if not 0.0 <= topic_share <= 1.0:
    raise ValueError(f'topic_share must lie in [0, 1], got {topic_share}.')
  docs, seen = [], set()
  for _ in range(MAX_DRAWS_PER_DOC * num_docs):
    if len(docs) == num_docs:
      break
    topic = int(rng.integers(num_topics))
    length = int(rng.integers(min_len, max_len + 1))
    from_topic = rng.random(length) < topic_share
    topical = rng.integers(topic_words, size=length)
    shared = rng.integers(common_words, size=length)
    words = [topic_word(topic, t) if use_topic else common_word(c)
             for use_topic, t, c in zip(from_topic, topical, shared)]
    text = ' '.join(words)
    if text in seen:
      continue
    seen.add(text)
    docs.append(corpus.Document(id=f'doc-{len(docs):05d}', text=text))
  if len(docs) < num_docs:
    raise ValueError(
        f'Found {len(docs)} distinct documents of the {num_docs} requested '
        f'with min_len={min_len}, max_len={max_len}, num_topics={num_topics}, '
        f'topic_words={topic_words}, common_words={common_words}.')
  return docs


def repeat_rows(docs: Sequence[corpus.Document],
                num_rows: int) -> List[corpus.Document]:
  """Cycles through docs until num_rows rows are produced."""
  if not docs:
    raise ValueError('Cannot repeat an empty corpus.')
  return [docs[i % len(docs)] for i in range(num_rows)]


def write_corpus(docs: Sequence[corpus.Document], path: str,
                 manifest: Optional[Mapping[str, Any]] = None) -> int:
  """Writes docs as JSONL rows {"id": ..., "text": ...}; returns the count."""
  with writers.JsonlWriter(path, manifest) as writer:
    for doc in docs:
      writer.write({'id': doc.id, 'text': doc.text})
  return writer.count
