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

"""Synthetic retrieval, similarity and perplexity evaluations."""

from typing import Callable, Dict, List, Optional, Sequence, Tuple

from absl import logging
import attr
from gemlab import batching
from gemlab import corpus
from gemlab import embedder
from gemlab import loss as gem_loss
from gemlab import masking
from gemlab import networks
from gemlab.utils import statistics
import numpy as np

SUITES = ('retrieval', 'sts', 'ppl')
OVERLAP_RATIOS = (0.0, 0.25, 0.5, 0.75, 1.0)
MIN_DOCS = 10
MIN_DOC_TOKENS = 4
MIN_STS_PAIRS = 20
NDCG_CUTOFF = 10

EmbedFn = Callable[[str], np.ndarray]


@attr.s(auto_attribs=True, frozen=True)
class RetrievalSet:
  """Documents and noisy queries, each query built from one document.

  Attributes:
    corpus_docs: (id, text) of every document.
    queries: (query text, id of the document it came from).
  """
  corpus_docs: Tuple[Tuple[str, str], ...] = attr.ib(converter=tuple)
  queries: Tuple[Tuple[str, str], ...] = attr.ib(converter=tuple)

  def __attrs_post_init__(self):
    ids = {doc_id for doc_id, _ in self.corpus_docs}
    golds = [gold for _, gold in self.queries]
    if not set(golds) <= ids:
      raise ValueError('Every query must point at a corpus document.')
    if len(set(golds)) != len(golds):
      raise ValueError('Queries must come from distinct documents.')


@attr.s(auto_attribs=True, frozen=True)
class StsSet:
  """(text_a, text_b, gold) pairs; gold is the share of text_b taken from a."""
  pairs: Tuple[Tuple[str, str, float], ...] = attr.ib(converter=tuple)


def _distinct_documents(docs: Sequence[corpus.Document],
                        min_tokens: int) -> List[Tuple[str, List[str]]]:
  """(id, words) of documents with distinct text and at least min_tokens."""
  seen = set()
  kept = []
  for doc in docs:
    words = corpus.tokenize(doc.text)
    if len(words) < min_tokens:
      logging.warning('Skipping document %s with %d token(s).', doc.id,
                      len(words))
      continue
    text = ' '.join(words)
    if text in seen:
      continue
    seen.add(text)
    kept.append((doc.id, words))
  return kept


def _drop_words(words: Sequence[str], rate: float,
                rng: np.random.Generator) -> List[str]:
  keep = rng.random(len(words)) >= rate
  if not keep.any():
    keep[rng.integers(len(words))] = True
  return [word for word, kept in zip(words, keep) if kept]


def make_retrieval_set(docs: Sequence[corpus.Document],
                       noise_rate: float,
                       rng: np.random.Generator,
                       max_docs: Optional[int] = None) -> RetrievalSet:
  """Builds one query per document by deleting words at noise_rate.

  Args:
    docs: documents; ones with fewer than 4 tokens and repeated texts are
      skipped.
    noise_rate: per-word deletion probability, in [0, 1). At least one word is
      kept.
    rng: source of the document sample and the deletions.
    max_docs: if given, a random subset of this many documents is used.

  Raises:
    ValueError: if fewer than 10 usable documents remain, or noise_rate is out
      of range.
  """
  if not 0.0 <= noise_rate < 1.0:
    raise ValueError(f'noise_rate must lie in [0, 1), got {noise_rate}.')
  kept = _distinct_documents(docs, MIN_DOC_TOKENS)
  if max_docs is not None and len(kept) > max_docs:
    chosen = np.sort(rng.choice(len(kept), size=max_docs, replace=False))
    kept = [kept[i] for i in chosen]
  if len(kept) < MIN_DOCS:
    raise ValueError(
        f'Retrieval needs at least {MIN_DOCS} documents, got {len(kept)}.')
  corpus_docs = [(doc_id, ' '.join(words)) for doc_id, words in kept]
  queries = [(' '.join(_drop_words(words, noise_rate, rng)), doc_id)
             for doc_id, words in kept]
  return RetrievalSet(corpus_docs=corpus_docs, queries=queries)


def _embed_all(embed_fn: EmbedFn, items: Sequence[Tuple[str, str]],
               what: str) -> np.ndarray:
  """Embeds (name, text) items and L2-normalises the rows."""
  rows = []
  for name, text in items:
    try:
      vector = np.asarray(embed_fn(text), dtype=np.float64)
    except (ValueError, FloatingPointError) as e:
      raise ValueError(f'Failed to embed {what} {name}: {e}') from e
    norm = np.linalg.norm(vector)
    if not np.isfinite(norm) or norm == 0:
      raise ValueError(f'Embedding of {what} {name} has zero or non-finite '
                       'norm.')
    rows.append(vector / norm)
  return np.stack(rows)


def gold_ranks(similarities: np.ndarray, doc_ids: Sequence[str],
               gold: Sequence[str]) -> np.ndarray:
  """1-based rank of each query's gold document.

  Documents are ordered by decreasing similarity, ties broken by doc id.
  """
  ids = np.asarray(doc_ids)
  ranks = []
  for row, gold_id in zip(similarities, gold):
    order = np.lexsort((ids, -row))
    ranks.append(int(np.nonzero(ids[order] == gold_id)[0][0]) + 1)
  return np.asarray(ranks)


def eval_retrieval(embed_fn: EmbedFn,
                   retrieval_set: RetrievalSet) -> Dict[str, float]:
  """Ranks documents per query by cosine similarity.

  Returns:
    {'recall@1': share of queries whose top document is gold,
     'ndcg@10': mean single-relevant nDCG@10}.

  Raises:
    ValueError: if the set has no queries, or embedding fails. The message
      names the document or query.
  """
  if not retrieval_set.queries:
    raise ValueError('Retrieval set has no queries.')
  doc_ids = [doc_id for doc_id, _ in retrieval_set.corpus_docs]
  docs = _embed_all(embed_fn, retrieval_set.corpus_docs, 'document')
  queries = _embed_all(
      embed_fn, [(gold, text) for text, gold in retrieval_set.queries],
      'query for document')
  ranks = gold_ranks(queries @ docs.T, doc_ids,
                     [gold for _, gold in retrieval_set.queries])
  return {
      'recall@1': float(np.mean(ranks == 1)),
      'ndcg@10': float(np.mean(
          [statistics.ndcg_single(rank, NDCG_CUTOFF) for rank in ranks])),
  }


def make_sts_set(docs: Sequence[corpus.Document],
                 rng: np.random.Generator,
                 num_pairs: int = 100) -> StsSet:
  """Builds pairs by splicing two documents.

  For documents A and B cut to a common length L and a ratio r, text_a is
  A[:L] and text_b is A[:c] + B[c:L] with c = round(r L); gold is c / L.
  Ratios cycle through 0, 0.25, 0.5, 0.75 and 1.

  Raises:
    ValueError: if num_pairs < 20 or fewer than two usable documents exist.
  """
  if num_pairs < MIN_STS_PAIRS:
    raise ValueError(
        f'STS needs at least {MIN_STS_PAIRS} pairs, got {num_pairs}.')
  kept = _distinct_documents(docs, MIN_DOC_TOKENS)
  if len(kept) < 2:
    raise ValueError('STS needs at least two distinct documents.')
  pairs = []
  for i in range(num_pairs):
    a, b = rng.choice(len(kept), size=2, replace=False)
    words_a, words_b = kept[a][1], kept[b][1]
    length = min(len(words_a), len(words_b))
    cut = int(round(OVERLAP_RATIOS[i % len(OVERLAP_RATIOS)] * length))
    text_a = ' '.join(words_a[:length])
    text_b = ' '.join(words_a[:cut] + words_b[cut:length])
    pairs.append((text_a, text_b, cut / length))
  return StsSet(pairs=pairs)


def eval_sts(embed_fn: EmbedFn, sts_set: StsSet) -> float:
  """Spearman correlation of cosine similarity with the gold ratio.

  Raises:
    ValueError: if the similarities (or gold values) are constant.
  """
  sims = []
  for i, (text_a, text_b, _) in enumerate(sts_set.pairs):
    a, b = _embed_all(embed_fn, [(f'{i}a', text_a), (f'{i}b', text_b)],
                      'pair')
    sims.append(float(a @ b))
  return statistics.spearman(sims, [gold for _, _, gold in sts_set.pairs])


def eval_perplexity(state: networks.ModelState, vocab: corpus.Vocab,
                    texts: Sequence[str]) -> float:
  """exp of the mean next-token cross-entropy under causal masking.

  Texts with fewer than two tokens are skipped; longer ones are cut to
  max_positions.

  Raises:
    ValueError: if no text has two tokens.
  """
  total, count = 0.0, 0
  for text in texts:
    tokens = corpus.encode(vocab, text)[:state.config.max_positions]
    if len(tokens) < 2:
      logging.warning('Skipping text with %d token(s).', len(tokens))
      continue
    seq = masking.plain_sequence(tokens)
    arrays = batching.pad_sequence(
        seq, batching.bucket_length(len(seq), state.config.max_positions))
    _, logits = networks.forward(
        state, arrays.tokens, arrays.allowed, arrays.positions)
    ce = gem_loss.per_position_cross_entropy(
        logits[:len(tokens) - 1], arrays.tokens[1:len(tokens)])
    total += float(np.sum(np.asarray(ce, dtype=np.float64)))
    count += len(tokens) - 1
  if not count:
    raise ValueError('No text with at least two tokens to score.')
  return float(np.exp(total / count))


def evaluate(suite: str,
             state: networks.ModelState,
             vocab: corpus.Vocab,
             docs: Sequence[corpus.Document],
             seed: int,
             k: int = 1,
             pooling: str = 'mean',
             noise_rate: float = 0.3,
             num_docs: Optional[int] = 200,
             num_sts_pairs: int = 100,
             baseline: bool = False) -> List[Tuple[str, float]]:
  """Runs one suite and returns (metric, value) rows.

  With baseline, retrieval and sts also score the vanilla mean-pool
  embeddings under metric names prefixed 'baseline_'.
  """
  if suite not in SUITES:
    raise ValueError(f'Unknown suite {suite!r}; expected one of {SUITES}.')
  rng = np.random.default_rng(seed)
  if suite == 'ppl':
    texts = [doc.text for doc in docs]
    if num_docs:
      texts = texts[:num_docs]
    return [('perplexity', eval_perplexity(state, vocab, texts))]
  arms = [('', embedder.make_embed_fn(state, vocab, k, pooling))]
  if baseline:
    arms.append(('baseline_', embedder.make_embed_fn(
        state, vocab, pooling=embedder.BASELINE_POOLING)))
  rows = []
  if suite == 'retrieval':
    retrieval_set = make_retrieval_set(docs, noise_rate, rng, num_docs)
    for prefix, embed_fn in arms:
      metrics = eval_retrieval(embed_fn, retrieval_set)
      rows.extend((prefix + name, value) for name, value in metrics.items())
  else:
    sts_set = make_sts_set(docs, rng, num_sts_pairs)
    for prefix, embed_fn in arms:
      rows.append((prefix + 'spearman', eval_sts(embed_fn, sts_set)))
  return rows
