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

"""Ablation studies: mix ratio, number of special tokens and objective.

All variants are finetuned from one plain language-model checkpoint trained
on the same corpus, and are compared on retrieval and on the change of
plain-text perplexity relative to that checkpoint.
"""

import os
from typing import Any, Dict, List, Mapping, Optional, Tuple

from absl import logging
import attr
from gemlab import base_config
from gemlab import checkpoint
from gemlab import corpus
from gemlab import evalkit
from gemlab import train
from gemlab.utils import analysis_tools
from gemlab.utils import writers
import ml_collections
import pandas as pd

SCHEMA = ('study', 'variant', 'metric', 'value')
STUDIES = ('mix', 'k', 'objective')


@attr.s(auto_attribs=True, frozen=True)
class Variant:
  """One finetuning run of a study, as overrides of the train section."""
  study: str
  name: str
  overrides: Tuple[Tuple[str, Any], ...]

  @property
  def run_name(self) -> str:
    return '_'.join(f'{key}-{value}' for key, value in self.overrides)


def plan_variants(cfg: ml_collections.ConfigDict) -> List[Variant]:
  """Lists the variants of the studies named in cfg.ablation.studies."""
  variants = []
  for study in cfg.ablation.studies:
    if study == 'mix':
      for p_raw in cfg.ablation.mix_ratios:
        variants.append(Variant(study, f'p={p_raw}', (('p_raw', p_raw),)))
    elif study == 'k':
      for k in cfg.ablation.k_values:
        variants.append(Variant(study, f'k={k}', (('k_specials', k),)))
    elif study == 'objective':
      variants.append(
          Variant(study, 'mixed_ntp', (('contrastive', False),)))
      variants.append(
          Variant(study, 'mixed_ntp+contrastive', (('contrastive', True),)))
    else:
      raise ValueError(f'Unknown study {study!r}; expected one of {STUDIES}.')
  return variants


def _run_config(cfg: ml_collections.ConfigDict, save_path: str, steps: int,
                init_from: str = '',
                overrides: Mapping[str, Any] = ()) -> ml_collections.ConfigDict:
  run_cfg = ml_collections.ConfigDict(cfg.to_dict())
  run_cfg.log.save_path = save_path
  run_cfg.log.init_from = init_from
  run_cfg.train.total_steps = steps
  for key, value in dict(overrides).items():
    run_cfg.train[key] = value
  return run_cfg


def train_base(corpus_path: str, cfg: ml_collections.ConfigDict,
               out_dir: str) -> str:
  """Trains the shared plain language model and returns its checkpoint."""
  run_cfg = _run_config(
      cfg, os.path.join(out_dir, 'base'), cfg.ablation.base_steps,
      overrides={'p_raw': 1.0, 'contrastive': False})
  return train.train(corpus_path, run_cfg).checkpoint_path


def _score(ckpt_path: str, k: int, pooling: str, eval_docs,
           cfg: ml_collections.ConfigDict) -> Dict[str, float]:
  restored = checkpoint.restore(ckpt_path)
  metrics = dict(evalkit.evaluate(
      'retrieval', restored.state, restored.vocab, eval_docs, cfg.seed, k,
      pooling, cfg.eval.noise_rate, cfg.eval.num_docs))
  metrics.update(evalkit.evaluate(
      'ppl', restored.state, restored.vocab, eval_docs, cfg.seed,
      num_docs=cfg.eval.num_docs))
  return metrics


def run_ablation(corpus_path: str,
                 cfg: ml_collections.ConfigDict,
                 out_dir: str,
                 eval_corpus_path: Optional[str] = None) -> str:
  """Runs the configured studies and writes ablation.csv into out_dir.

  Args:
    corpus_path: training corpus.
    cfg: configuration; cfg.ablation selects studies and budgets.
    out_dir: directory receiving one run directory per variant.
    eval_corpus_path: held-out documents; defaults to the training corpus.

  Returns:
    Path of the CSV with one row per (study, variant, metric). The
    'ppl_delta' metric is the perplexity change relative to the base model.
  """
  cfg = base_config.resolve(cfg)
  os.makedirs(out_dir, exist_ok=True)
  eval_docs = corpus.load_corpus(eval_corpus_path or corpus_path)
  base_ckpt = train_base(corpus_path, cfg, out_dir)
  base_metrics = _score(base_ckpt, cfg.train.k_specials, cfg.train.pooling,
                        eval_docs, cfg)
  logging.info('Base model: %s', base_metrics)

  finished: Dict[Tuple[Tuple[str, Any], ...], Dict[str, float]] = {}
  echo = train.manifest_config(cfg)
  with writers.Writer(name='ablation', schema=SCHEMA, directory=out_dir,
                      manifest=echo) as writer:
    for name, value in sorted(base_metrics.items()):
      writer.write(0, study='base', variant='plain_lm', metric=name,
                   value=value)
    for variant in plan_variants(cfg):
      if variant.overrides not in finished:
        run_cfg = _run_config(
            cfg, os.path.join(out_dir, variant.run_name), cfg.ablation.steps,
            init_from=base_ckpt, overrides=dict(variant.overrides))
        result = train.train(corpus_path, run_cfg)
        metrics = _score(result.checkpoint_path, run_cfg.train.k_specials,
                         run_cfg.train.pooling, eval_docs, cfg)
        metrics['ppl_delta'] = metrics['perplexity'] - base_metrics[
            'perplexity']
        finished[variant.overrides] = metrics
      metrics = finished[variant.overrides]
      logging.info('%s %s: %s', variant.study, variant.name, metrics)
      for name, value in sorted(metrics.items()):
        writer.write(0, study=variant.study, variant=variant.name,
                     metric=name, value=value)
  results = pd.read_csv(writer.filename)
  for study in cfg.ablation.studies:
    logging.info('Best %s variant by recall@1: %s', study,
                 analysis_tools.best_variant(results, study, 'recall@1'))
  return writer.filename
