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

"""Command-line entry point: gem <command> [--flags]."""

import os
import sys
from typing import Callable, List, Mapping, Optional, Sequence

from absl import flags
from absl import logging
import attr
from gemlab import ablation
from gemlab import base_config
from gemlab import checkpoint
from gemlab import constants
from gemlab import corpus
from gemlab import embedder
from gemlab import evalkit
from gemlab import masking
from gemlab import networks
from gemlab import reconstruct
from gemlab import synthetic
from gemlab import train
from gemlab.utils import writers
import ml_collections
import numpy as np

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2

EVAL_SCHEMA = ('suite', 'metric', 'value', 'seed', 'ckpt')


@attr.s(auto_attribs=True, frozen=True)
class Command:
  name: str
  help: str
  define: Callable[[flags.FlagValues], None]
  run: Callable[[flags.FlagValues], None]


def _seed(fv: flags.FlagValues, fallback: Optional[int] = None) -> int:
  """--seed, else GEM_SEED, else fallback, else the default seed."""
  if fv['seed'].value is not None:
    return fv['seed'].value
  if os.environ.get(constants.SEED_ENV_VAR):
    try:
      return int(os.environ[constants.SEED_ENV_VAR])
    except ValueError as e:
      raise ValueError(f'{constants.SEED_ENV_VAR} must be an integer.') from e
  return constants.DEFAULT_SEED if fallback is None else fallback


def _define_seed(fv):
  flags.DEFINE_integer(
      'seed', None, f'Random seed. Defaults to ${constants.SEED_ENV_VAR}, '
      'then the config, then 42.', flag_values=fv)


def _define_config(fv):
  flags.DEFINE_string(
      'config', None, 'JSON config, Python config file or preset name.',
      flag_values=fv)
  flags.DEFINE_multi_string(
      'set', [], 'Override section.key=value; repeatable.', flag_values=fv)
  _define_seed(fv)


def _config(fv):
  cfg = base_config.load(fv.config) if fv.config else base_config.default()
  base_config.apply_overrides(cfg, fv.set)
  cfg.seed = _seed(fv, cfg.seed)
  return cfg


def _require(fv, *names):
  for name in names:
    flags.mark_flag_as_required(name, flag_values=fv)


def _define_checkpoint(fv):
  flags.DEFINE_string('ckpt', None, 'Checkpoint file.', flag_values=fv)
  _require(fv, 'ckpt')


def _restore(path: str) -> checkpoint.Checkpoint:
  restored = checkpoint.restore(path)
  if restored.vocab is None:
    raise ValueError(f'Checkpoint {path} has no vocabulary.')
  return restored


## build-vocab ##


def _define_build_vocab(fv):
  flags.DEFINE_string('corpus', None, 'Corpus file.', flag_values=fv)
  flags.DEFINE_string('out', None, 'Vocabulary JSON file.', flag_values=fv)
  flags.DEFINE_integer('cap', 8192, 'Maximum vocabulary size.', flag_values=fv)
  _require(fv, 'corpus', 'out')


def _build_vocab(fv):
  vocab = corpus.build_vocab(corpus.load_corpus(fv.corpus), cap=fv.cap)
  vocab.save(fv.out)
  writers.write_manifest(fv.out, {'command': 'build-vocab',
                                  'corpus': fv.corpus, 'cap': fv.cap})
  logging.info('Wrote %d tokens to %s', len(vocab), fv.out)


## train ##


def _define_train(fv):
  flags.DEFINE_string('corpus', None, 'Corpus file.', flag_values=fv)
  flags.DEFINE_string('save_path', None, 'Run directory.', flag_values=fv)
  flags.DEFINE_integer('steps', None, 'Overrides train.total_steps.',
                       flag_values=fv)
  flags.DEFINE_string('init_from', None,
                      'Checkpoint initialising the parameters.',
                      flag_values=fv)
  _define_config(fv)
  _require(fv, 'corpus')


def _train(fv):
  cfg = _config(fv)
  if fv.save_path is not None:
    cfg.log.save_path = fv.save_path
  if fv.steps is not None:
    cfg.train.total_steps = fv.steps
  if fv.init_from is not None:
    cfg.log.init_from = fv.init_from
  result = train.train(fv.corpus, cfg)
  print(result.checkpoint_path)


def _override(section: ml_collections.ConfigDict, fv: flags.FlagValues,
              names: Mapping[str, str]) -> ml_collections.ConfigDict:
  """Copies the flags that were given into section; names maps flag to key."""
  for flag, key in names.items():
    if fv[flag].value is not None:
      section[key] = fv[flag].value
  return section


## embed ##


def _define_embed(fv):
  _define_checkpoint(fv)
  flags.DEFINE_string('input', None, 'Texts to embed (JSONL or plain text).',
                      flag_values=fv)
  flags.DEFINE_string('out', None, 'Output JSONL file.', flag_values=fv)
  flags.DEFINE_integer('k', None, 'Overrides embed.k.', flag_values=fv)
  flags.DEFINE_enum('pooling', None,
                    embedder.POOLINGS + (embedder.BASELINE_POOLING,),
                    'Overrides embed.pooling.', flag_values=fv)
  _define_config(fv)
  _require(fv, 'input', 'out')


def _embed(fv):
  cfg = _config(fv)
  settings = _override(cfg.embed, fv, {'k': 'k', 'pooling': 'pooling'})
  restored = _restore(fv.ckpt)
  embed_fn = embedder.make_embed_fn(
      restored.state, restored.vocab, settings.k, settings.pooling)
  manifest = {'command': 'embed', 'ckpt': fv.ckpt, 'seed': cfg.seed,
              'embed': settings.to_dict(), 'config': restored.config}
  docs = corpus.load_corpus(fv.input)
  vectors = embedder.embed_texts(embed_fn, [doc.text for doc in docs])
  with writers.JsonlWriter(fv.out, manifest) as writer:
    for doc, vector in zip(docs, vectors):
      writer.write({'id': doc.id, 'dim': int(vector.shape[-1]),
                    'vector': [float(x) for x in vector]})
  logging.info('Wrote %d embeddings to %s', writer.count, fv.out)


## eval ##

_EVAL_FLAGS = {'suite': 'suite', 'noise_rate': 'noise_rate',
               'num_docs': 'num_docs', 'num_pairs': 'num_sts_pairs',
               'baseline': 'baseline'}


def _define_eval(fv):
  _define_checkpoint(fv)
  flags.DEFINE_string('corpus', None, 'Evaluation documents.', flag_values=fv)
  flags.DEFINE_enum('suite', None, evalkit.SUITES, 'Overrides eval.suite.',
                    flag_values=fv)
  flags.DEFINE_string('out', None, 'Metrics CSV.', flag_values=fv)
  flags.DEFINE_integer('k', None, 'Overrides embed.k.', flag_values=fv)
  flags.DEFINE_enum('pooling', None, embedder.POOLINGS,
                    'Overrides embed.pooling.', flag_values=fv)
  flags.DEFINE_float('noise_rate', None, 'Overrides eval.noise_rate.',
                     flag_values=fv)
  flags.DEFINE_integer('num_docs', None, 'Overrides eval.num_docs.',
                       flag_values=fv)
  flags.DEFINE_integer('num_pairs', None, 'Overrides eval.num_sts_pairs.',
                       flag_values=fv)
  flags.DEFINE_bool('baseline', None,
                    'Also score vanilla mean-pool embeddings; overrides '
                    'eval.baseline.', flag_values=fv)
  _define_config(fv)
  _require(fv, 'corpus', 'out')


def _eval(fv):
  cfg = _config(fv)
  embed = _override(cfg.embed, fv, {'k': 'k', 'pooling': 'pooling'})
  settings = _override(cfg.eval, fv, _EVAL_FLAGS)
  restored = _restore(fv.ckpt)
  rows = evalkit.evaluate(
      settings.suite, restored.state, restored.vocab,
      corpus.load_corpus(fv.corpus), cfg.seed, k=embed.k,
      pooling=embed.pooling, noise_rate=settings.noise_rate,
      num_docs=settings.num_docs, num_sts_pairs=settings.num_sts_pairs,
      baseline=settings.baseline)
  manifest = {'command': 'eval', 'ckpt': fv.ckpt, 'corpus': fv.corpus,
              'seed': cfg.seed, 'embed': embed.to_dict(),
              'eval': settings.to_dict(), 'config': restored.config}
  with writers.Writer(name=os.path.basename(fv.out), schema=EVAL_SCHEMA,
                      directory=os.path.dirname(fv.out),
                      manifest=manifest) as writer:
    for metric, value in rows:
      writer.write(0, suite=settings.suite, metric=metric, value=value,
                   seed=cfg.seed, ckpt=fv.ckpt)
      logging.info('%s %s: %.4f', settings.suite, metric, value)


## reconstruct ##


def _define_reconstruct(fv):
  _define_checkpoint(fv)
  flags.DEFINE_string('text', None, 'Text to compress.', flag_values=fv)
  flags.DEFINE_integer('k', None, 'Overrides reconstruct.k.', flag_values=fv)
  flags.DEFINE_integer('max_len', None, 'Overrides reconstruct.max_len.',
                       flag_values=fv)
  _define_config(fv)
  _require(fv, 'text')


def _reconstruct(fv):
  settings = _override(_config(fv).reconstruct, fv,
                       {'k': 'k', 'max_len': 'max_len'})
  restored = _restore(fv.ckpt)
  result = reconstruct.round_trip(
      restored.state, restored.vocab, fv.text, settings.k, settings.max_len)
  print(f'input: {result.input_text}')
  print(f'recovered: {result.recovered_text}')
  print(f'token_accuracy: {result.accuracy:.4f}')


## mask-dump ##


def _define_mask_dump(fv):
  flags.DEFINE_integer('m', None, 'Prefix length.', flag_values=fv)
  flags.DEFINE_integer('k', None, 'Number of special tokens.', flag_values=fv)
  flags.DEFINE_integer('n', None, 'Suffix length.', flag_values=fv)
  _define_seed(fv)
  _require(fv, 'm', 'k', 'n')


def _mask_dump(fv):
  print(masking.format_mask(masking.build_gem_mask(fv.m, fv.k, fv.n)))


## make-corpus ##


def _define_make_corpus(fv):
  flags.DEFINE_string('out', None, 'Output JSONL file.', flag_values=fv)
  flags.DEFINE_integer('num_docs', None, 'Overrides synthetic.num_docs.',
                       flag_values=fv)
  flags.DEFINE_integer('num_rows', None, 'Overrides synthetic.num_rows.',
                       flag_values=fv)
  _define_config(fv)
  _require(fv, 'out')


def _make_corpus(fv):
  cfg = _config(fv)
  if fv.num_docs is not None:
    cfg.synthetic.num_docs = fv.num_docs
  if fv.num_rows is not None:
    cfg.synthetic.num_rows = fv.num_rows
  s = cfg.synthetic
  docs = synthetic.make_corpus(
      s.num_docs, s.min_len, s.max_len, np.random.default_rng(cfg.seed),
      num_topics=s.num_topics, topic_words=s.topic_words,
      common_words=s.common_words, topic_share=s.topic_share)
  rows = synthetic.repeat_rows(docs, max(s.num_rows, s.num_docs))
  manifest = {'command': 'make-corpus', 'seed': cfg.seed,
              'synthetic': s.to_dict()}
  count = synthetic.write_corpus(rows, fv.out, manifest)
  logging.info('Wrote %d rows (%d distinct) to %s', count, len(docs), fv.out)


## ablate ##


def _define_ablate(fv):
  flags.DEFINE_string('corpus', None, 'Training corpus.', flag_values=fv)
  flags.DEFINE_string('eval_corpus', None,
                      'Held-out documents; defaults to the training corpus.',
                      flag_values=fv)
  flags.DEFINE_string('out_dir', None, 'Directory of the runs and results.',
                      flag_values=fv)
  _define_config(fv)
  _require(fv, 'corpus', 'out_dir')


def _ablate(fv):
  path = ablation.run_ablation(fv.corpus, _config(fv), fv.out_dir,
                               fv.eval_corpus)
  print(path)


## generate ##


def _define_generate(fv):
  _define_checkpoint(fv)
  flags.DEFINE_string('text', None, 'Prompt.', flag_values=fv)
  flags.DEFINE_integer('max_new', 20, 'Maximum number of new tokens.',
                       flag_values=fv)
  _define_seed(fv)
  _require(fv, 'text')


def _generate(fv):
  restored = _restore(fv.ckpt)
  prompt = corpus.encode(restored.vocab, fv.text)
  generated = networks.generate(restored.state, prompt, fv.max_new)
  print(corpus.decode(restored.vocab, generated, lenient=True))


COMMANDS = {
    command.name: command for command in (
        Command('build-vocab', 'Build a vocabulary from a corpus.',
                _define_build_vocab, _build_vocab),
        Command('train', 'Train or resume a model.', _define_train, _train),
        Command('embed', 'Embed texts with a checkpoint.', _define_embed,
                _embed),
        Command('eval', 'Run an evaluation suite.', _define_eval, _eval),
        Command('reconstruct', 'Compress a text and decode it back.',
                _define_reconstruct, _reconstruct),
        Command('mask-dump', 'Print a bottleneck attention mask.',
                _define_mask_dump, _mask_dump),
        Command('make-corpus', 'Write a synthetic corpus.',
                _define_make_corpus, _make_corpus),
        Command('ablate', 'Run ablation studies.', _define_ablate, _ablate),
        Command('generate', 'Continue a prompt greedily.', _define_generate,
                _generate),
    )
}


def usage() -> str:
  lines = ['usage: gem <command> [--flags]', '', 'commands:']
  lines += [f'  {name:<12} {command.help}'
            for name, command in COMMANDS.items()]
  return '\n'.join(lines)


def _setup_logging():
  logging.use_absl_handler()
  logging.get_absl_handler().python_handler.stream = sys.stderr
  logging.set_verbosity(logging.INFO)


def run(argv: Sequence[str]) -> int:
  """Runs a command.

  Args:
    argv: program name, command name and its flags.

  Returns:
    0 on success, 1 on a usage error, 2 if the command failed.
  """
  argv = list(argv)
  if len(argv) < 2 or argv[1] in ('-h', '--help', 'help'):
    print(usage(), file=sys.stderr)
    return EXIT_OK if len(argv) >= 2 else EXIT_USAGE
  command = COMMANDS.get(argv[1])
  if command is None:
    print(f'gem: unknown command {argv[1]!r}\n\n{usage()}', file=sys.stderr)
    return EXIT_USAGE
  fv = flags.FlagValues()
  command.define(fv)
  try:
    remaining: List[str] = fv([f'gem {command.name}'] + argv[2:])
    if len(remaining) > 1:
      raise flags.Error(f'unexpected arguments {remaining[1:]}')
  except flags.Error as e:
    print(f'gem {command.name}: {e}\n\n{fv.get_help()}', file=sys.stderr)
    return EXIT_USAGE
  _setup_logging()
  try:
    command.run(fv)
  except Exception as e:  # pylint: disable=broad-except
    logging.error('gem %s failed: %s: %s', command.name, type(e).__name__, e)
    return EXIT_FAILURE
  return EXIT_OK


def main():
  sys.exit(run(sys.argv))


if __name__ == '__main__':
  main()
