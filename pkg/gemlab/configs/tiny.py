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

"""Test-sized model and schedule."""

from gemlab import base_config


def get_config():
  cfg = base_config.default()
  cfg.model.n_layers = 2
  cfg.model.n_heads = 2
  cfg.model.d_model = 16
  cfg.model.d_ff = 32
  cfg.model.vocab_size = 128
  cfg.model.max_positions = 64
  cfg.model.dropout_rate = 0.0
  cfg.vocab.cap = 128
  cfg.train.batch_size = 4
  cfg.train.max_seq_len = 32
  cfg.train.total_steps = 6
  cfg.train.switch_step = 3
  cfg.train.lr_ntp = 1.e-3
  cfg.train.lr_cl = 1.e-3
  cfg.log.stats_frequency = 1
  cfg.log.save_frequency = 2
  cfg.ablation.base_steps = 2
  cfg.ablation.steps = 2
  cfg.eval.num_docs = 20
  cfg.eval.num_sts_pairs = 20
  cfg.synthetic.num_docs = 40
  cfg.synthetic.num_rows = 80
  cfg.synthetic.min_len = 5
  cfg.synthetic.max_len = 12
  cfg.synthetic.num_topics = 4
  cfg.synthetic.topic_words = 10
  cfg.synthetic.common_words = 10
  return cfg
