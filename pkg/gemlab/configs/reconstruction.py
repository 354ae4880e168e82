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

"""Reconstruction training on short documents.

Every segmented example replicates its text after a single special token and
the contrastive phase is disabled.
"""

from gemlab import base_config


def get_config():
  """Returns config for compress-and-recover training."""
  cfg = base_config.default()
  cfg.train.p_raw = 0.0
  cfg.train.reconstruct_share = 1.0
  cfg.train.contrastive = False
  cfg.train.k_specials = 1
  cfg.train.max_seq_len = 24
  cfg.train.total_steps = 3000
  cfg.train.lr_ntp = 1.e-3
  cfg.model.max_positions = 64
  cfg.model.dropout_rate = 0.0
  cfg.model.vocab_size = 512
  cfg.vocab.cap = 512
  cfg.synthetic.min_len = 5
  cfg.synthetic.max_len = 10
  cfg.reconstruct.k = 1
  cfg.reconstruct.max_len = 10
  return cfg
