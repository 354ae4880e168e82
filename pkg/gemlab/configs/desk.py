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

"""Desk-scale recipe: default toy model, p=0.8, contrastive from step 100."""

from gemlab import base_config


def get_config():
  """Returns config for a 2000-step run on the synthetic corpus."""
  cfg = base_config.default()
  cfg.train.total_steps = 2000
  cfg.train.max_seq_len = 64
  cfg.vocab.cap = 2048
  cfg.model.vocab_size = 2048
  cfg.model.max_positions = 128
  cfg.log.save_frequency = 500
  return cfg
