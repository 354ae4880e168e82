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

"""Constants shared across gemlab."""

import math

# Reserved vocabulary entries. They always occupy the lowest ids, in this order.
PAD_TOKEN = '<pad>'
UNK_TOKEN = '<unk>'
BOS_TOKEN = '<bos>'
EOS_TOKEN = '<eos>'
EMB_TOKEN = '<emb>'
RESERVED_TOKENS = (PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN, EMB_TOKEN)

PAD_ID = 0
UNK_ID = 1
BOS_ID = 2
EOS_ID = 3
EMB_ID = 4
NUM_RESERVED = len(RESERVED_TOKENS)

# Learnable contrastive temperature: initial value and clamp range.
TEMPERATURE_INIT = math.log(20.0)
TEMPERATURE_MIN = 0.0
TEMPERATURE_MAX = math.log(100.0)

# Upper bound on the training sequence length.
MAX_SEQ_LEN_CAP = 512

# Environment variable consulted for the default CLI seed.
SEED_ENV_VAR = 'GEM_SEED'
DEFAULT_SEED = 42
