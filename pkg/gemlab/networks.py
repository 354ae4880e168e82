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

"""Miniature decoder-only transformer with injectable attention masks."""

import functools
from typing import Any, Iterable, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import attr
import chex
from gemlab import constants
from gemlab import masking
from gemlab import network_blocks
import jax
import jax.numpy as jnp
import ml_collections
import numpy as np


# Recursive types are not yet supported in pytype - b/109648354.
# pytype: disable=not-supported-yet
ParamTree = Union[jnp.ndarray, Iterable['ParamTree'], Mapping[Any, 'ParamTree']]
# pytype: enable=not-supported-yet
Param = Mapping[str, jnp.ndarray]

_DTYPES = ('float32', 'float64')


def _positive(instance, attribute, value):
  del instance  # unused
  if value <= 0:
    raise ValueError(f'{attribute.name} must be positive, got {value}.')


## Network settings ##


@attr.s(auto_attribs=True, frozen=True, kw_only=True)
class ModelConfig:
  """Architecture of the transformer.

  Attributes:
    n_layers: number of transformer blocks.
    n_heads: number of attention heads per block.
    d_model: width of the residual stream.
    d_ff: width of the hidden layer of each MLP.
    vocab_size: number of token ids.
    max_positions: size of the learned positional embedding table.
    dropout_rate: residual dropout rate used in training mode.
    seed: seed for parameter initialisation.
    dtype: floating point type of all parameters and activations.
  """
  n_layers: int = attr.ib(default=4, validator=_positive)
  n_heads: int = attr.ib(default=4, validator=_positive)
  d_model: int = attr.ib(default=128, validator=_positive)
  d_ff: int = attr.ib(default=512, validator=_positive)
  vocab_size: int = attr.ib(default=8192, validator=_positive)
  max_positions: int = attr.ib(default=512, validator=_positive)
  dropout_rate: float = attr.ib(default=0.1)
  seed: int = 42
  dtype: str = attr.ib(default='float32', validator=attr.validators.in_(_DTYPES))

  @dropout_rate.validator
  def _check_dropout(self, attribute, value):
    if not 0.0 <= value < 1.0:
      raise ValueError(f'{attribute.name} must lie in [0, 1), got {value}.')

  @property
  def head_dim(self) -> int:
    return self.d_model // self.n_heads

  @property
  def jnp_dtype(self):
    return jnp.dtype(self.dtype)

  @classmethod
  def from_config(cls, cfg: ml_collections.ConfigDict) -> 'ModelConfig':
    fields = attr.fields_dict(cls)
    return cls(**{key: cfg[key] for key in fields if key in cfg})

  def to_dict(self) -> Mapping[str, Any]:
    return attr.asdict(self)


@attr.s(auto_attribs=True)
class ModelState:
  """Transformer parameters together with the architecture they belong to.

  params holds the token and positional embedding tables, one mapping per
  block, the final layer norm, the (untied) output projection and the
  learnable contrastive temperature under 'temperature'.
  """
  config: ModelConfig
  params: ParamTree

  @property
  def temperature(self) -> float:
    return float(self.params['temperature'])


@chex.dataclass
class KVCacheSnapshot:
  """Keys and values of the special tokens, captured from every layer.

  Attributes:
    keys: shape (n_layers, k, n_heads, head_dim).
    values: shape (n_layers, k, n_heads, head_dim).
    positions: absolute positions m, ..., m+k-1 of the special tokens.
    k: number of special tokens.
    m: prefix length of the compressed sequence.
    last_logits: output logits of the last special token, shape (vocab_size,).
      These predict the first decoded token.
  """
  keys: jnp.ndarray
  values: jnp.ndarray
  positions: np.ndarray
  k: int
  m: int
  last_logits: jnp.ndarray


class Internals(NamedTuple):
  """Per-layer quantities recorded during a forward pass.

  Attributes:
    keys: shape (n_layers, T, n_heads, head_dim).
    values: shape (n_layers, T, n_heads, head_dim).
    attention: attention probabilities, shape (n_layers, n_heads, T, T).
    finite: whether the output of each layer is finite, shape (n_layers,).
  """
  keys: jnp.ndarray
  values: jnp.ndarray
  attention: jnp.ndarray
  finite: jnp.ndarray


## Network initialisation ##


def init_block(key: chex.PRNGKey, config: ModelConfig) -> Param:
  """Initialises one pre-norm transformer block."""
  dtype = config.jnp_dtype
  # Residual branches are scaled down with depth.
  residual_scale = 1.0 / np.sqrt(2.0 * config.n_layers)
  keys = jax.random.split(key, num=6)
  linear = functools.partial(network_blocks.init_linear_layer, dtype=dtype)
  return {
      'ln_attention': network_blocks.init_layer_norm(config.d_model, dtype),
      'attention': {
          'query': linear(keys[0], config.d_model, config.d_model),
          'key': linear(keys[1], config.d_model, config.d_model),
          'value': linear(keys[2], config.d_model, config.d_model),
          'output': linear(keys[3], config.d_model, config.d_model,
                           scale=residual_scale),
      },
      'ln_mlp': network_blocks.init_layer_norm(config.d_model, dtype),
      'mlp': {
          'hidden': linear(keys[4], config.d_model, config.d_ff),
          'output': linear(keys[5], config.d_ff, config.d_model,
                           scale=residual_scale),
      },
  }


def init_model(config: ModelConfig) -> ModelState:
  """Initialises a model deterministically from config.seed.

  Embedding tables and the output projection are drawn from N(0, 0.02^2);
  linear layers inside blocks use a 1/sqrt(fan-in) normal scale. The
  temperature starts at log 20.

  Raises:
    ValueError: if d_model is not divisible by n_heads.
  """
  if config.d_model % config.n_heads:
    raise ValueError(f'd_model ({config.d_model}) must be divisible by '
                     f'n_heads ({config.n_heads}).')
  dtype = config.jnp_dtype
  key = jax.random.PRNGKey(config.seed)
  key, token_key, position_key, output_key = jax.random.split(key, num=4)
  params = {
      'token_embedding': 0.02 * jax.random.normal(
          token_key, (config.vocab_size, config.d_model), dtype=dtype),
      'position_embedding': 0.02 * jax.random.normal(
          position_key, (config.max_positions, config.d_model), dtype=dtype),
      'layers': [],
      'ln_final': network_blocks.init_layer_norm(config.d_model, dtype),
      'unembed': {
          'w': 0.02 * jax.random.normal(
              output_key, (config.d_model, config.vocab_size), dtype=dtype),
          'b': jnp.zeros((config.vocab_size,), dtype=dtype),
      },
      'temperature': jnp.asarray(constants.TEMPERATURE_INIT, dtype=dtype),
  }
  for _ in range(config.n_layers):
    key, subkey = jax.random.split(key)
    params['layers'].append(init_block(subkey, config))
  return ModelState(config=config, params=params)


## Network layers ##


def _split_heads(x: jnp.ndarray, config: ModelConfig) -> jnp.ndarray:
  return jnp.reshape(x, x.shape[:-1] + (config.n_heads, config.head_dim))


def _project_qkv(params: Param, h: jnp.ndarray, config: ModelConfig):
  """Returns queries, keys and values of shape (..., n_heads, head_dim)."""
  q = network_blocks.linear_layer(h, **params['query'])
  k = network_blocks.linear_layer(h, **params['key'])
  v = network_blocks.linear_layer(h, **params['value'])
  return (_split_heads(q, config), _split_heads(k, config),
          _split_heads(v, config))


def _attend(q: jnp.ndarray, k: jnp.ndarray, v: jnp.ndarray,
            allowed: jnp.ndarray,
            config: ModelConfig) -> Tuple[jnp.ndarray, jnp.ndarray]:
  """Multi-head attention of queries (Tq, H, D) over keys (Tk, H, D).

  Returns:
    (output, probabilities): output has shape (Tq, d_model), probabilities
    shape (H, Tq, Tk). allowed has shape (Tq, Tk).
  """
  scale = 1.0 / np.sqrt(config.head_dim)
  scores = jnp.einsum('qhd,khd->hqk', q, k) * scale
  probs = network_blocks.masked_softmax(scores, allowed[None])
  out = jnp.einsum('hqk,khd->qhd', probs, v)
  return jnp.reshape(out, out.shape[:-2] + (config.d_model,)), probs


def _mlp(params: Param, h: jnp.ndarray) -> jnp.ndarray:
  h = network_blocks.linear_layer(h, **params['hidden'])
  h = jax.nn.gelu(h)
  return network_blocks.linear_layer(h, **params['output'])


def _embed(params: ParamTree, tokens: jnp.ndarray,
           positions: jnp.ndarray) -> jnp.ndarray:
  return (jnp.take(params['token_embedding'], tokens, axis=0) +
          jnp.take(params['position_embedding'], positions, axis=0))


def _readout(params: ParamTree, x: jnp.ndarray):
  hidden = network_blocks.layer_norm(x, **params['ln_final'])
  logits = network_blocks.linear_layer(hidden, **params['unembed'])
  return hidden, logits


def apply(params: ParamTree,
          tokens: jnp.ndarray,
          allowed: jnp.ndarray,
          positions: jnp.ndarray,
          config: ModelConfig,
          key: Optional[chex.PRNGKey] = None,
          ) -> Tuple[jnp.ndarray, jnp.ndarray, Internals]:
  """Evaluates the transformer on a single sequence.

  Args:
    params: network parameters.
    tokens: token ids, shape (T,).
    allowed: boolean attention mask, shape (T, T).
    positions: absolute positions, shape (T,).
    config: network architecture.
    key: PRNG state for dropout. If None, dropout is disabled (eval mode).

  Returns:
    (hidden, logits, internals): final-layer (normalised) hidden states of
    shape (T, d_model), logits of shape (T, vocab_size) and per-layer
    Internals.
  """
  rate = config.dropout_rate
  if key is not None:
    key, subkey = jax.random.split(key)
  else:
    subkey = None
  x = network_blocks.dropout(subkey, _embed(params, tokens, positions), rate)
  keys, values, attention, finite = [], [], [], []
  for layer in params['layers']:
    if key is not None:
      key, attn_key, mlp_key = jax.random.split(key, num=3)
    else:
      attn_key = mlp_key = None
    h = network_blocks.layer_norm(x, **layer['ln_attention'])
    q, k, v = _project_qkv(layer['attention'], h, config)
    out, probs = _attend(q, k, v, allowed, config)
    out = network_blocks.linear_layer(out, **layer['attention']['output'])
    x = x + network_blocks.dropout(attn_key, out, rate)
    h = network_blocks.layer_norm(x, **layer['ln_mlp'])
    x = x + network_blocks.dropout(mlp_key, _mlp(layer['mlp'], h), rate)
    keys.append(k)
    values.append(v)
    attention.append(probs)
    finite.append(jnp.all(jnp.isfinite(x)))
  hidden, logits = _readout(params, x)
  internals = Internals(
      keys=jnp.stack(keys),
      values=jnp.stack(values),
      attention=jnp.stack(attention),
      finite=jnp.stack(finite))
  return hidden, logits, internals


_apply_jit = jax.jit(apply, static_argnames='config')


def batch_apply(params: ParamTree,
                tokens: jnp.ndarray,
                allowed: jnp.ndarray,
                positions: jnp.ndarray,
                config: ModelConfig,
                keys: Optional[jnp.ndarray] = None):
  """apply() vmapped over a leading batch axis of tokens, masks and positions.

  keys, if given, holds one dropout PRNG state per sequence.
  """
  if keys is None:
    fn = lambda t, a, p: apply(params, t, a, p, config)
    return jax.vmap(fn)(tokens, allowed, positions)
  fn = lambda t, a, p, k: apply(params, t, a, p, config, k)
  return jax.vmap(fn)(tokens, allowed, positions, keys)


def _check_inputs(config: ModelConfig, tokens, mask, positions):
  tokens = np.asarray(tokens)
  mask = np.asarray(mask, dtype=bool)
  positions = np.asarray(positions)
  length = len(tokens)
  if mask.shape != (length, length) or positions.shape != (length,):
    raise ValueError(
        f'Inconsistent shapes: tokens {tokens.shape}, mask {mask.shape}, '
        f'positions {positions.shape}.')
  if length and (positions.max() >= config.max_positions or
                 positions.min() < 0):
    raise ValueError(f'Positions must lie in [0, {config.max_positions}), '
                     f'got [{positions.min()}, {positions.max()}].')
  if length and (tokens.max() >= config.vocab_size or tokens.min() < 0):
    raise ValueError(f'Token ids must lie in [0, {config.vocab_size}), '
                     f'got [{tokens.min()}, {tokens.max()}].')
  return tokens, mask, positions


def _check_finite(internals: Internals) -> None:
  finite = np.asarray(internals.finite)
  if not finite.all():
    layer = int(np.argmin(finite))
    raise FloatingPointError(f'Non-finite activations in layer {layer}.')


def forward_with_internals(
    state: ModelState,
    tokens,
    mask,
    positions,
    train_mode: bool = False,
    key: Optional[chex.PRNGKey] = None,
) -> Tuple[jnp.ndarray, jnp.ndarray, Internals]:
  """forward() which also returns the per-layer Internals."""
  tokens, mask, positions = _check_inputs(state.config, tokens, mask, positions)
  if train_mode:
    if key is None:
      raise ValueError('Training mode requires a PRNG key for dropout.')
  else:
    key = None
  hidden, logits, internals = _apply_jit(
      state.params, jnp.asarray(tokens), jnp.asarray(mask),
      jnp.asarray(positions), state.config, key)
  _check_finite(internals)
  return hidden, logits, internals


def forward(state: ModelState,
            tokens,
            mask,
            positions,
            train_mode: bool = False,
            key: Optional[chex.PRNGKey] = None,
            ) -> Tuple[jnp.ndarray, jnp.ndarray]:
  """Evaluates the transformer on one sequence.

  Args:
    state: model.
    tokens: token ids, shape (T,).
    mask: boolean attention mask, shape (T, T); True where query i may attend
      key j. Disallowed scores are set to -inf before the softmax.
    positions: absolute position of each token, shape (T,).
    train_mode: if true, apply dropout using key.
    key: PRNG state, required in training mode.

  Returns:
    (hidden, logits) of shapes (T, d_model) and (T, vocab_size).

  Raises:
    ValueError: on inconsistent shapes or a position beyond max_positions.
    FloatingPointError: if a layer produces non-finite activations. The message
      names the first such layer.
  """
  hidden, logits, _ = forward_with_internals(
      state, tokens, mask, positions, train_mode, key)
  return hidden, logits


## Bottleneck KV cache ##


def capture_special_kv(state: ModelState,
                       seq: masking.SegmentedSequence) -> KVCacheSnapshot:
  """Runs seq through the bottleneck mask and keeps the special tokens' K/V.

  Raises:
    ValueError: if seq has no special tokens.
  """
  if seq.k < 1:
    raise ValueError('Cannot capture a KV cache without special tokens.')
  mask = masking.build_gem_mask(*seq.segments)
  positions = np.arange(len(seq))
  _, logits, internals = forward_with_internals(
      state, seq.tokens, mask, positions)
  special = slice(seq.m, seq.m + seq.k)
  return KVCacheSnapshot(
      keys=internals.keys[:, special],
      values=internals.values[:, special],
      positions=np.arange(seq.m, seq.m + seq.k),
      k=seq.k,
      m=seq.m,
      last_logits=logits[seq.m + seq.k - 1])


def _check_snapshot(config: ModelConfig, cache: KVCacheSnapshot) -> None:
  expected = (config.n_layers, cache.k, config.n_heads, config.head_dim)
  if cache.keys.shape != expected or cache.values.shape != expected:
    raise ValueError(f'KV cache shapes {cache.keys.shape}/{cache.values.shape} '
                     f'do not match the model, expected {expected}.')
  positions = np.asarray(cache.positions)
  if len(positions) != cache.k or np.any(np.diff(positions) <= 0):
    raise ValueError('KV cache positions must be k strictly increasing values.')


def _decode_step(params: ParamTree, cache_keys: jnp.ndarray,
                 cache_values: jnp.ndarray, valid: jnp.ndarray,
                 token: jnp.ndarray, position: jnp.ndarray, slot: jnp.ndarray,
                 config: ModelConfig):
  """Feeds one token, attending to every valid cache slot and itself.

  Args:
    params: network parameters.
    cache_keys: shape (n_layers, S, n_heads, head_dim).
    cache_values: shape (n_layers, S, n_heads, head_dim).
    valid: shape (S,), which cache slots hold keys/values.
    token: token id.
    position: absolute position of the token.
    slot: cache slot the token's keys and values are written to.
    config: network architecture.

  Returns:
    (logits, cache_keys, cache_values, valid) after the step.
  """
  valid = valid.at[slot].set(True)
  x = _embed(params, token[None], position[None])
  for i, layer in enumerate(params['layers']):
    h = network_blocks.layer_norm(x, **layer['ln_attention'])
    q, k, v = _project_qkv(layer['attention'], h, config)
    cache_keys = cache_keys.at[i, slot].set(k[0])
    cache_values = cache_values.at[i, slot].set(v[0])
    out, _ = _attend(q, cache_keys[i], cache_values[i], valid[None], config)
    x = x + network_blocks.linear_layer(out, **layer['attention']['output'])
    h = network_blocks.layer_norm(x, **layer['ln_mlp'])
    x = x + _mlp(layer['mlp'], h)
  _, logits = _readout(params, x)
  return logits[0], cache_keys, cache_values, valid


_decode_step_jit = jax.jit(_decode_step, static_argnames='config')


class _Decoder:
  """Incremental decoder over a fixed-size KV buffer."""

  def __init__(self, state: ModelState, capacity: int,
               cache: Optional[KVCacheSnapshot] = None):
    config = state.config
    self._state = state
    shape = (config.n_layers, capacity, config.n_heads, config.head_dim)
    self._keys = jnp.zeros(shape, dtype=config.jnp_dtype)
    self._values = jnp.zeros(shape, dtype=config.jnp_dtype)
    self._valid = jnp.zeros((capacity,), dtype=bool)
    self._slot = 0
    if cache is not None:
      self._keys = self._keys.at[:, :cache.k].set(cache.keys)
      self._values = self._values.at[:, :cache.k].set(cache.values)
      self._valid = self._valid.at[:cache.k].set(True)
      self._slot = cache.k

  def step(self, token: int, position: int) -> jnp.ndarray:
    if position >= self._state.config.max_positions:
      raise ValueError(f'Position {position} exceeds max_positions '
                       f'{self._state.config.max_positions}.')
    logits, self._keys, self._values, self._valid = _decode_step_jit(
        self._state.params, self._keys, self._values, self._valid,
        jnp.asarray(token, dtype=jnp.int32),
        jnp.asarray(position, dtype=jnp.int32),
        jnp.asarray(self._slot, dtype=jnp.int32), self._state.config)
    self._slot += 1
    return logits


def _choose(logits: jnp.ndarray, greedy: bool,
            key: Optional[chex.PRNGKey]) -> int:
  if greedy:
    return int(jnp.argmax(logits))
  return int(jax.random.categorical(key, logits))


def decode_from_cache(state: ModelState,
                      cache: KVCacheSnapshot,
                      max_new: int,
                      greedy: bool = True,
                      key: Optional[chex.PRNGKey] = None) -> np.ndarray:
  """Generates tokens from a special-token KV cache with no other input.

  Generated token t sits at absolute position m+k+t and attends the cached
  special keys/values plus every previously generated token, i.e. exactly
  the suffix rows of the bottleneck mask. The first token is chosen from the
  last special token's logits.

  Args:
    state: model.
    cache: snapshot from capture_special_kv.
    max_new: maximum number of tokens to generate.
    greedy: if true, take the argmax at every step; otherwise sample.
    key: PRNG state for sampling. Defaults to one derived from the model seed.

  Returns:
    Generated token ids, excluding the terminating EOS if one was produced.

  Raises:
    ValueError: if max_new < 1, the cache does not match the model or the
      generated positions would exceed max_positions.
  """
  if max_new < 1:
    raise ValueError(f'max_new must be at least 1, got {max_new}.')
  _check_snapshot(state.config, cache)
  start = cache.m + cache.k
  if start + max_new > state.config.max_positions:
    raise ValueError(
        f'Decoding {max_new} tokens from position {start} exceeds '
        f'max_positions {state.config.max_positions}.')
  if not greedy and key is None:
    key = jax.random.PRNGKey(state.config.seed)
  decoder = _Decoder(state, capacity=cache.k + max_new, cache=cache)
  logits = cache.last_logits
  generated = []
  for t in range(max_new):
    if key is not None:
      key, subkey = jax.random.split(key)
    else:
      subkey = None
    token = _choose(logits, greedy, subkey)
    if token == constants.EOS_ID:
      break
    generated.append(token)
    if t + 1 < max_new:
      logits = decoder.step(token, start + t)
  return np.asarray(generated, dtype=np.int32)


def cached_suffix_logits(state: ModelState, cache: KVCacheSnapshot,
                         suffix: Sequence[int]) -> jnp.ndarray:
  """Feeds a known suffix through the cache one token at a time.

  Returns:
    Logits of shape (len(suffix), vocab_size); row t is the output at suffix
    token t (absolute position m+k+t). These equal the suffix rows of a full
    bottleneck-mask forward pass.
  """
  _check_snapshot(state.config, cache)
  start = cache.m + cache.k
  if start + len(suffix) > state.config.max_positions:
    raise ValueError(f'Suffix of length {len(suffix)} from position {start} '
                     f'exceeds max_positions {state.config.max_positions}.')
  decoder = _Decoder(state, capacity=cache.k + len(suffix), cache=cache)
  rows = [decoder.step(int(token), start + t) for t, token in enumerate(suffix)]
  return jnp.stack(rows)


def generate(state: ModelState, prompt: Sequence[int], max_new: int,
             stop_at_eos: bool = True) -> np.ndarray:
  """Greedy plain continuation of a prompt under the causal mask.

  Returns:
    The generated token ids (the prompt excluded).
  """
  if not len(prompt):
    raise ValueError('Prompt must contain at least one token.')
  if len(prompt) + max_new > state.config.max_positions:
    raise ValueError('Prompt plus continuation exceeds max_positions '
                     f'{state.config.max_positions}.')
  decoder = _Decoder(state, capacity=len(prompt) + max_new)
  for position, token in enumerate(prompt):
    logits = decoder.step(int(token), position)
  generated = []
  for t in range(max_new):
    token = int(jnp.argmax(logits))
    if stop_at_eos and token == constants.EOS_ID:
      break
    generated.append(token)
    if t + 1 < max_new:
      logits = decoder.step(token, len(prompt) + t)
  return np.asarray(generated, dtype=np.int32)
