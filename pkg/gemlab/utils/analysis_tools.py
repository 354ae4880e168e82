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

"""Tools for reading and analysing training logs and ablation results."""

import numpy as np
import pandas as pd

PHASES = {0.0: 'ntp', 1.0: 'contrastive'}


def load_stats(path: str) -> pd.DataFrame:
  """Reads a train_stats.csv file and labels each step with its phase."""
  df = pd.read_csv(path)
  df['phase'] = df['alpha'].map(PHASES)
  return df


def summarize_phases(df: pd.DataFrame, burn_in: int = 0) -> pd.DataFrame:
  """Summarises the losses of each training phase.

  Args:
    df: training statistics as returned by load_stats.
    burn_in: number of leading steps of each phase to ignore.

  Returns:
    One row per phase, in order of appearance, with the number of steps, the
    first and last step and the first, last and mean total loss.
  """
  rows = []
  for phase, group in df.groupby('phase', sort=False):
    group = group.sort_values('step').iloc[burn_in:]
    if group.empty:
      continue
    rows.append({
        'phase': phase,
        'steps': len(group),
        'first_step': int(group['step'].iloc[0]),
        'last_step': int(group['step'].iloc[-1]),
        'first_loss': float(group['loss_total'].iloc[0]),
        'last_loss': float(group['loss_total'].iloc[-1]),
        'mean_loss': float(group['loss_total'].mean()),
    })
  return pd.DataFrame(rows)


def pivot_ablation(df: pd.DataFrame) -> pd.DataFrame:
  """Turns ablation rows into one row per (study, variant), one metric column.

  Variants keep the order in which they were written.
  """
  order = df[['study', 'variant']].drop_duplicates()
  table = df.pivot_table(index=['study', 'variant'], columns='metric',
                         values='value', aggfunc='first')
  table = table.reindex(pd.MultiIndex.from_frame(order))
  table.columns.name = None
  return table


def best_variant(df: pd.DataFrame, study: str, metric: str,
                 maximize: bool = True) -> str:
  """Name of the variant of a study with the best value of metric."""
  rows = df[(df['study'] == study) & (df['metric'] == metric)]
  if rows.empty:
    raise ValueError(f'No {metric!r} rows for study {study!r}.')
  index = np.argmax(rows['value'].values) if maximize else np.argmin(
      rows['value'].values)
  return str(rows['variant'].iloc[index])
