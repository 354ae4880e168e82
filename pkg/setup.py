# Copyright 2024 The gemlab Authors.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     https://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
# ============================================================================
"""Setup for pip package."""

import unittest

from setuptools import find_packages
from setuptools import setup

REQUIRED_PACKAGES = [
    'absl-py',
    'attrs',
    'chex',
    'jax',
    'jaxlib',
    'ml-collections',
    'optax',
    'numpy',
    'pandas',
    'scipy',
    'typing_extensions',
]


def gemlab_test_suite():
  test_loader = unittest.TestLoader()
  test_suite = test_loader.discover('gemlab', pattern='*_test.py')
  return test_suite


setup(
    name='gemlab',
    version='0.1',
    description='Text embeddings from decoder-only language models through '
    'special-token attention bottlenecks',
    author='The gemlab Authors',
    # Contained modules and scripts.
    scripts=['bin/gem'],
    packages=find_packages(),
    install_requires=REQUIRED_PACKAGES,
    extras_require={'testing': ['flake8', 'pylint', 'pytest', 'pytype']},
    platforms=['any'],
    license='Apache 2.0',
    test_suite='setup.gemlab_test_suite',
)
