"""Tasks for use with Invoke.

(c) 2022 Calvin Remsburg
Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at
  http://www.apache.org/licenses/LICENSE-2.0
Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
"""

import os
from invoke import task

# ---------------------------------------------------------------------------
# RUN PARAMETERS
# ---------------------------------------------------------------------------
CONFIG = os.getenv("ECG_EAT_CONFIG", "")
OUTPUT = os.getenv("ECG_EAT_OUTPUT", "runs/default")
PACKAGE = "ecg_eat"


def _flags(config, out, seed=None):
    flags = f"--out {out}"
    if config:
        flags += f" --config {config}"
    if seed is not None:
        flags += f" --seed {seed}"
    return flags


# ---------------------------------------------------------------------------
# LINT
# ---------------------------------------------------------------------------
@task
def lint(context):
    # flake8 for style, pylint for errors only
    context.run(f"flake8 --max-line-length 128 {PACKAGE}", pty=True)
    context.run(f"pylint --errors-only {PACKAGE}", pty=True)


@task
def format(context):  # pylint: disable=redefined-builtin
    # Rewrite in place with black
    context.run(f"black {PACKAGE} tasks.py", pty=True)


# ---------------------------------------------------------------------------
# TESTS
# ---------------------------------------------------------------------------
@task
def test(context):
    # Fast suite, slow trend checks deselected
    print("Run the test suite")
    context.run("pytest", pty=True)


@task(name="test-slow")
def test_slow(context):
    # Multi-seed trend checks only
    print("Run the slow trend checks")
    context.run('pytest -m slow', pty=True)


# ---------------------------------------------------------------------------
# PIPELINE
# ---------------------------------------------------------------------------
@task
def gen(context, config=CONFIG, out=OUTPUT, seed=None):
    # Synthesize the dataset
    context.run(f"ecg-eat gen {_flags(config, out, seed)}", pty=True)


@task
def run(context, config=CONFIG, out=OUTPUT, seed=None, stages=""):
    # Run every pipeline stage, or the space separated subset given
    stage_flag = f" --stages {stages}" if stages else ""
    context.run(f"ecg-eat run {_flags(config, out, seed)}{stage_flag}", pty=True)


@task
def report(context, config=CONFIG, out=OUTPUT, seed=None):
    # Consolidate a completed run
    context.run(f"ecg-eat report {_flags(config, out, seed)}", pty=True)


# ---------------------------------------------------------------------------
# DOCUMENTATION
# ---------------------------------------------------------------------------
@task
def docs(context):
    # Serve the documentation site locally
    context.run("mkdocs serve", pty=True)
