"""Output directory setup and teardown

see https://behave.readthedocs.io/en/stable/fixtures.html
"""
import os
import shutil
import sys
import tempfile

HERE = os.path.dirname(__file__ or ".")
sys.path.append(os.path.join(HERE, ".."))

from behave import fixture, use_fixture


@fixture
def output_directory(context):
    """A directory for the files the command line writes.

    Set the userdata output to keep the files, otherwise they are removed.
    """
    configured = context.config.userdata.get("output", "")
    if configured:
        os.makedirs(configured, exist_ok=True)
        context.output = configured
        yield context.output
        return
    context.output = tempfile.mkdtemp(prefix="voltvar-")
    yield context.output
    shutil.rmtree(context.output, ignore_errors=True)


def before_all(context):
    use_fixture(output_directory, context)


def before_scenario(context, scenario):
    """Start each scenario from the default scenario."""
    context.specification = {}
    context.log = None
    context.suite = None
    context.result = None
