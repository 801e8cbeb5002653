"""Bundled infrastructure models, rule configs and golden files."""

from importlib import resources


def fixture_path(name: str):
    return resources.files(__name__).joinpath(name)


def read_fixture(name: str) -> bytes:
    return fixture_path(name).read_bytes()
