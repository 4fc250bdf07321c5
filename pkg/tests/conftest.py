"""Shared fixtures: generated categories and loaded banks."""

import json

import pytest

from compvad.pipeline import DetectionConfig, build_reference_bank
from compvad.synthetic import CategorySpec, build_category
from compvad.tensor_store import ReferenceBankManifest, load_sample


def load_fixture_config(fixture):
    cfg = DetectionConfig.from_dict(
        json.loads(fixture.config_path.read_text())["detection"])
    manifest = ReferenceBankManifest.from_path(fixture.bank_manifest)
    return cfg.with_overrides(manifest.config_overrides)


def load_fixture_bank(fixture, config=None):
    manifest = ReferenceBankManifest.from_path(fixture.bank_manifest)
    config = config or load_fixture_config(fixture)
    refs = [load_sample(m) for m in manifest.samples]
    return build_reference_bank(refs, config, category=manifest.category), refs


@pytest.fixture(scope="session")
def basic_category(tmp_path_factory):
    """Two references plus one query of each kind."""
    root = tmp_path_factory.mktemp("basic_cat")
    return build_category(root, query_kinds=("normal", "structural", "logical"))


@pytest.fixture(scope="session")
def basic_bank(basic_category):
    bank, refs = load_fixture_bank(basic_category)
    return bank, refs, load_fixture_config(basic_category)


@pytest.fixture()
def small_spec():
    return CategorySpec(n_refs=1, seed=3)
