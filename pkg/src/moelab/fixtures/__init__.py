"""Bundled job-spec fixtures and calibration data."""
from __future__ import annotations

import json
from importlib import resources

from ..model import TrainingJobSpec

FIXTURE_NAMES = ("deepseek-v3", "qwen3-235b")
_FILES = {"deepseek-v3": "deepseek_v3.json", "qwen3-235b": "qwen3_235b.json"}


def load_fixture(name: str) -> TrainingJobSpec:
    if name not in _FILES:
        raise KeyError(f"unknown fixture {name!r}; available: {sorted(_FILES)}")
    text = resources.files(__package__).joinpath(_FILES[name]).read_text()
    return TrainingJobSpec.model_validate(json.loads(text))


def fixture_path(filename: str) -> str:
    return str(resources.files(__package__).joinpath(filename))
