# Copyright (c) The mipcnet authors.
#
# This source code is licensed under the Apache License, Version 2.0
# found in the LICENSE file in the root directory of this source tree.

"""Python bindings for the mipcnet C++ core."""

import json

from . import _core
from ._core import RuntimeFailure, ValidationError, hausdorff, overlap_metrics

__version__ = _core.__version__

__all__ = [
    "Model",
    "RuntimeFailure",
    "ValidationError",
    "ablation_markdown",
    "config_hash",
    "gradcheck",
    "hausdorff",
    "overlap_metrics",
    "preset_config",
    "synthetic_dataset",
    "train",
]


def _dumps(obj):
    return json.dumps(obj or {})


def preset_config(name):
    return json.loads(_core.preset_config(name))


def config_hash(obj):
    return _core.config_hash(json.dumps(obj))


def synthetic_dataset(**spec):
    """List of (id, image (C, H, W) float32, labels (H, W) int32)."""
    return _core.synthetic_dataset(_dumps(spec))


def gradcheck(include_model=False, seed=0):
    return _core.gradcheck(include_model, seed)


def ablation_markdown(table):
    return _core.ablation_markdown(json.dumps(table))


class Model:
    def __init__(self, config=None, seed=0, _impl=None):
        self._impl = _impl if _impl is not None else _core.Model(_dumps(config or preset_config("tiny")), seed)

    @classmethod
    def load(cls, path):
        return cls(_impl=_core.Model.load(str(path)))

    @property
    def config(self):
        return json.loads(self._impl.config_json())

    @property
    def parameter_count(self):
        return self._impl.parameter_count

    def forward(self, images):
        return self._impl.forward(images)

    def predict(self, images):
        return self._impl.predict(images)

    def save(self, path):
        self._impl.save(str(path))

    def evaluate(self, **data_spec):
        return json.loads(self._impl.evaluate_json(_dumps(data_spec)))


def train(model=None, train=None, data=None):
    """Returns (Model, per-iteration losses)."""
    impl, losses = _core.train(_dumps(model or preset_config("tiny")), _dumps(train), _dumps(data))
    return Model(_impl=impl), losses
