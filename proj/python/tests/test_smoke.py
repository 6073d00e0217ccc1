# Copyright (c) The mipcnet authors.
#
# This source code is licensed under the Apache License, Version 2.0
# found in the LICENSE file in the root directory of this source tree.

import math

import numpy as np
import pytest

import mipcnet


def micro():
    return mipcnet.preset_config("micro")


def test_presets():
    tiny = mipcnet.preset_config("tiny")
    assert tiny["input_size"] == 64
    with pytest.raises(mipcnet.ValidationError):
        mipcnet.preset_config("huge")


def test_forward_shape_and_predict():
    cfg = micro()
    model = mipcnet.Model(cfg, seed=1)
    size = cfg["input_size"]
    x = np.random.default_rng(0).standard_normal((2, cfg["in_channels"], size, size)).astype(np.float32)
    logits = model.forward(x)
    assert logits.shape == (2, cfg["num_classes"], size, size)
    labels = model.predict(x)
    assert labels.shape == (2, size, size)
    assert labels.min() >= 0 and labels.max() < cfg["num_classes"]
    np.testing.assert_array_equal(mipcnet.Model(cfg, seed=1).forward(x), logits)


def test_wrong_input_shape_raises():
    with pytest.raises(mipcnet.ValidationError):
        mipcnet.Model(micro()).forward(np.zeros((1, 3, 8, 8), dtype=np.float32))


def test_metrics():
    a = np.zeros((8, 8), dtype=np.uint8)
    a[2:5, 2:5] = 1
    assert mipcnet.overlap_metrics(a, a)["dice"] == 1.0
    assert mipcnet.hausdorff(a, a) == 0.0
    b = np.zeros_like(a)
    b[0, 0] = 1
    d = mipcnet.hausdorff(a, b)
    assert d == pytest.approx(math.hypot(4, 4))
    assert mipcnet.hausdorff(a, b, row_spacing=2.0, col_spacing=2.0) == pytest.approx(2 * d)


def test_synthetic_dataset():
    ds = mipcnet.synthetic_dataset(num_samples=3, image_size=32, num_classes=3)
    assert len(ds) == 3
    sid, image, labels = ds[0]
    assert image.shape == (1, 32, 32) and labels.shape == (32, 32)
    assert labels.max() < 3


def test_train_save_load(tmp_path):
    cfg = micro()
    data = {"num_samples": 4, "image_size": cfg["input_size"], "num_classes": cfg["num_classes"]}
    model, losses = mipcnet.train(cfg, {"max_iterations": 3, "batch_size": 2}, data)
    assert len(losses) == 3 and all(math.isfinite(v) for v in losses)
    path = tmp_path / "m.ckpt"
    model.save(path)
    back = mipcnet.Model.load(path)
    assert back.config == model.config
    assert back.evaluate(**data) == model.evaluate(**data)


def test_gradcheck_blocks():
    results = mipcnet.gradcheck(include_model=False)
    assert results and all(r["passed"] for r in results)
