"""Smoke test for the attrformer_py extension module.

Build and install first, e.g. `maturin develop --release -m crates/python/Cargo.toml`.
"""

import json
import math
import os
import sys
import tempfile

import attrformer_py as af


def main():
    assert abs(af.harmonic_mean(69.3, 68.3) - 68.796) < 1e-3
    assert af.harmonic_mean(0.0, 0.0) == 0.0

    ds = af.Dataset.synthetic(json.dumps({"examples_per_class": 5, "test_per_class": 2, "seed": 3}))
    assert ds.num_attributes == 12
    assert len(ds.seen_classes) == 8 and len(ds.unseen_classes) == 4
    assert ds.split_len("train") == 40

    features, label = ds.example("test_unseen", 0)
    assert len(features) == 16 and len(features[0]) == 64
    assert label in ds.unseen_classes

    model, logs = af.train(ds, json.dumps({"epochs": 2, "lr": 0.01, "seed": 1}))
    assert [l["epoch"] for l in logs] == [1, 2]
    assert all(math.isfinite(l["loss_total"]) for l in logs)

    psi = model.psi(features)
    assert len(psi) == 12

    metrics = model.evaluate(ds)
    assert set(metrics) == {"acc", "U", "S", "H"}
    assert 0.0 <= model.localization(ds) <= 1.0

    with tempfile.TemporaryDirectory() as tmp:
        data_dir = os.path.join(tmp, "data")
        ds.save(data_dir)
        again = af.Dataset.load(data_dir)
        assert again.example("train", 3) == ds.example("train", 3)

        model_dir = os.path.join(tmp, "model")
        model.save(model_dir)
        loaded = af.Model.load(model_dir)
        assert loaded.evaluate(again, "czsl")["acc"] == model.evaluate(ds, "czsl")["acc"]
        assert json.loads(loaded.config_json)["seed"] == 1

        assert model.dump_attention(ds, os.path.join(tmp, "maps"), 2) == 2
        assert os.path.exists(os.path.join(tmp, "maps", "argmax.csv"))

    try:
        af.Model.load("/nonexistent/model")
    except OSError:
        pass
    else:
        raise AssertionError("missing model directory should raise")

    try:
        model.psi([[0.0] * 5] * 16)
    except ValueError:
        pass
    else:
        raise AssertionError("wrong feature shape should raise")

    print("smoke test passed:", json.dumps(metrics))


if __name__ == "__main__":
    sys.exit(main())
