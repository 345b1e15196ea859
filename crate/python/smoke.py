"""Smoke test for the protoner_py extension.

Build and run from the repository root:

    cargo build --release -p protoner-py
    cp target/release/libprotoner_py.so python/protoner_py.so
    python3 python/smoke.py
"""

import json
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import protoner_py as pn


def main():
    train, conf, anti = pn.synth(rho=0.8, classes=5, seed=0, sentences=300)
    assert len(train) == 300 and len(conf) > 0 and len(anti) > 0
    assert not set(train.labels) & set(conf.labels)

    ep = pn.sample_episode(train, way=5, shot_lo=1, shot_hi=2, query=1, seed=7)
    assert ep.validate() == [], ep.validate()
    assert len(ep.classes) == 5

    assert pn.extract_spans(["x", "x", "O", "y"]) == [(0, 2, "x"), (3, 4, "y")]
    assert math.isclose(pn.sq_euclid([0.0, 0.0], [3.0, 4.0]), 25.0)
    protos = pn.class_prototypes({"a": [[0.0, 0.0], [2.0, 2.0]]})
    assert protos["a"] == [1.0, 1.0]
    w = pn.reweight_supports([0.0, 0.0], [[0.0, 0.0], [1.0, 0.0]], 1.0)
    assert math.isclose(sum(w), 1.0) and w[0] > w[1]
    assert pn.mmd([[0.0], [1.0]], [[0.0], [1.0]]) < 1e-12

    enc = pn.Encoder(dim=8, max_len=16, seed=3)
    rows = enc.encode(["the", "cat", "sat"])
    assert len(rows) == 3 and len(rows[0]) == 8

    cfg = pn.RunConfig(episodes_train="20", episodes_eval="10", batch_size="4", learning_rate="0.01")
    cfg.set("seed", "1")
    assert "episodes_train = 20" in cfg.render()

    model, log = pn.train(cfg, train)
    assert len(log) > 0 and all("phase" in json.loads(line) for line in log)
    report = json.loads(pn.evaluate(model, cfg, conf))
    assert 0.0 <= report["span"]["f1"] <= 1.0

    with tempfile.TemporaryDirectory() as d:
        model.save(d)
        again = pn.Model.load(d)
        assert again.memory_classes == model.memory_classes
        assert json.loads(pn.evaluate(again, cfg, conf)) == report

    try:
        cfg.set("way", "0")
    except ValueError:
        pass
    else:
        raise AssertionError("invalid config accepted")

    print(f"ok: span_f1={report['span']['f1']:.4f}")


if __name__ == "__main__":
    main()
