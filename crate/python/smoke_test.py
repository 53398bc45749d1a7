import math
import os
import tempfile

import bitemporal

TINY = """
seed = 3

[model.encoder]
widths = [4, 8, 12, 16]
blocks_per_stage = 1

[model.fpn]
width = 8

[train]
epochs = 1
batch_size = 4

[infer]
patch = 32

[data]
train_count = 4
val_count = 2
test_count = 2

[data.synth]
size = 32
"""


def test_change_weight():
    fa = [[[1.0, 2.0], [3.0, 4.0]], [[0.5, -1.0], [2.0, 0.0]]]
    same = bitemporal.change_weight(fa, fa)
    w0 = (1 - 1 / (1 + math.exp(-1))) ** 2
    for plane in same["w"]:
        for row in plane:
            for v in row:
                assert abs(v - w0) < 1e-9
    neg = [[[-v for v in row] for row in plane] for plane in fa]
    opp = bitemporal.change_weight(fa, neg)
    assert all(abs(p + 1) < 1e-9 for row in opp["phi_c"] for p in row)
    assert len(opp["phi_s"]) == 2


def test_metrics():
    pred = [[1, 1, 0, 0]]
    gt = [[1, 0, 1, 0]]
    c = bitemporal.confusion(pred, gt)
    assert c == {"tp": 1, "fp": 1, "fn": 1, "tn": 1}
    m = bitemporal.metrics(c["tp"], c["fp"], c["fn"], c["tn"])
    assert abs(m["oa"] - 0.5) < 1e-12
    assert abs(m["iou"] - 1 / 3) < 1e-12
    assert not m["undefined"]


def test_model_round_trip():
    model = bitemporal.ChangeDetector(TINY)
    assert model.num_parameters > 0
    pair = bitemporal.synth_pair(0, 0, size=32)
    assert len(pair["img_a"]) == 3 and len(pair["mask"]) == 32
    probs = model.probabilities(pair["img_a"], pair["img_b"])
    assert len(probs) == 2
    assert all(abs(a + b - 1) < 1e-5 for ra, rb in zip(*probs) for a, b in zip(ra, rb))
    mask = model.predict(pair["img_a"], pair["img_b"])
    assert {v for row in mask for v in row} <= {0, 1}

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.ckpt")
        model.save(path)
        loaded = bitemporal.ChangeDetector.load(path)
        assert loaded.probabilities(pair["img_a"], pair["img_b"]) == probs
        assert loaded.config == model.config
        try:
            bitemporal.ChangeDetector.load(os.path.join(d, "missing.ckpt"))
        except OSError:
            pass
        else:
            raise AssertionError("loading a missing checkpoint should fail")

    sim = model.similarity(pair["img_a"], pair["img_b"])
    assert len(sim["levels"]) == 4 and -1 <= sim["rgb_cosine"] <= 1


def test_training():
    model, history = bitemporal.train(TINY)
    assert len(history) == 1 and math.isfinite(history[0]["mean_loss"])
    scores = bitemporal.evaluate_split(model, "test")
    assert 0 <= scores["oa"] <= 1


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_"):
            fn()
            print(f"ok {name}")
