"""Smoke test for the regverify extension module.

    maturin develop --release -m crates/py/Cargo.toml
    python python/smoke_test.py
"""

import math
import tempfile

import regverify


def close(a, b, tol=1e-9):
    assert abs(a - b) < tol, (a, b)


def main():
    assert regverify.__version__

    # pure translation: every landmark moves by the same 5 mm
    lm = [[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [0.0, 20.0, 5.0]]
    close(regverify.mtre([0, 0, 0, 3.0, 4.0, 0.0], lm), 5.0)
    assert regverify.classify(1.99) == "ACCEPT"
    assert regverify.classify(2.0) == "REJECT"

    close(regverify.weighted_accuracy([1, 1, 0, 0]), 0.760)
    close(regverify.auc([0.9, 0.8, 0.1], [True, False, False]), 1.0)
    assert regverify.auc([0.1, 0.2], [True, True]) is None

    cal = regverify.Calibration.from_scores([0.05 * i for i in range(1, 10)], alpha=0.1)
    close(cal.threshold, 0.45)
    assert cal.n == 9
    s = cal.predict(0.97)
    assert s["labels"] == ["ACCEPT"] and s["certain"], s
    s = regverify.predict_set(0.45, 0.5)
    assert len(s["labels"]) == 1 and s["fallback"], s

    model = regverify.Verifier(seed=1, input_size=128)
    img = [[math.sin(0.1 * (r + c)) * 0.5 + 0.5 for c in range(128)] for r in range(128)]
    out = model.predict(img, img)
    assert 0.0 <= out["p_accept"] <= 1.0
    assert out["predicted"] in ("ACCEPT", "REJECT")
    heat = model.explain(img, img, target="REJECT")
    assert len(heat["grid"]) == 128 and len(heat["grid"][0]) == 128
    assert all(0.0 <= v <= 1.0 for row in heat["grid"] for v in row)

    try:
        regverify.classify(-1.0)
    except ValueError:
        pass
    else:
        raise AssertionError("negative mTRE accepted")

    with tempfile.TemporaryDirectory() as tmp:
        summary = regverify.generate_dataset(tmp + "/toy", seed=0, preset="toy")
        assert summary["samples"] == 360, summary
        path = tmp + "/m.ckpt"
        model.save(path)
        again = regverify.Verifier.load(path)
        close(again.predict(img, img)["logit"], out["logit"], 1e-12)

    print("regverify python smoke test: ok")


if __name__ == "__main__":
    main()
