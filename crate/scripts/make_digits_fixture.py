#!/usr/bin/env python3
"""Build the 196-64-32-32-10 digit-classifier fixture.

Trains a small MLP on the scikit-learn 8x8 digits, upsampled to 14x14, and
writes the model JSON, the float weight blob and the calibration and test
datasets into crates/core/fixtures/digits.

    python3 scripts/make_digits_fixture.py [--out DIR] [--seed N]
"""

import argparse
import json
import math
import struct
from pathlib import Path

import numpy as np
from scipy.ndimage import zoom
from sklearn.datasets import load_digits
from sklearn.neural_network import MLPClassifier

HIDDEN = (64, 32, 32)
CALIB = 300
TEST = 500
WIDTH = 8
TARGET_RANGE = 1.5


def upsample(images):
    out = np.stack([zoom(img, 14 / 8, order=1) for img in images])
    out = np.clip(out / 16.0, 0.0, 1.0)
    return np.round(out * 255).astype(np.uint8)


def write_tensors(path, tensors):
    with open(path, "wb") as f:
        f.write(b"CVTW")
        f.write(struct.pack("<HHI", 1, 0, len(tensors)))
        for t in tensors:
            t = np.asarray(t, dtype="<f8")
            f.write(struct.pack("<I", t.ndim))
            f.write(struct.pack(f"<{t.ndim}I", *t.shape))
            f.write(t.tobytes())


def write_dataset(out, name, x, y):
    (out / f"{name}.samples").write_bytes(x.astype(np.uint8).tobytes())
    (out / f"{name}.labels").write_bytes(y.astype("<u4").tobytes())
    manifest = {
        "name": name,
        "dim": int(x.shape[1]),
        "count": int(x.shape[0]),
        "dtype": "u8",
        "samples_file": f"{name}.samples",
        "labels_file": f"{name}.labels",
        "classes": 10,
    }
    (out / f"{name}.json").write_text(json.dumps(manifest, indent=2) + "\n")


def frac_bits(values):
    """Largest fractional width whose range covers the bulk of `values`."""
    bound = float(np.quantile(np.abs(values), 0.999))
    int_bits = max(0, math.ceil(math.log2(max(bound, 1e-9))))
    return max(0, min(WIDTH - 2, WIDTH - 1 - int_bits))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=Path(__file__).resolve().parents[1] / "crates/core/fixtures/digits", type=Path)
    ap.add_argument("--seed", default=7, type=int)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    digits = load_digits()
    x = upsample(digits.images).reshape(len(digits.images), -1)
    y = digits.target.astype(np.uint32)
    order = np.random.default_rng(args.seed).permutation(len(x))
    x, y = x[order], y[order]
    test_x, test_y = x[:TEST], y[:TEST]
    calib_x, calib_y = x[TEST:TEST + CALIB], y[TEST:TEST + CALIB]
    train_x, train_y = x[TEST + CALIB:], y[TEST + CALIB:]

    clf = MLPClassifier(hidden_layer_sizes=HIDDEN, activation="relu", alpha=1e-3,
                        max_iter=600, random_state=args.seed)
    clf.fit(train_x / 255.0, train_y)
    print(f"float test accuracy: {100 * clf.score(test_x / 255.0, test_y):.2f}")

    # ReLU is positive-homogeneous, so each layer's outputs can be rescaled
    # into the word range and the inverse folded into the next layer without
    # changing the float decision function.
    coefs = [w.copy() for w in clf.coefs_]
    biases = [b.copy() for b in clf.intercepts_]
    h = train_x / 255.0
    for i in range(len(coefs)):
        pre = h @ coefs[i] + biases[i]
        s = float(np.quantile(np.abs(pre), 0.999)) / TARGET_RANGE
        coefs[i] /= s
        biases[i] /= s
        if i + 1 < len(coefs):
            coefs[i + 1] *= s
        h = np.maximum(pre / s, 0.0)

    h = train_x / 255.0
    layers, tensors = [], []
    for i, (w, b) in enumerate(zip(coefs, biases)):
        pre = h @ w + b
        last = i == len(coefs) - 1
        f = min(frac_bits(h), frac_bits(pre))
        layers.append({
            "kind": "dense",
            "out": int(w.shape[1]),
            "activation": "identity" if last else "relu",
            "format": f"fxp{WIDTH}.f{f}",
            "accuracy": "accurate",
        })
        tensors += [w.T, b]
        h = pre if last else np.maximum(pre, 0.0)

    write_tensors(args.out / "digits_mlp.weights", tensors)
    model = {
        "name": "digits-mlp",
        "input_dim": 196,
        "input_shape": [1, 14, 14],
        "weights_file": "digits_mlp.weights",
        "layers": layers,
    }
    (args.out / "digits_mlp.json").write_text(json.dumps(model, indent=2) + "\n")
    # The sensitivity scan counts single-sample flips, so it calibrates on every
    # non-test sample rather than the small held-out split alone.
    write_dataset(args.out, "digits_calib", x[TEST:], y[TEST:])
    write_dataset(args.out, "digits_test", test_x, test_y)
    for l in layers:
        print(l["format"], l["activation"])


if __name__ == "__main__":
    main()
