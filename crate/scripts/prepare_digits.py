#!/usr/bin/env python3
"""Build the desk-scale digit domain pair as IDX files.

Source domain: the 5,000-image MNIST subset shipped inside the mlxtend wheel.
Target domain: the 1,797-image 8x8 handwritten digits set shipped with
scikit-learn, rendered at MNIST framing: bicubic upscaling to 20x20, centered
on a 28x28 canvas, then a linear contrast stretch mapping gray level 0.3 to 0
and 0.633 to 1 (clipped), which turns the blurry upscaled strokes into
near-binary ones like the source domain's.

Usage: python3 scripts/prepare_digits.py [--wheel path/to/mlxtend.whl] [--out data]
"""
import argparse
import glob
import gzip
import io
import os
import struct
import subprocess
import tempfile
import zipfile

import numpy as np
from PIL import Image
from sklearn.datasets import load_digits

DIGIT_BOX = 20
CANVAS = 28
STRETCH_LOW = 0.3
STRETCH_GAIN = 3.0


def write_idx_images(path, images):
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, h, w))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def write_split(root, name, images, labels):
    os.makedirs(root, exist_ok=True)
    write_idx_images(os.path.join(root, f"{name}-images-idx3-ubyte"), images)
    write_idx_labels(os.path.join(root, f"{name}-labels-idx1-ubyte"), labels)


def render_digit(img8):
    """8x8 image in [0, 1] -> 28x28 uint8 at MNIST framing."""
    big = Image.fromarray(img8.astype(np.float32), mode="F").resize(
        (DIGIT_BOX, DIGIT_BOX), Image.BICUBIC)
    big = np.clip((np.asarray(big) - STRETCH_LOW) * STRETCH_GAIN, 0.0, 1.0)
    out = np.zeros((CANVAS, CANVAS))
    pad = (CANVAS - DIGIT_BOX) // 2
    out[pad:pad + DIGIT_BOX, pad:pad + DIGIT_BOX] = big
    return np.round(out * 255.0)


def find_wheel(path):
    if path:
        return path
    tmp = tempfile.mkdtemp()
    subprocess.check_call(
        ["pip", "download", "mlxtend==0.24.0", "--no-deps", "-d", tmp])
    return glob.glob(os.path.join(tmp, "mlxtend-*.whl"))[0]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--wheel")
    ap.add_argument("--out", default="data")
    args = ap.parse_args()

    rng = np.random.RandomState(20210101)

    with zipfile.ZipFile(find_wheel(args.wheel)) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",")
    x = table[:, :-1].reshape(-1, 28, 28)
    y = table[:, -1].astype(int)
    order = rng.permutation(len(y))
    x, y = x[order], y[order]
    write_split(os.path.join(args.out, "mnist"), "train", x[:4500], y[:4500])
    write_split(os.path.join(args.out, "mnist"), "test", x[4500:], y[4500:])

    digits = load_digits()
    dx = np.stack([render_digit(im / 16.0) for im in digits.images])
    dy = digits.target
    order = rng.permutation(len(dy))
    dx, dy = dx[order], dy[order]
    write_split(os.path.join(args.out, "digits28"), "train", dx[:1297], dy[:1297])
    write_split(os.path.join(args.out, "digits28"), "test", dx[1297:], dy[1297:])


if __name__ == "__main__":
    main()
