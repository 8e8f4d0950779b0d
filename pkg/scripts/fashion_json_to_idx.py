"""Convert the per-class JSON bundle of the ``fashion-mnist`` npm package to IDX files.

The bundle stores 7000 images per class (train and test pooled, 784 bytes
each). The first ``--train-per-class`` images of every class become the
training split and the rest the test split; both are interleaved with a
fixed permutation so that a prefix ``limit`` still covers every class.

    npm pack fashion-mnist@1.1.0 && tar xzf fashion-mnist-1.1.0.tgz
    python scripts/fashion_json_to_idx.py package/src/clothes data/fashion-mnist
"""
import argparse
import json
from pathlib import Path

import numpy as np

from eqspike.data import save_idx


def load_class(path: Path) -> np.ndarray:
    rows = [r for r in json.loads(path.read_text())["data"] if len(r) == 784]
    return np.asarray(rows, dtype=np.uint8).reshape(-1, 28, 28)


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("clothes_dir", type=Path, help="directory holding 0.json .. 9.json")
    p.add_argument("out_dir", type=Path)
    p.add_argument("--train-per-class", type=int, default=6000)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    splits = {"train": ([], []), "t10k": ([], [])}
    for k in range(10):
        imgs = load_class(args.clothes_dir / f"{k}.json")
        n = args.train_per_class
        for name, part in (("train", imgs[:n]), ("t10k", imgs[n:])):
            splits[name][0].append(part)
            splits[name][1].append(np.full(len(part), k, dtype=np.uint8))
    args.out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    for name, (imgs, labels) in splits.items():
        x, y = np.concatenate(imgs), np.concatenate(labels)
        order = rng.permutation(len(y))
        save_idx(args.out_dir / f"{name}-images-idx3-ubyte", x[order])
        save_idx(args.out_dir / f"{name}-labels-idx1-ubyte", y[order])
        print(f"{name}: {len(y)} images, class counts {np.bincount(y).tolist()}")


if __name__ == "__main__":
    main()
