"""Convert the digits bundled with the `mnist` npm package (10,000 samples)
into gzipped IDX files: 8,000 training and 2,000 test images.

usage: python3 scripts/mnist_from_npm.py <path/to/package/src/digits> <outdir>
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

SIDE = 28


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    samples = []
    for label in range(10):
        raw = json.loads((src / f"{label}.json").read_text())["data"]
        count = len(raw) // (SIDE * SIDE)
        for i in range(count):
            px = raw[i * SIDE * SIDE:(i + 1) * SIDE * SIDE]
            samples.append((bytes(min(255, max(0, round(v * 255))) for v in px), label))
    random.Random(20180101).shuffle(samples)
    split = len(samples) * 4 // 5
    out.mkdir(parents=True, exist_ok=True)
    for prefix, part in (("train", samples[:split]), ("t10k", samples[split:])):
        with gzip.GzipFile(out / f"{prefix}-images-idx3-ubyte.gz", "wb", mtime=0) as f:
            f.write(struct.pack(">IIII", 0x803, len(part), SIDE, SIDE))
            for px, _ in part:
                f.write(px)
        with gzip.GzipFile(out / f"{prefix}-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
            f.write(struct.pack(">II", 0x801, len(part)))
            f.write(bytes(label for _, label in part))
        print(prefix, len(part))


if __name__ == "__main__":
    main()
