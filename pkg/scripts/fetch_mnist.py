#!/usr/bin/env python3
"""Download the four MNIST IDX files into a local directory.

The library itself never touches the network; this helper exists so an
offline-capable dataset directory can be prepared once:

    python scripts/fetch_mnist.py --out data/mnist

Files are fetched gzipped and stored decompressed under their canonical
names. Any mirror with the standard layout works via --base-url.
"""
from __future__ import annotations

import argparse
import gzip
import sys
import urllib.request
from pathlib import Path

FILES = (
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
)

DEFAULT_BASE = "https://ossci-datasets.s3.amazonaws.com/mnist/"


def fetch(base_url: str, out_dir: Path) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    for stem in FILES:
        target = out_dir / stem
        if target.exists():
            print(f"already present: {target}")
            continue
        url = f"{base_url.rstrip('/')}/{stem}.gz"
        print(f"fetching {url}")
        with urllib.request.urlopen(url) as response:
            payload = gzip.decompress(response.read())
        target.write_bytes(payload)
        print(f"wrote {target} ({len(payload)} bytes)")
    return 0


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, default=Path("data/mnist"))
    parser.add_argument("--base-url", default=DEFAULT_BASE)
    args = parser.parse_args()
    try:
        return fetch(args.base_url, args.out)
    except OSError as exc:
        print(f"download failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
