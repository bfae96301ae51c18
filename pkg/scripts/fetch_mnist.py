#!/usr/bin/env python3
"""Download the four MNIST IDX files into data/mnist/.

The library itself never touches the network; run this once (or point
the config at files you already have).  Files are kept gzipped; the
loader reads .gz transparently.  Override the mirror with MNIST_MIRROR.
"""

import os
import sys
import urllib.request

MIRRORS = [
    "https://ossci-datasets.s3.amazonaws.com/mnist",
    "https://storage.googleapis.com/cvdf-datasets/mnist",
    "https://raw.githubusercontent.com/fgnt/mnist/master",
]

FILES = [
    "train-images-idx3-ubyte.gz",
    "train-labels-idx1-ubyte.gz",
    "t10k-images-idx3-ubyte.gz",
    "t10k-labels-idx1-ubyte.gz",
]


def fetch(dest_dir):
    os.makedirs(dest_dir, exist_ok=True)
    mirrors = MIRRORS
    if os.environ.get("MNIST_MIRROR"):
        mirrors = [os.environ["MNIST_MIRROR"].rstrip("/")] + mirrors
    for name in FILES:
        dest = os.path.join(dest_dir, name)
        if os.path.exists(dest):
            print(f"have {dest}")
            continue
        last_err = None
        for mirror in mirrors:
            url = f"{mirror}/{name}"
            try:
                print(f"fetching {url}")
                with urllib.request.urlopen(url, timeout=60) as r:
                    data = r.read()
                with open(dest + ".part", "wb") as f:
                    f.write(data)
                os.replace(dest + ".part", dest)
                break
            except Exception as exc:
                last_err = exc
                print(f"  failed: {exc}")
        else:
            print(f"could not fetch {name}: {last_err}", file=sys.stderr)
            return 1
    return 0


if __name__ == "__main__":
    dest = sys.argv[1] if len(sys.argv) > 1 else "data/mnist"
    sys.exit(fetch(dest))
