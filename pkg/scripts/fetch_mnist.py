#!/usr/bin/env python3
"""Download the MNIST IDX files and verify their SHA-256 digests.

Usage:
    python scripts/fetch_mnist.py [DEST_DIR]

Writes the four uncompressed IDX files into DEST_DIR (default: ./data).
Point the CLI at them with ANTFORGE_DATA_DIR=DEST_DIR and
--set data.dataset=mnist.
"""

import gzip
import hashlib
import sys
import urllib.request
from pathlib import Path

MIRRORS = [
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
]

# SHA-256 of the gzip archives as distributed.
FILES = {
    "train-images-idx3-ubyte.gz":
        "440fcabf73cc546fa21475e81ea370265605f56be210a4024d2ca8f203523609",
    "train-labels-idx1-ubyte.gz":
        "3552534a0a558bbed6aed32b30c495cca23d567ec52cac8be1a0730e8010255c",
    "t10k-images-idx3-ubyte.gz":
        "8d422c7b0a1c1c79245a5bcf07fe86e33eeafee792b84584aec276f5a2dbc4e6",
    "t10k-labels-idx1-ubyte.gz":
        "f7ae60f92e00ec6debd23a6088c31dbd2371eca3ffa0defaefb259924204aec6",
}


def fetch(name: str, digest: str, dest: Path) -> None:
    out = dest / name.removesuffix(".gz")
    if out.exists():
        print(f"{out} already present, skipping")
        return
    last_err = None
    for mirror in MIRRORS:
        url = mirror + name
        try:
            print(f"downloading {url}")
            with urllib.request.urlopen(url, timeout=60) as resp:
                blob = resp.read()
            got = hashlib.sha256(blob).hexdigest()
            if got != digest:
                raise IOError(f"sha256 mismatch for {name}: {got}")
            out.write_bytes(gzip.decompress(blob))
            print(f"wrote {out}")
            return
        except Exception as e:  # try the next mirror
            last_err = e
            print(f"  failed: {e}")
    raise SystemExit(f"could not fetch {name}: {last_err}")


def main() -> None:
    dest = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("data")
    dest.mkdir(parents=True, exist_ok=True)
    for name, digest in FILES.items():
        fetch(name, digest, dest)
    print("done")


if __name__ == "__main__":
    main()
