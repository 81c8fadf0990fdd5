#!/usr/bin/env python3
"""Fetches MNIST into data/mnist/ as gzipped IDX files.

The original IDX files ship inside the npm package mnist-data@1.2.6, which
is reachable through any npm registry mirror. Checksums are verified before
anything is written.

usage: fetch_mnist.py [--package-dir DIR] [--out DIR]
"""

import argparse
import gzip
import hashlib
import pathlib
import subprocess
import tarfile
import tempfile

SHA256 = {
    "train-images-idx3-ubyte": "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    "train-labels-idx1-ubyte": "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    "t10k-images-idx3-ubyte": "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    "t10k-labels-idx1-ubyte": "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--package-dir", help="an unpacked mnist-data package")
    ap.add_argument("--out", default=str(pathlib.Path(__file__).resolve().parent.parent / "data" / "mnist"))
    args = ap.parse_args()
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        pkg = args.package_dir
        if pkg is None:
            subprocess.run(["npm", "pack", "mnist-data@1.2.6"], cwd=tmp, check=True, capture_output=True)
            with tarfile.open(next(pathlib.Path(tmp).glob("mnist-data-*.tgz"))) as t:
                t.extractall(tmp)
            pkg = pathlib.Path(tmp) / "package"
        for name, digest in SHA256.items():
            raw = (pathlib.Path(pkg) / "data" / name).read_bytes()
            if hashlib.sha256(raw).hexdigest() != digest:
                raise SystemExit(f"checksum mismatch for {name}")
            with gzip.GzipFile(out / f"{name}.gz", "wb", mtime=0) as f:
                f.write(raw)
            print(f"{name}.gz")


if __name__ == "__main__":
    main()
