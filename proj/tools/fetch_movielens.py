#!/usr/bin/env python3
"""Fetch MovieLens-100K ratings into <root>/ml-100k/u.data.

grouplens.org is tried first; when it is unreachable the copy bundled with the
recbole wheel on PyPI is used instead (same 100,000 rows, different header).
"""

import argparse
import io
import os
import subprocess
import sys
import tempfile
import urllib.request
import zipfile
from pathlib import Path

GROUPLENS = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"
WHEEL_MEMBER = "recbole/dataset_example/ml-100k/ml-100k.inter"


def from_grouplens(timeout):
    with urllib.request.urlopen(GROUPLENS, timeout=timeout) as resp:
        archive = zipfile.ZipFile(io.BytesIO(resp.read()))
    return archive.read("ml-100k/u.data").decode("utf-8")


def from_wheel():
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "--only-binary=:all:", "-d", tmp, "recbole"],
            check=True,
            stdout=subprocess.DEVNULL,
        )
        wheel = next(Path(tmp).glob("recbole-*.whl"))
        text = zipfile.ZipFile(wheel).read(WHEEL_MEMBER).decode("utf-8")
    rows = []
    for line in text.splitlines()[1:]:
        if not line.strip():
            continue
        user, item, rating, ts = line.split("\t")
        rows.append(f"{user}\t{item}\t{int(float(rating))}\t{int(float(ts))}")
    return "\n".join(rows) + "\n"


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--root", default=os.environ.get("CDREC_DATA_ROOT", "data"))
    parser.add_argument("--timeout", type=float, default=10.0)
    args = parser.parse_args()

    target = Path(args.root) / "ml-100k" / "u.data"
    if target.exists():
        print(target)
        return
    try:
        text = from_grouplens(args.timeout)
    except Exception as err:  # noqa: BLE001
        print(f"grouplens unavailable ({err}); using the recbole wheel", file=sys.stderr)
        text = from_wheel()
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(text)
    print(target)


if __name__ == "__main__":
    main()
