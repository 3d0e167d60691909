"""Materialize MovieLens-100K as data/ml-100k/u.data.

GroupLens' own archive is the canonical source; when it is unreachable the
RecBole wheel, which bundles the same 100,000 interactions as an atomic
``.inter`` file with a header row, is used instead.

    python scripts/fetch_ml100k.py [--dest data/ml-100k] [--wheel path/to/recbole.whl]
"""

import argparse
import io
import subprocess
import sys
import tempfile
import urllib.request
import zipfile
from pathlib import Path

GROUPLENS = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"
RECBOLE = "recbole==1.2.1"
INTER = "recbole/dataset_example/ml-100k/ml-100k.inter"


def from_grouplens() -> bytes:
    with urllib.request.urlopen(GROUPLENS, timeout=30) as resp:
        blob = resp.read()
    return zipfile.ZipFile(io.BytesIO(blob)).read("ml-100k/u.data")


def from_recbole(wheel=None) -> bytes:
    with tempfile.TemporaryDirectory() as tmp:
        if wheel is None:
            subprocess.run(
                [sys.executable, "-m", "pip", "download", "--no-deps", "-q", "-d", tmp, RECBOLE],
                check=True,
            )
            wheel = next(Path(tmp).glob("recbole-*.whl"))
        text = zipfile.ZipFile(wheel).read(INTER).decode()
    rows = text.splitlines()[1:]  # drop the typed header
    return ("\n".join(rows) + "\n").encode()


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dest", default=str(Path(__file__).resolve().parents[1] / "data" / "ml-100k"))
    ap.add_argument("--wheel", help="use an already downloaded recbole wheel")
    args = ap.parse_args(argv)

    dest = Path(args.dest)
    dest.mkdir(parents=True, exist_ok=True)
    if args.wheel:
        data = from_recbole(args.wheel)
    else:
        try:
            data = from_grouplens()
        except OSError as exc:
            print(f"grouplens unreachable ({exc}); falling back to {RECBOLE}", file=sys.stderr)
            data = from_recbole()
    n = data.count(b"\n")
    if n != 100_000:
        sys.exit(f"expected 100000 ratings, got {n}")
    (dest / "u.data").write_bytes(data)
    print(f"wrote {dest / 'u.data'} ({n} ratings)")


if __name__ == "__main__":
    main()
