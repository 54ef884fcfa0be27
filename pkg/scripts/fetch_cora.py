"""Fetch the LINQS Cora files and convert them to ``data/cora``.

The raw ``cora.content``/``cora.cites`` pair ships inside the ``pgl`` wheel on
PyPI, so this downloads that wheel (no dependencies, nothing installed) and
pulls the two files out of the zip.  Pass ``--content``/``--cites`` to
convert local copies instead.
"""

import argparse
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

from paraformer.graph_io import convert_linqs

WHEEL = "pgl==2.2.6"


def fetch(dest: Path) -> tuple[Path, Path]:
    subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps", "--only-binary=:all:",
                    "--python-version", "3.10", "--platform", "manylinux1_x86_64", "-d", str(dest), WHEEL],
                   check=True)
    wheel = next(dest.glob("pgl-*.whl"))
    out = []
    with zipfile.ZipFile(wheel) as zf:
        for suffix in ("cora.content", "cora.cites"):
            member = next(n for n in zf.namelist() if n.endswith(suffix))
            target = dest / suffix
            target.write_bytes(zf.read(member))
            out.append(target)
    return out[0], out[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "data" / "cora"))
    ap.add_argument("--content")
    ap.add_argument("--cites")
    ap.add_argument("--split-seed", type=int, default=0)
    args = ap.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        if args.content and args.cites:
            content, cites = Path(args.content), Path(args.cites)
        else:
            content, cites = fetch(Path(tmp))
        ds = convert_linqs(content, cites, args.out, split_seed=args.split_seed)
    print(f"wrote {args.out}: n={ds.n} m={ds.graph.m} (raw {ds.graph.m_raw}) d={ds.features.shape[1]} c={ds.labels.c}")


if __name__ == "__main__":
    main()
