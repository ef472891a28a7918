"""Fetch the Cora citation graph (LINQS ``cora.content`` / ``cora.cites``) into data/cora.

The original LINQS host is unreliable, so the files are taken from the
pgl 2.2.6 source distribution on PyPI, which vendors them unchanged.
Checksums are verified after extraction.
"""

import argparse
import hashlib
import io
import re
import sys
import tarfile
import urllib.parse
import urllib.request
from pathlib import Path

PACKAGE = "pgl"
VERSION = "2.2.6"
MEMBER_DIR = "pgl/data/cora/"
SHA256 = {
    "cora.content": "0955f03baddbea9911f53814d7781129b71b066e5b442d0a5bd51f439c442082",
    "cora.cites": "316d45e0e48387392c70cc3e3915e43f6f5c147ea45c973971e2c9140aaadacf",
}


def sdist_url(index="https://pypi.org/simple"):
    page = f"{index}/{PACKAGE}/"
    with urllib.request.urlopen(page, timeout=60) as r:
        html = r.read().decode()
    name = f"{PACKAGE}-{VERSION}.tar.gz"
    for href in re.findall(r'href="([^"]+)"', html):
        if href.split("#")[0].endswith("/" + name):
            return urllib.parse.urljoin(page, href.split("#")[0])
    raise SystemExit(f"{name} not listed at {page}")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "data" / "cora"))
    ap.add_argument("--index", default="https://pypi.org/simple")
    ap.add_argument("--sdist", help="use an already-downloaded sdist instead of fetching one")
    args = ap.parse_args(argv)
    out = Path(args.out)
    if args.sdist:
        blob = Path(args.sdist).read_bytes()
    else:
        url = sdist_url(args.index)
        print(f"downloading {url}")
        with urllib.request.urlopen(url, timeout=300) as r:
            blob = r.read()
    out.mkdir(parents=True, exist_ok=True)
    with tarfile.open(fileobj=io.BytesIO(blob), mode="r:gz") as tar:
        for m in tar.getmembers():
            name = m.name.split("/", 1)[-1]
            if name.startswith(MEMBER_DIR) and m.isfile():
                (out / name[len(MEMBER_DIR):]).write_bytes(tar.extractfile(m).read())
    bad = [n for n, h in SHA256.items() if hashlib.sha256((out / n).read_bytes()).hexdigest() != h]
    if bad:
        print(f"checksum mismatch: {', '.join(bad)}", file=sys.stderr)
        return 1
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
