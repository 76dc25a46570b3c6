#!/usr/bin/env python3
"""Regenerate the bundled corpora under data/.

All three files are deterministic in their seeds, so a fresh checkout and a
regenerated tree must agree byte for byte. Run from anywhere:

    python3 scripts/gen_fixtures.py [--check]

--check regenerates into memory and verifies the bundled files instead of
overwriting them.
"""

import argparse
import sys
from pathlib import Path

from lenreg.synthetic import MarkovSpec, generate_corpus, length_skew_corpus

DATA_DIR = Path(__file__).resolve().parent.parent / "data"

# (filename, builder) pairs; seeds pinned here are part of the fixture identity
FIXTURES = {
    "markov_train.txt": lambda: generate_corpus(MarkovSpec(), seed=42),
    "markov_eval.txt": lambda: generate_corpus(MarkovSpec(), seed=1043),
    "length_skew.txt": lambda: length_skew_corpus(seed=0),
}


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--check", action="store_true")
    args = ap.parse_args()
    DATA_DIR.mkdir(exist_ok=True)
    rc = 0
    for name, build in FIXTURES.items():
        path = DATA_DIR / name
        text = build()
        if args.check:
            ok = path.exists() and path.read_text(encoding="utf-8") == text
            print(f"{name}: {'ok' if ok else 'MISMATCH'} ({len(text)} bytes expected)")
            rc |= 0 if ok else 1
        else:
            path.write_text(text, encoding="utf-8")
            print(f"wrote {path} ({len(text)} bytes)")
    return rc


if __name__ == "__main__":
    sys.exit(main())
