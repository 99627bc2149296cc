"""Regenerate the data files shipped inside the package.

    python3 scripts/build_data.py [--check]

Writes the 30-conversation evaluation suite, the 300-example separable
selector dataset, and the default selector trained on a disjoint
90-conversation suite. ``--check`` compares against the files on disk
instead of writing.
"""

import argparse
import json
import sys
from pathlib import Path

from fluxmem.evalkit import label_cases
from fluxmem.selector import train
from fluxmem.synthetic import make_suite, separable_dataset

DATA = Path(__file__).resolve().parents[1] / "src" / "fluxmem" / "data"

SUITE_SEED = 42
TRAIN_SEED = 2024
TRAIN_SIZE = 90


def jsonl(rows) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)


def build() -> dict[str, str]:
    suite = make_suite(30, seed=SUITE_SEED, prefix="c")
    training = make_suite(TRAIN_SIZE, seed=TRAIN_SEED, prefix="t")
    model = train(label_cases(training), seed=42)
    return {
        "synthetic_suite.jsonl": jsonl(c.to_dict() for c in suite),
        "separable_300.jsonl": jsonl(e.to_dict() for e in separable_dataset(300, seed=42)),
        "selector_default.json": json.dumps(model.to_dict(), sort_keys=True, indent=1) + "\n",
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--check", action="store_true")
    args = ap.parse_args(argv)
    stale = []
    for name, text in build().items():
        path = DATA / name
        if args.check:
            if not path.exists() or path.read_text(encoding="utf-8") != text:
                stale.append(name)
        else:
            path.write_text(text, encoding="utf-8")
            print(f"wrote {path}")
    for name in stale:
        print(f"stale: {name}", file=sys.stderr)
    return 1 if stale else 0


if __name__ == "__main__":
    sys.exit(main())
