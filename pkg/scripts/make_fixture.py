"""Regenerate the vendored synthetic trapping dataset.

Usage: python3 scripts/make_fixture.py [out.csv]
"""

import sys

from covglm.simulate import synthetic_hunting_frame


def main() -> int:
    out = sys.argv[1] if len(sys.argv) > 1 else "data/hunting_synthetic.csv"
    frame = synthetic_hunting_frame()
    frame.to_csv(out, index=False, lineterminator="\n")
    print(f"wrote {frame.shape[0]} rows to {out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
