"""Recompute F from each published (precision, recall) pair and show where rounding disagrees."""
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

from published import PUBLISHED_ROWS, decimals, explained_by_input_rounding  # noqa: E402
from mitoseg.metrics import f_score  # noqa: E402


def main():
    print(f"{'table':9} {'row':18} {'P':>7} {'R':>7} {'printed F':>9} {'F(P,R)':>9}  status")
    for table, name, p, r, f in PUBLISHED_ROWS:
        value = f_score(float(p), float(r))
        places = min(4, decimals(f))
        if round(value, places) == float(f):
            status = "match"
        elif explained_by_input_rounding(p, r, f):
            status = "off by input rounding"
        else:
            status = "not explained by rounding"
        print(f"{table:9} {name:18} {p:>7} {r:>7} {f:>9} {value:9.5f}  {status}")


if __name__ == "__main__":
    main()
