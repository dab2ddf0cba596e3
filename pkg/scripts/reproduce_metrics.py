"""Overall regression metrics for the shipped ten-sample comparison table.

    python3 scripts/reproduce_metrics.py [pairs.csv]
"""

import sys
from importlib import resources

from stalk_gauge.evaluation import evaluate, format_number, load_pairs


def main(argv):
    path = argv[0] if argv else resources.files("stalk_gauge") / "data" / "reference_pairs.csv"
    rep = evaluate(load_pairs(path))
    print(f"samples: {rep.n}")
    print(f"MAE   {format_number(rep.mae)} m ({rep.mae * 1e3:.3f} mm)")
    print(f"MAPE  {format_number(rep.mape)} %")
    print(f"RMSE  {format_number(rep.rmse)} m ({rep.rmse * 1e3:.3f} mm)")
    print(f"R^2   {format_number(rep.r2)}")


if __name__ == "__main__":
    main(sys.argv[1:])
