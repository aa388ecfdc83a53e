"""Expected loss of optimality of the self-reflective plan versus alpha.

    python3 scripts/alpha_sweep.py --delta 0.05
    python3 scripts/alpha_sweep.py --delta 0.01   # full scale, N = 1000
"""

import argparse
import csv
import sys

import numpy as np

from srmpc.acceptance import PP_TABLE, predator_prey_setup
from srmpc.loss import alpha_sweep

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--delta", type=float, default=0.05)
parser.add_argument("--alphas", type=float, nargs="+", default=[0.5, 1.0, 2.0])
parser.add_argument("--csv", help="also write the table here")
args = parser.parse_args()

model, noise = predator_prey_setup(args.delta)
N = int(round(10 / args.delta))
rows = alpha_sweep(model, model.z_s, 0.1 * np.eye(3), noise, args.alphas, N)
print(f"delta={args.delta:g}  N={N}")
print(f"{'alpha':>6s} {'sum L':>9s} {'plan RMS u':>11s}")
for r in rows:
    print(f"{r.alpha:6.2f} {r.expected_loss:9.4f} {r.excitation:11.4f}")
if list(args.alphas) == [0.5, 1.0, 2.0]:
    print("reference:", ", ".join(f"{v:.2f}" for v in PP_TABLE))
if args.csv:
    with open(args.csv, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["alpha", "expected_loss", "excitation", "converged"])
        out.writerows([r.alpha, r.expected_loss, r.excitation, r.converged] for r in rows)
sys.exit(0 if all(r.converged for r in rows) else 1)
