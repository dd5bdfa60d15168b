"""
FID and precision/recall curves on synthetic features
=====================================================

FID compares Gaussian fits of two feature clouds. The PRD curve separates
two failure modes that FID mixes: low precision (samples off the data) and
low recall (parts of the data never sampled). F8 leans on recall, F1/8 on
precision.
"""

import sys
from pathlib import Path

import numpy as np

from glann.evaluation import (EvalReport, f_beta_summary, fid, gaussian_stats, plot_prd, prd_curve,
                              prd_histograms)

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)
rng = np.random.default_rng(0)

# "real" features: four well separated modes in 8 dimensions
centers = rng.normal(size=(4, 8)) * 6
real = centers[rng.integers(4, size=2000)] + rng.normal(size=(2000, 8))

# three generators: faithful, mode-dropping (two modes only), and noisy
candidates = {
    "faithful": centers[rng.integers(4, size=2000)] + rng.normal(size=(2000, 8)),
    "drops-modes": centers[rng.integers(2, size=2000)] + rng.normal(size=(2000, 8)),
    "noisy": centers[rng.integers(4, size=2000)] + 3 * rng.normal(size=(2000, 8)),
}

reports = []
real_stats = gaussian_stats(real)
for name, feats in candidates.items():
    score = fid(real_stats, gaussian_stats(feats))
    p, q = prd_histograms(real, feats, num_bins=20, seed=0)
    curve = prd_curve(p, q)
    f8, f1_8 = f_beta_summary(curve)
    print(f"{name:12s} FID {score:8.2f}   F8 {f8:.3f}   F1/8 {f1_8:.3f}")
    reports.append(EvalReport(name, score, curve, f8, f1_8, "synthetic", len(real), len(feats), 0))

# mode dropping keeps precision high but costs recall, so F8 < F1/8 for it
print(plot_prd(reports, out / "prd_synthetic.png"))
