"""Walk through a full analysis of the packaged example dataset.

Loads the per-variant tables, aligns alleles, builds the multivariable
summary, then prints the point estimates, conditional F-statistics, the
robust and non-robust 95% sets (as grid projections) and the distortion
cutoff. The same numbers are produced by

    mvmr-weakiv analyze --exposures ... --outcome ... --ld ... --exposure-cor ... --nx 20000 --ny 20000

Run from anywhere:

    python3 demos/analysis_walkthrough.py
"""

from mvmr_weakiv import (
    build_multivariable_summary,
    example_paths,
    harmonize_variants,
    load_gwas_tables,
    run_analysis,
)
from mvmr_weakiv.report import statistics_at

paths = example_paths("strong")
tables = load_gwas_tables(paths["exposures"], paths["outcome"], paths["ld"], paths["exposure_cor"], 20_000, 20_000)
tables = harmonize_variants(tables)
s = build_multivariable_summary(tables)
print(f"{s.J} variants, {s.K} exposures: {', '.join(tables.exposure_names)}")

report, results, grid = run_analysis(s, draws=50_000, exposure_names=tables.exposure_names)
out = report.to_dict()

print("\npoint estimates (se)")
for name in ("ivw", "gmm"):
    est = out["estimates"][name]
    pairs = ", ".join(f"{t:.3f} ({se:.3f})" for t, se in zip(est["theta"], est["se"]))
    print(f"  {name:4s} {pairs}")

f = out["conditional_f"]
print(f"\nconditional F: {', '.join(f'{v:.1f}' for v in f['f_stats'])} (min {f['min_f']:.1f})")

print(f"\n95% sets on a {grid.size}-point grid")
for method, info in out["sets"].items():
    bounds = "; ".join("empty" if iv is None else f"[{iv[0]:.3f}, {iv[1]:.3f}]" for iv in info["projected_intervals"])
    print(f"  {method:14s} area {info['area']:5d}  {bounds}")

d = out["distortion"]
print(f"\ndistortion cutoff: {d['gamma_hat']} (gamma_min {d['gamma_min']})")
print(f"overdispersion kappa2 at the GMM estimate: {out['kappa2']['kappa2']:.3f}")

gmm = out["estimates"]["gmm"]["theta"]
print("\nstatistics at the GMM estimate:")
for name, value in statistics_at(gmm, s).items():
    print(f"  {name}: {value:.4g}" if isinstance(value, float) else f"  {name}: {value}")
for note in out["warnings"]:
    print("warning:", note)
