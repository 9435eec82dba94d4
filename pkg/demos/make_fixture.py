"""Regenerate the packaged strong-instrument example dataset.

Eight variants, two exposures, 20,000 individuals in each sample and strong
instruments (mu = 40). Variant v3 is written with the outcome alleles
swapped so that loading the files exercises harmonization; its LD row and
column follow the outcome coding, as the loader expects.

Run from the repository root:

    python3 demos/make_fixture.py
"""

from dataclasses import replace
from pathlib import Path

import numpy as np

from mvmr_weakiv.simulation import SimulationConfig, simulate_dataset
from mvmr_weakiv.summary_data import write_gwas_tables

OUT = Path(__file__).resolve().parent.parent / "src" / "mvmr_weakiv" / "data"

config = SimulationConfig(n_X=20_000, n_Y=20_000, mu=40.0, xi=1.0, tau=1.0, master_seed=2026, grid=None)
tables = simulate_dataset(config, 0).tables

alleles = [("A", "G"), ("C", "T"), ("A", "C"), ("G", "T"), ("A", "G"), ("C", "A"), ("T", "C"), ("G", "A")]
flip = np.ones(tables.J)
flip[2] = -1.0
effect = [a for a, _ in alleles]
other = [b for _, b in alleles]
tables = replace(
    tables,
    variants=[f"rs{1000 + 7 * j}" for j in range(tables.J)],
    effect_allele=effect,
    other_allele=other,
    outcome_effect_allele=[o if f < 0 else e for e, o, f in zip(effect, other, flip)],
    outcome_other_allele=[e if f < 0 else o for e, o, f in zip(effect, other, flip)],
    outcome_beta=tables.outcome_beta * flip,
    ld=tables.ld * np.outer(flip, flip),
    exposure_names=["lipid", "pressure"],
)
paths = write_gwas_tables(tables, OUT, prefix="strong_")
for key, path in paths.items():
    print(f"{key}: {path}")
