"""Regenerate the packaged synthetic sample and its golden tree.

Run from the repository root: python scripts/make_sample_data.py
"""
import os

from gaware.core import save_estimate_table, save_raw_study, save_tree
from gaware.estimates import ipw_pseudo_outcomes
from gaware.sample import GOLDEN_SETTINGS, GOLDEN_TREE_FILE, STUDY_FILE, TABLE_FILE, generate_sample_study
from gaware.tree import SearchConfig, fit_gaware_tree

DATA = os.path.join(os.path.dirname(__file__), "..", "src", "gaware", "data")


def main():
    study = generate_sample_study()
    table = ipw_pseudo_outcomes(study, key="covariates", variance="per_type")
    s = GOLDEN_SETTINGS
    fit = fit_gaware_tree(table, SearchConfig(depth=s["depth"], splits=s["splits"], min_leaf=s["min_leaf"],
                                              G=s["G"], sigma2=s["sigma2"]))
    save_raw_study(study, os.path.join(DATA, STUDY_FILE))
    save_estimate_table(table, os.path.join(DATA, TABLE_FILE))
    save_tree(fit.tree, os.path.join(DATA, GOLDEN_TREE_FILE))
    print(f"{len(study)} units, {len(table)} types, objective {fit.objective:.6f}, flags {fit.flags}")


if __name__ == "__main__":
    main()
