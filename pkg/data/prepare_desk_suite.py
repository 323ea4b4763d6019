""" Generates the desk-scale suite: one dataset file per (family, difficulty), 64 samples each, tiny preset.
    Run from this directory; files are written next to the script as e.g. `fva.fwds`. """
import logging
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), ".."))

from dataset import DatasetSpec, synthesize_dataset
from utils import FAMILIES, DIFFICULTIES, dataset_name

logging.basicConfig(level=logging.INFO)

n_samples = 64
preset = "tiny"
out_dir = os.path.dirname(os.path.abspath(__file__))

for idx_dataset, (family, difficulty) in enumerate((f, d) for f in FAMILIES for d in DIFFICULTIES):
    out_path = os.path.join(out_dir, f"{dataset_name(family, difficulty)}.fwds")
    # distinct seeds so that no two datasets share velocity maps
    spec = DatasetSpec.for_preset(family, difficulty, n_samples=n_samples, seed=1000 + idx_dataset, preset=preset)
    synthesize_dataset(spec, path=out_path)

print(f"{len(FAMILIES) * len(DIFFICULTIES)} datasets of {n_samples} samples written to '{out_dir}'")
