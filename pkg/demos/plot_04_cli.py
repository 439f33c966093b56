"""
Command-line workflow
=====================

The same pipeline through the ``ontobn`` command: generate data, train,
evaluate. Every run writes a manifest whose ``argv`` reproduces it.
"""
import json
import tempfile
from pathlib import Path

import numpy as np

from ontobn.cli import main
from ontobn.featurize import random_tree_ontology

work = Path(tempfile.mkdtemp())
(work / "tree.tsv").write_text(random_tree_ontology(30, 4, np.random.default_rng(1)).to_edge_list())

main(["generate", "--ontology", str(work / "tree.tsv"), "--seed", "1", "--instance-count", "1500",
      "--feature-dim", "20", "--splits", "0.6,0.2,0.2", "--bias-low", "-1", "--bias-high", "1",
      "--out-dir", str(work / "data")])
main(["train", "--ontology", str(work / "tree.tsv"), "--train", str(work / "data/train.jsonl"),
      "--valid", str(work / "data/valid.jsonl"), "--epochs", "5", "--embedding-size", "16",
      "--learning-rate", "0.01", "--deterministic", "--out-dir", str(work / "model")])
main(["evaluate", "--ontology", str(work / "tree.tsv"), "--checkpoint", str(work / "model/checkpoint.bin"),
      "--test", str(work / "data/test.jsonl"), "--train-counts", str(work / "model/label_dict.json"),
      "--n-resamples", "100", "--deterministic", "--out-dir", str(work / "eval")])

# %%
print((work / "eval/report.csv").read_text())
print("replay with:", json.loads((work / "model/manifest.json").read_text())["argv"])
