"""A miniature end-to-end run: synthesize data, train the end-to-end
mode for a few epochs, detect on the test split, and score it.

This uses a small configuration so it finishes in about a minute; the
full-size equivalent lives in the CLI (see README).

Run:  python demos/03_train_detect_eval.py
"""

import numpy as np

from csdetect.cli import build_state
from csdetect.config import load_config
from csdetect.pipeline import f1_on_records
from csdetect.regressor import encode_records, train
from csdetect.synthdata import make_dataset, split_records

cfg = load_config(overrides=[
    "seed=11", "height=96", "width=96", "n_train=60", "n_test=20",
    "cells_min=1", "cells_max=3", "blob_radius=8",
    "intensity_lo=145", "intensity_hi=165",
    "clutter_min=1", "clutter_max=3",
    "m=28", "L=11", "margin=8", "code_scale=0.25", "lambda=1.0",
    "bandwidth=2.0", "prune_threshold=5", "model=cellhead",
    "mode=ecnncs2", "epochs=12", "batch_size=20", "lr=0.003",
    "train_ista_max_iters=100",
])

records = make_dataset(cfg.synth_config(), 60, 0, 20)
train_recs = split_records(records, "train")
test_recs = split_records(records, "test")
print(f"{len(train_recs)} training patches, {len(test_recs)} test patches")

geometry = cfg.geometry()
codes = encode_records(train_recs, geometry)
state = build_state(cfg, train_records=train_recs, sparse_codes=codes)


def score():
    return f1_on_records(state.model, state.D, state.geometry,
                         cfg.recovery_cfg(), cfg.decode_cfg(),
                         test_recs, cfg.rho())


rep = score()
print(f"before training: {rep.summary_line()}")
history = train(state, train_recs, codes, epochs=cfg["epochs"],
                batch_size=cfg["batch_size"])
print(f"trained {state.epoch} epochs, loss {history[0]['train_loss']:.1f} "
      f"-> {history[-1]['train_loss']:.1f}")
rep = score()
print(f"after training:  {rep.summary_line()}")
