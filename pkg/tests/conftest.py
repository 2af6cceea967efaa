"""Shared fixtures.

The expensive artifacts (phantom dataset, pretrained codec, smoke-trained
model) are session-scoped and built lazily, so the whole suite pays for
codec pretraining and the 500-epoch smoke run exactly once.
"""

from __future__ import annotations

import os
import time

import numpy as np
import pytest

from moesr import training
from moesr.checkpoint import save_checkpoint
from moesr.config import desk_config
from moesr.losses import VarianceTracker


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory) -> str:
    """11 phantom pairs: train split of exactly 8, val of 3."""
    out = str(tmp_path_factory.mktemp("data"))
    splits = training.generate_dataset(out, 11, 0, val_frac=0.28)
    assert len(splits["train"]) == 8
    return out


@pytest.fixture(scope="session")
def smoke_cfg():
    return desk_config()


@pytest.fixture(scope="session")
def codec_run(dataset_dir, smoke_cfg, tmp_path_factory):
    """Full 2000-step codec pretrain; returns (run_dir, bundle, psnr)."""
    run = str(tmp_path_factory.mktemp("run"))
    _, records = training._load_pairs(dataset_dir, "train")
    bundle = training.build_bundle(smoke_cfg)
    t0 = time.time()
    final_psnr = training.pretrain_codec(bundle, smoke_cfg, records)
    elapsed = time.time() - t0
    path = os.path.join(run, training.CODEC_CKPT)
    save_checkpoint(path, bundle, smoke_cfg, 0,
                    VarianceTracker(smoke_cfg.var_decay))
    return {"dir": run, "bundle": bundle, "psnr": final_psnr,
            "seconds": elapsed, "records": records}


@pytest.fixture(scope="session")
def smoke_run(dataset_dir, smoke_cfg, codec_run):
    """The 500-epoch desk training on the 8-pair split."""
    t0 = time.time()
    final = training.train(smoke_cfg, dataset_dir, codec_run["dir"])
    elapsed = time.time() - t0
    bundle, cfg = training.load_model(final)
    return {"dir": codec_run["dir"], "ckpt": final, "bundle": bundle,
            "cfg": cfg, "seconds": elapsed,
            "log": os.path.join(codec_run["dir"], training.LOG_NAME)}


def read_log(path: str):
    """Training CSV -> dict of column -> list of floats."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        cols = {h: [] for h in header}
        for line in fh:
            for h, v in zip(header, line.strip().split(",")):
                cols[h].append(float(v))
    return cols


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)
