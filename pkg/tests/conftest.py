"""Shared fixtures. The toy training run is expensive (~2 min on CPU), so it
is done once per session and shared by the acceptance and model tests."""

from __future__ import annotations

import time

import pytest
import torch

from rdbound.data import SourceSpec, heldout_set
from rdbound.evaluation import log_lambdas, sweep
from rdbound.model import build, toy_config
from rdbound.training import TrainConfig, train

TOY_STEPS = 3000
TOY_SEED = 0
TOY_LR = 1e-3
HELDOUT = 512
MC_SAMPLES = 8

SYNTH = SourceSpec("synthetic_gaussian", dim=16, variance=1.0)


def toy_train_config(**kw) -> TrainConfig:
    kw.setdefault("steps", TOY_STEPS)
    kw.setdefault("batch_size", 32)
    kw.setdefault("learning_rate", TOY_LR)
    kw.setdefault("patch_size", 4)
    kw.setdefault("seed", TOY_SEED)
    return TrainConfig(**kw)


@pytest.fixture(scope="session", autouse=True)
def _threads():
    torch.set_num_threads(max(1, min(8, torch.get_num_threads())))


@pytest.fixture(scope="session")
def toy_run():
    model = build(toy_config(), seed=TOY_SEED)
    t0 = time.perf_counter()
    result = train(model, SYNTH, toy_train_config())
    result.seconds = time.perf_counter() - t0
    result.model.eval()
    return result


@pytest.fixture(scope="session")
def toy_heldout():
    return heldout_set(SYNTH, HELDOUT, 4, seed=12345)


@pytest.fixture(scope="session")
def toy_curve(toy_run, toy_heldout):
    return sweep(toy_run.model, toy_heldout, log_lambdas(8, 4, 2048), mc_samples=MC_SAMPLES, seed=7, label="toy")
