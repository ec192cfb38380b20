import json
from pathlib import Path

import pytest
import torch

from trigdiff.checkpoint import (
    capture_payload,
    load_checkpoint,
    restore_state,
    save_checkpoint,
)
from trigdiff.cli import model_meta, prepare_experiment, run_id_for, schedule_dict
from trigdiff.config import load_config
from trigdiff.training import (
    train_clean,
    train_conditional_backdoor,
    train_unconditional_backdoor,
)

ROOT = Path(__file__).resolve().parent.parent
CACHE_DIR = Path(__file__).resolve().parent / ".cache"
CALIBRATION_PATH = ROOT / "calibration" / "toy_calibration.json"


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains a toy model (minutes on one core)")


@pytest.fixture(scope="session")
def calibration():
    return json.loads(CALIBRATION_PATH.read_text())


class TrainedRun:
    """A trained toy model with everything evaluation needs."""

    def __init__(self, state, parts, cfg):
        self.state = state
        self.parts = parts
        self.cfg = cfg

    @property
    def model(self):
        return self.state.model

    @property
    def pairs(self):
        return self.state.pairs

    @property
    def schedule(self):
        return self.parts.schedule


def _train(cfg, *, clean: bool):
    parts = prepare_experiment(cfg, poisoned=not clean)
    conditional = cfg.pipeline == "conditional"
    if clean:
        state = train_clean(
            parts.model, parts.data, cfg.train, parts.schedule,
            conditional=conditional,
            mask_cfg=cfg.masks.build() if conditional else None,
        )
    elif conditional:
        state = train_conditional_backdoor(
            parts.model, parts.trigger_net, parts.pairs, parts.data,
            cfg.train, parts.schedule, cfg.masks.build(),
        )
    else:
        state = train_unconditional_backdoor(
            parts.model, parts.pairs, parts.data, cfg.train, parts.schedule
        )
    return state, parts


def cached_run(config_name: str, *, clean: bool = False) -> TrainedRun:
    """Train a reference model or restore it from the local cache.

    Cache keys include the full config hash, so any config change retrains.
    """
    cfg = load_config(ROOT / "configs" / f"{config_name}.yaml")
    tag = "clean" if clean else "backdoor"
    path = CACHE_DIR / f"{config_name}-{tag}-{run_id_for(cfg)}.ckpt"
    if path.exists():
        state = restore_state(load_checkpoint(path))
        parts = prepare_experiment(cfg, poisoned=not clean)
        # the restored pairs/net are authoritative; parts supplies data/schedule
        return TrainedRun(state, parts, cfg)
    state, parts = _train(cfg, clean=clean)
    vocab_size = len(parts.dataset.vocab) if parts.dataset.vocab else 0
    CACHE_DIR.mkdir(exist_ok=True)
    save_checkpoint(
        path, capture_payload(state, model_meta(cfg, vocab_size), schedule_dict(cfg), cfg.train)
    )
    return TrainedRun(state, parts, cfg)


@pytest.fixture(scope="session")
def uncond_backdoor_run():
    return cached_run("uncond_toy")


@pytest.fixture(scope="session")
def uncond_clean_run():
    return cached_run("uncond_toy", clean=True)


@pytest.fixture(scope="session")
def distributional_run():
    return cached_run("distributional_toy")


@pytest.fixture(scope="session")
def cond_backdoor_run():
    return cached_run("cond_toy")


@pytest.fixture(scope="session")
def cond_clean_run():
    return cached_run("cond_toy", clean=True)
