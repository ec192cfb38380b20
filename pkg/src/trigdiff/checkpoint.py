"""Checkpoint container with integrity checking, trigger serialization, the
run manifest, and exact train-state capture/restore.

File layout: a magic/version line, a sha256 digest line, then the torch
payload. A digest mismatch or unknown version refuses to load anything.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import time
from dataclasses import dataclass
from pathlib import Path

import torch

from . import __version__
from .errors import CheckpointError
from .models import EpsilonUNet
from .trigger import (
    DistributionalTrigger,
    TriggerGeneratorNet,
    TriggerTargetPair,
    UniversalTrigger,
)
from .training import TrainConfig, TrainState, init_train_state

MAGIC = b"TRIGDIFF-CKPT-v1"


def fingerprint_tensors(tensors) -> str:
    h = hashlib.sha256()
    for t in tensors:
        t = t.detach().contiguous()
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.cpu().numpy().tobytes())
    return h.hexdigest()


def fingerprint_module(module: torch.nn.Module) -> str:
    return fingerprint_tensors(v for _, v in sorted(module.state_dict().items()))


def save_checkpoint(path, payload: dict) -> None:
    buf = io.BytesIO()
    torch.save(payload, buf)
    raw = buf.getvalue()
    digest = hashlib.sha256(raw).hexdigest().encode()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC + b"\n" + digest + b"\n" + raw)


def load_checkpoint(path) -> dict:
    data = Path(path).read_bytes()
    head, _, rest = data.partition(b"\n")
    if head != MAGIC:
        raise CheckpointError(
            f"{path}: not a checkpoint of format {MAGIC.decode()} (found {head[:32]!r})"
        )
    digest, _, raw = rest.partition(b"\n")
    if hashlib.sha256(raw).hexdigest().encode() != digest:
        raise CheckpointError(f"{path}: integrity check failed; refusing to load")
    return torch.load(io.BytesIO(raw), weights_only=False)


def pairs_to_payload(pairs: list[TriggerTargetPair]) -> list[dict]:
    out = []
    for p in pairs:
        entry = {
            "identifier": p.identifier,
            "target": p.target,
            "target_name": p.target_name,
        }
        if isinstance(p.trigger, UniversalTrigger):
            entry.update(kind="universal", bound=p.trigger.bound, delta=p.trigger.delta)
        elif isinstance(p.trigger, DistributionalTrigger):
            entry.update(
                kind="distributional", bound=p.trigger.bound, delta=p.trigger.delta_mean
            )
        elif isinstance(p.trigger, TriggerGeneratorNet):
            entry.update(kind="generator", bound=p.trigger.bound)
        else:
            raise CheckpointError(f"cannot serialize trigger type {type(p.trigger).__name__}")
        out.append(entry)
    return out


def pairs_from_payload(payload: list[dict], trigger_net=None) -> list[TriggerTargetPair]:
    pairs = []
    for entry in payload:
        kind = entry["kind"]
        if kind == "universal":
            trig = UniversalTrigger(entry["delta"], entry["bound"], entry["identifier"])
        elif kind == "distributional":
            trig = DistributionalTrigger(entry["delta"], entry["bound"], entry["identifier"])
        elif kind == "generator":
            if trigger_net is None:
                raise CheckpointError("generator pair needs the deserialized trigger net")
            trig = trigger_net
        else:
            raise CheckpointError(f"unknown trigger kind {kind!r} in checkpoint")
        pairs.append(
            TriggerTargetPair(
                trigger=trig,
                target=entry["target"],
                identifier=entry["identifier"],
                target_name=entry.get("target_name", ""),
            )
        )
    return pairs


def capture_payload(
    state: TrainState,
    model_meta: dict,
    schedule_config: dict,
    train_config: TrainConfig,
    extra: dict | None = None,
) -> dict:
    payload = {
        "format": 1,
        "package_version": __version__,
        "model": state.model.state_dict(),
        "model_meta": dict(model_meta),
        "optimizer": state.optimizer.state_dict(),
        "pairs": pairs_to_payload(state.pairs),
        "outer_gen": state.outer_gen.get_state(),
        "inner_gen": state.inner_gen.get_state(),
        "step": state.step,
        "loss_trace": list(state.loss_trace),
        "inner_trace": list(state.inner_trace),
        "schedule": dict(schedule_config),
        "train_config": dataclasses.asdict(train_config),
        "extra": extra or {},
    }
    if state.trigger_net is not None:
        payload["trigger_net"] = state.trigger_net.state_dict()
        payload["trigger_net_meta"] = {
            "channels": state.trigger_net.channels,
            "base_width": state.trigger_net.base_width,
            "bound": state.trigger_net.bound,
        }
        payload["trigger_net_opt"] = state.trigger_net_opt.state_dict()
    return payload


def build_model_from_meta(meta: dict) -> EpsilonUNet:
    model = EpsilonUNet(
        channels=meta["channels"],
        base_width=meta["base_width"],
        time_dim=meta["time_dim"],
        conditional=meta["conditional"],
        vocab_size=meta["vocab_size"],
    )
    return model.to(getattr(torch, meta.get("dtype", "float32")))


def restore_state(payload: dict) -> TrainState:
    """Rebuild a TrainState exactly: model, triggers, optimizers, RNG streams."""
    if payload.get("format") != 1:
        raise CheckpointError(f"unsupported checkpoint format {payload.get('format')!r}")
    model = build_model_from_meta(payload["model_meta"])
    model.load_state_dict(payload["model"])
    trigger_net = None
    if "trigger_net" in payload:
        meta = payload["trigger_net_meta"]
        trigger_net = TriggerGeneratorNet(meta["channels"], meta["base_width"], meta["bound"])
        trigger_net = trigger_net.to(next(iter(payload["trigger_net"].values())).dtype)
        trigger_net.load_state_dict(payload["trigger_net"])
    pairs = pairs_from_payload(payload["pairs"], trigger_net=trigger_net)
    cfg = TrainConfig(**payload["train_config"])
    state = init_train_state(model, pairs, cfg, trigger_net=trigger_net)
    state.optimizer.load_state_dict(payload["optimizer"])
    if trigger_net is not None:
        state.trigger_net_opt.load_state_dict(payload["trigger_net_opt"])
    state.outer_gen.set_state(payload["outer_gen"])
    state.inner_gen.set_state(payload["inner_gen"])
    state.step = payload["step"]
    state.loss_trace = list(payload["loss_trace"])
    state.inner_trace = list(payload["inner_trace"])
    return state


@dataclass(frozen=True)
class RunManifest:
    run_id: str
    created_at: str
    package_version: str
    seed: int
    config: dict
    metrics_file: str = "metrics.jsonl"
    checkpoint_dir: str = "checkpoints"
    summary_file: str = "summary.json"

    @classmethod
    def create(cls, run_id: str, seed: int, config: dict) -> "RunManifest":
        return cls(
            run_id=run_id,
            created_at=time.strftime("%Y-%m-%dT%H:%M:%S"),
            package_version=__version__,
            seed=seed,
            config=config,
        )

    def write(self, run_dir) -> Path:
        path = Path(run_dir) / "manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2))
        return path

    @classmethod
    def load(cls, run_dir) -> "RunManifest":
        data = json.loads((Path(run_dir) / "manifest.json").read_text())
        return cls(**data)
