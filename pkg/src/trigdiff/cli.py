"""Command-line surface: experiment assembly, training/eval commands,
metrics documents, and image-grid export.

Every command takes a config file; artifacts land in the run directory
(manifest, line-delimited metrics, checkpoints, summary document, PNG
grids). Exit is nonzero with a single machine-parseable error line on
failure. The root seed can be overridden with the SEED environment variable.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import os
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__
from .checkpoint import (
    RunManifest,
    build_model_from_meta,
    capture_payload,
    load_checkpoint,
    pairs_from_payload,
    restore_state,
    save_checkpoint,
)
from .config import ExperimentConfig, config_to_dict, load_config
from .data import ingest_dataset, load_target
from .errors import CheckpointError, ConfigError, TrainingDiverged
from .evaluation import (
    RandomConvFeatures,
    attack_eval_unconditional,
    conditional_attack_eval,
    eval_clip_defense,
    frechet_feature_distance,
    mse_to_target,
    utility_eval_unconditional,
    verify_derivations,
    watermark_verify,
)
from .masks import apply_mask, draw_training_mask
from .models import build_model
from .sampling import SamplerConfig, sample_guided, sample_unconditional
from .training import (
    DefenseOutcome,
    TrainState,
    assemble_poisoned_dataset,
    derive_seed,
    finetune_clean_defense,
    finetune_pretrained_backdoor,
    init_train_state,
    train_clean,
    train_conditional_backdoor,
    train_unconditional_backdoor,
)
from .trigger import (
    DistributionalTrigger,
    TriggerTargetPair,
    UniversalTrigger,
    build_trigger_generator,
    generate_conditional_trigger,
)


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------


def run_id_for(cfg: ExperimentConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha1(blob).hexdigest()[:12]


class MetricsWriter:
    """Line-delimited metric records {run_id, step, metric, value}."""

    def __init__(self, path, run_id: str):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        self._f = open(path, "w")
        self._run_id = run_id

    def log(self, step: int, metric: str, value: float) -> None:
        rec = {"run_id": self._run_id, "step": step, "metric": metric, "value": value}
        self._f.write(json.dumps(rec) + "\n")

    def close(self) -> None:
        self._f.close()


def write_summary(run_dir, payload: dict, name: str = "summary.json") -> Path:
    path = Path(run_dir) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path


def save_image_grid(path, images: torch.Tensor, ncol: int = 8) -> Path:
    """Tile (N, C, H, W) images in [-1, 1] into a lossless 8-column PNG."""
    images = images.detach().float().clamp(-1, 1)
    n, c, h, w = images.shape
    ncol = min(ncol, n)
    rows = math.ceil(n / ncol)
    canvas = torch.full((c, rows * h, ncol * w), 1.0)
    for i in range(n):
        r, col = divmod(i, ncol)
        canvas[:, r * h : (r + 1) * h, col * w : (col + 1) * w] = images[i]
    arr = ((canvas + 1.0) * 127.5).round().clamp(0, 255).byte().numpy()
    arr = np.transpose(arr, (1, 2, 0))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")
    return path


# ---------------------------------------------------------------------------
# experiment assembly
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class ExperimentParts:
    cfg: ExperimentConfig
    schedule: object
    dataset: object
    data: object
    model: torch.nn.Module
    pairs: list[TriggerTargetPair]
    trigger_net: object


def build_pairs(cfg: ExperimentConfig, trigger_net=None) -> list[TriggerTargetPair]:
    res = cfg.dataset.resolution
    shape = (cfg.dataset.channels, res, res)
    pairs = []
    for i, name in enumerate(cfg.trigger.targets):
        target = load_target(name, res)
        ident = f"pair-{i}-{Path(name).stem}"
        if cfg.trigger.kind == "universal":
            trig = UniversalTrigger.zeros(shape, cfg.trigger.bound, ident)
        elif cfg.trigger.kind == "distributional":
            trig = DistributionalTrigger.zeros(shape, cfg.trigger.bound, ident)
        else:
            trig = trigger_net
        pairs.append(
            TriggerTargetPair(trigger=trig, target=target, identifier=ident, target_name=str(name))
        )
    return pairs


def prepare_experiment(cfg: ExperimentConfig, *, poisoned: bool = True) -> ExperimentParts:
    schedule = cfg.schedule.build()
    dataset = ingest_dataset(cfg.dataset, seed=derive_seed(cfg.seed, "dataset"))
    conditional = cfg.pipeline == "conditional"
    model = build_model(
        channels=cfg.dataset.channels,
        base_width=cfg.model.base_width,
        time_dim=cfg.model.time_dim,
        seed=derive_seed(cfg.seed, "model-init"),
        conditional=conditional,
        vocab_size=len(dataset.vocab) if conditional else 0,
    )
    trigger_net = None
    if cfg.trigger.kind == "generator":
        trigger_net = build_trigger_generator(
            cfg.dataset.channels,
            cfg.trigger.generator_width,
            cfg.trigger.bound,
            seed=derive_seed(cfg.seed, "trigger-net"),
        )
    pairs = build_pairs(cfg, trigger_net)
    rate = cfg.train.poison_rate if poisoned else 0.0
    data = assemble_poisoned_dataset(
        dataset.train_images,
        rate,
        pairs if rate > 0 else pairs,
        torch.Generator().manual_seed(derive_seed(cfg.seed, "poison-split")),
        captions=dataset.train_captions() if conditional else None,
        vocab=dataset.vocab if conditional else None,
    )
    return ExperimentParts(cfg, schedule, dataset, data, model, pairs, trigger_net)


def model_meta(cfg: ExperimentConfig, vocab_size: int) -> dict:
    return {
        "channels": cfg.dataset.channels,
        "base_width": cfg.model.base_width,
        "time_dim": cfg.model.time_dim,
        "conditional": cfg.pipeline == "conditional",
        "vocab_size": vocab_size,
        "dtype": "float32",
    }


def schedule_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg.schedule)


def _train_hooks(run_dir, cfg, metrics, meta, extra=None):
    ckpt_dir = Path(run_dir) / "checkpoints"

    def on_step(state: TrainState):
        metrics.log(state.step, "outer_loss", state.loss_trace[-1])
        if state.inner_trace:
            metrics.log(state.step, "inner_loss", state.inner_trace[-1])
        if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            payload = capture_payload(state, meta, schedule_dict(cfg), cfg.train, extra)
            save_checkpoint(ckpt_dir / f"step-{state.step:06d}.ckpt", payload)

    return on_step


def run_training_command(cfg: ExperimentConfig, run_dir, *, clean: bool) -> dict:
    parts = prepare_experiment(cfg, poisoned=not clean)
    run_dir = Path(run_dir)
    rid = run_id_for(cfg)
    RunManifest.create(rid, cfg.seed, config_to_dict(cfg)).write(run_dir)
    metrics = MetricsWriter(run_dir / "metrics.jsonl", rid)
    vocab_size = len(parts.dataset.vocab) if parts.dataset.vocab else 0
    meta = model_meta(cfg, vocab_size)
    on_step = _train_hooks(run_dir, cfg, metrics, meta)
    conditional = cfg.pipeline == "conditional"
    try:
        if clean:
            state = train_clean(
                parts.model, parts.data, cfg.train, parts.schedule,
                conditional=conditional,
                mask_cfg=cfg.masks.build() if conditional else None,
                on_step=on_step,
            )
        elif conditional:
            state = train_conditional_backdoor(
                parts.model, parts.trigger_net, parts.pairs, parts.data,
                cfg.train, parts.schedule, cfg.masks.build(), on_step=on_step,
            )
        else:
            state = train_unconditional_backdoor(
                parts.model, parts.pairs, parts.data, cfg.train, parts.schedule,
                on_step=on_step,
            )
    finally:
        metrics.close()
    payload = capture_payload(state, meta, schedule_dict(cfg), cfg.train)
    final = Path(run_dir) / "checkpoints" / "final.ckpt"
    save_checkpoint(final, payload)
    summary = {
        "run_id": rid,
        "steps": state.step,
        "final_outer_loss": state.loss_trace[-1] if state.loss_trace else None,
        "checkpoint": str(final),
        "clean": clean,
    }
    write_summary(run_dir, summary)
    return summary


def _load_for_eval(cfg: ExperimentConfig, ckpt_path):
    payload = load_checkpoint(ckpt_path)
    if payload.get("schedule") != schedule_dict(cfg):
        raise CheckpointError(
            f"checkpoint schedule {payload.get('schedule')} does not match config "
            f"{schedule_dict(cfg)}"
        )
    state = restore_state(payload)
    return state, payload


def _vocab_texts(vocab) -> list:
    """The empty string plus every single-word text of the vocabulary."""
    return [None] + [(w,) for w in vocab.words[1:]]


def _conditional_query_fn(model, cfg: ExperimentConfig, schedule, vocab):
    sampler = cfg.sampler.build()

    def query(conditioning_image, mask, text):
        tokens = None if text is None else vocab.encode(text)
        g = torch.Generator().manual_seed(derive_seed(cfg.seed, "query-noise"))
        noise = torch.randn(conditioning_image.shape, generator=g, dtype=conditioning_image.dtype)
        return sample_guided(
            model, noise[None], conditioning_image[None], mask[None], tokens, sampler, schedule
        )[0]

    return query


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _cmd_verify_math(cfg: ExperimentConfig | None, args) -> int:
    configs = None
    if cfg is not None:
        configs = [(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)]
        # the lemma composition needs small horizons; keep the defaults too
        configs = None if cfg.schedule.T > 10 else configs
    report = verify_derivations(schedule_configs=configs, seed=args.seed or 0)
    for line in report.summary_lines():
        print(line)
    if args.run_dir:
        write_summary(args.run_dir, report.to_dict(), name="derivation_report.json")
    print("all checks passed" if report.all_passed else "SOME CHECKS FAILED")
    return 0 if report.all_passed else 1


def _cmd_train(cfg, args, *, clean: bool) -> int:
    summary = run_training_command(cfg, args.run_dir or cfg.output_dir, clean=clean)
    print(json.dumps(summary, indent=2))
    return 0


def _cmd_finetune_backdoor(cfg, args) -> int:
    payload = load_checkpoint(args.checkpoint)
    if payload.get("schedule") != schedule_dict(cfg):
        raise CheckpointError("checkpoint schedule does not match config schedule")
    model = build_model_from_meta(payload["model_meta"])
    model.load_state_dict(payload["model"])
    parts = prepare_experiment(cfg)
    run_dir = Path(args.run_dir or cfg.output_dir)
    rid = run_id_for(cfg)
    RunManifest.create(rid, cfg.seed, config_to_dict(cfg)).write(run_dir)
    metrics = MetricsWriter(run_dir / "metrics.jsonl", rid)
    train_cfg = dataclasses.replace(cfg.train, mode="finetune")
    meta = payload["model_meta"]
    try:
        state = finetune_pretrained_backdoor(
            model, parts.pairs, parts.data, train_cfg, parts.schedule,
            trigger_net=parts.trigger_net,
            mask_cfg=cfg.masks.build() if cfg.pipeline == "conditional" else None,
            on_step=_train_hooks(run_dir, cfg, metrics, meta),
        )
    finally:
        metrics.close()
    final = run_dir / "checkpoints" / "final.ckpt"
    save_checkpoint(final, capture_payload(state, meta, schedule_dict(cfg), train_cfg))
    summary = {
        "run_id": rid,
        "steps": state.step,
        "epochs_equivalent": state.step * cfg.train.batch_size / parts.data.n_items,
        "checkpoint": str(final),
    }
    write_summary(run_dir, summary)
    print(json.dumps(summary, indent=2))
    return 0


def _sample_grids_unconditional(state, cfg, schedule, sampler, run_dir, n, triggered):
    g = torch.Generator().manual_seed(derive_seed(cfg.seed, "sample"))
    shape = (cfg.dataset.channels, cfg.dataset.resolution, cfg.dataset.resolution)
    eps = torch.randn((n,) + shape, generator=g)
    clean = sample_unconditional(state.model, eps, sampler, schedule)
    save_image_grid(Path(run_dir) / "noise_clean.png", eps)
    save_image_grid(Path(run_dir) / "samples_clean.png", clean)
    result = {"clean_grid": "samples_clean.png"}
    if triggered:
        for pair in state.pairs:
            x_T = pair.trigger.draw(eps, g)
            out = sample_unconditional(state.model, x_T, sampler, schedule)
            stem = pair.identifier
            save_image_grid(Path(run_dir) / f"noise_triggered_{stem}.png", x_T)
            save_image_grid(Path(run_dir) / f"samples_triggered_{stem}.png", out)
            result[f"attack_mse_{stem}"] = mse_to_target(out, pair.target)
    return result


def _sample_grids_conditional(state, cfg, schedule, sampler, run_dir, n, triggered, dataset):
    g = torch.Generator().manual_seed(derive_seed(cfg.seed, "sample"))
    vocab = dataset.vocab
    mask_cfg = cfg.masks.build()
    pool = dataset.holdout_images if len(dataset.holdout_images) else dataset.train_images
    texts = _vocab_texts(vocab)
    rows_in, rows_out, mses = [], [], {p.identifier: [] for p in state.pairs}
    clean_in, clean_out = [], []
    for i in range(n):
        img = pool[int(torch.randint(pool.shape[0], (1,), generator=g))]
        mask = draw_training_mask(img.shape[1:], mask_cfg, g)
        masked = apply_mask(img, mask)
        tokens_src = texts[i % len(texts)]
        tokens = None if tokens_src is None else vocab.encode(tokens_src)
        noise = torch.randn(img.shape, generator=g, dtype=img.dtype)
        out = sample_guided(state.model, noise[None], masked[None], mask[None], tokens, sampler, schedule)[0]
        clean_in.append(masked)
        clean_out.append(out)
        if triggered:
            pair = state.pairs[i % len(state.pairs)]
            with torch.no_grad():
                delta = generate_conditional_trigger(
                    state.trigger_net, masked, mask, pair.target, state.trigger_net.bound
                )
            trig_in = masked + delta
            trig_out = sample_guided(
                state.model, noise[None], trig_in[None], mask[None], tokens, sampler, schedule
            )[0]
            rows_in.append(trig_in)
            rows_out.append(trig_out)
            mses[pair.identifier].append(float((trig_out - pair.target).square().mean()))
    save_image_grid(Path(run_dir) / "inputs_clean.png", torch.stack(clean_in))
    save_image_grid(Path(run_dir) / "samples_clean.png", torch.stack(clean_out))
    result = {"clean_grid": "samples_clean.png"}
    if triggered:
        save_image_grid(Path(run_dir) / "inputs_triggered.png", torch.stack(rows_in))
        save_image_grid(Path(run_dir) / "samples_triggered.png", torch.stack(rows_out))
        for ident, vals in mses.items():
            if vals:
                result[f"attack_mse_{ident}"] = sum(vals) / len(vals)
    return result


def _cmd_sample(cfg, args) -> int:
    state, payload = _load_for_eval(cfg, args.checkpoint)
    if not state.pairs and args.triggered:
        state.pairs = build_pairs(cfg, state.trigger_net)
    schedule = cfg.schedule.build()
    sampler = dataclasses.replace(
        cfg.sampler.build(),
        kind=args.sampler or cfg.sampler.kind,
        clip_latents=args.clip or cfg.sampler.clip_latents,
    )
    run_dir = Path(args.run_dir or cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if cfg.pipeline == "conditional":
        dataset = ingest_dataset(cfg.dataset, seed=derive_seed(cfg.seed, "dataset"))
        result = _sample_grids_conditional(
            state, cfg, schedule, sampler, run_dir, args.n, args.triggered, dataset
        )
    else:
        result = _sample_grids_unconditional(
            state, cfg, schedule, sampler, run_dir, args.n, args.triggered
        )
    write_summary(run_dir, result, name="sample_summary.json")
    print(json.dumps(result, indent=2))
    return 0


def _cmd_attack_eval(cfg, args) -> int:
    state, payload = _load_for_eval(cfg, args.checkpoint)
    schedule = cfg.schedule.build()
    sampler = cfg.sampler.build()
    dataset = ingest_dataset(cfg.dataset, seed=derive_seed(cfg.seed, "dataset"))
    extractor = RandomConvFeatures(
        seed=cfg.eval.extractor_seed, channels=cfg.dataset.channels,
        feature_dim=cfg.eval.feature_dim,
    )
    n_mse = args.n or cfg.eval.mse_samples
    run_dir = Path(args.run_dir or cfg.output_dir)
    summary: dict = {"sampler": sampler.kind, "n_samples": n_mse}
    if cfg.pipeline == "conditional":
        vocab = dataset.vocab
        texts = _vocab_texts(vocab)
        pool = dataset.holdout_images if len(dataset.holdout_images) else dataset.train_images
        for pair in state.pairs:
            rep = conditional_attack_eval(
                state.model, state.trigger_net, pair.target, pool, cfg.masks.build(),
                texts, vocab, sampler, schedule, n_mse, derive_seed(cfg.seed, "attack-eval"),
            )
            summary[f"attack_mse_{pair.identifier}"] = rep.attack_mse
            base = conditional_attack_eval(
                state.model, state.trigger_net, pair.target, pool, cfg.masks.build(),
                texts, vocab, sampler, schedule, n_mse,
                derive_seed(cfg.seed, "attack-eval"), triggered=False,
            )
            summary[f"untriggered_mse_{pair.identifier}"] = base.attack_mse
    else:
        n_utility = min(cfg.eval.n_samples, max(4 * cfg.eval.feature_dim, 256))
        for pair in state.pairs:
            rep = attack_eval_unconditional(
                state.model, pair.trigger, pair.target, sampler, schedule, n_mse,
                derive_seed(cfg.seed, "attack-eval"),
            )
            summary[f"attack_mse_{pair.identifier}"] = rep.attack_mse
        util = utility_eval_unconditional(
            state.model, dataset.train_images, sampler, schedule, n_utility,
            extractor, derive_seed(cfg.seed, "utility-eval"),
        )
        summary["frechet_proxy"] = util.frechet_distance
        summary["extractor_id"] = util.extractor_id
    write_summary(run_dir, summary, name="attack_eval.json")
    print(json.dumps(summary, indent=2))
    return 0


def _cmd_watermark_verify(cfg, args) -> int:
    if cfg.pipeline != "conditional":
        raise ConfigError("watermark-verify requires a conditional pipeline config")
    state, payload = _load_for_eval(cfg, args.checkpoint)
    schedule = cfg.schedule.build()
    dataset = ingest_dataset(cfg.dataset, seed=derive_seed(cfg.seed, "dataset"))
    vocab = dataset.vocab
    pool = dataset.holdout_images if len(dataset.holdout_images) else dataset.train_images
    pair = state.pairs[0]
    query = _conditional_query_fn(state.model, cfg, schedule, vocab)
    net = state.trigger_net

    def trigger_fn(masked, mask):
        with torch.no_grad():
            return generate_conditional_trigger(net, masked, mask, pair.target, net.bound)

    verdict = watermark_verify(
        query, trigger_fn, pair.target, pool, cfg.masks.build(), _vocab_texts(vocab),
        n_queries=args.queries, threshold=args.threshold,
        generator=torch.Generator().manual_seed(derive_seed(cfg.seed, "watermark")),
    )
    run_dir = Path(args.run_dir or cfg.output_dir)
    summary = dataclasses.asdict(verdict)
    write_summary(run_dir, summary, name="watermark_verdict.json")
    print(json.dumps(summary, indent=2))
    return 0


def _cmd_defend_clip(cfg, args) -> int:
    state, payload = _load_for_eval(cfg, args.checkpoint)
    if cfg.pipeline != "unconditional":
        raise ConfigError("defend-clip evaluates the unconditional pipeline")
    schedule = cfg.schedule.build()
    pair = state.pairs[0]
    off, on = eval_clip_defense(
        state.model, pair.trigger, pair.target, cfg.sampler.build(), schedule,
        args.n or cfg.eval.mse_samples, derive_seed(cfg.seed, "clip-defense"),
    )
    summary = {
        "attack_mse_no_clip": off.attack_mse,
        "attack_mse_clip": on.attack_mse,
        "n_samples": off.n_samples,
    }
    write_summary(args.run_dir or cfg.output_dir, summary, name="clip_defense.json")
    print(json.dumps(summary, indent=2))
    return 0


def _cmd_defend_finetune(cfg, args) -> int:
    state, payload = _load_for_eval(cfg, args.checkpoint)
    if cfg.pipeline != "unconditional":
        raise ConfigError("defend-finetune evaluates the unconditional pipeline")
    schedule = cfg.schedule.build()
    dataset = ingest_dataset(cfg.dataset, seed=derive_seed(cfg.seed, "dataset"))
    pair = state.pairs[0]
    outcome: DefenseOutcome = finetune_clean_defense(
        state.model, dataset.train_images, args.epochs, cfg.train, schedule,
        trigger=pair.trigger, target=pair.target, sampler_cfg=cfg.sampler.build(),
        n_eval=args.n or cfg.eval.mse_samples,
        eval_seed=derive_seed(cfg.seed, "defense-eval"),
    )
    summary = dataclasses.asdict(outcome)
    write_summary(args.run_dir or cfg.output_dir, summary, name="finetune_defense.json")
    print(json.dumps(summary, indent=2))
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="trigdiff",
        description="Invisible-trigger backdoors for small diffusion models.",
    )
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_, needs_config=True, needs_checkpoint=False):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=needs_config, help="experiment config (YAML)")
        sp.add_argument("--run-dir", default=None, help="output directory (default: config output_dir)")
        if needs_checkpoint:
            sp.add_argument("--checkpoint", required=True, help="checkpoint to load")
        return sp

    sp = add("verify-math", "run the closed-form derivation checks", needs_config=False)
    sp.add_argument("--seed", type=int, default=0)

    add("train-clean", "train a clean model")
    add("train-backdoor", "bi-level backdoor training (pipeline from config)")
    add("finetune-backdoor", "inject a backdoor into a pretrained clean model", needs_checkpoint=True)

    sp = add("sample", "sample a checkpoint (clean and/or triggered grids)", needs_checkpoint=True)
    sp.add_argument("--triggered", action="store_true")
    sp.add_argument("--sampler", choices=["ddim", "dpmsolver2"], default=None)
    sp.add_argument("--clip", action="store_true")
    sp.add_argument("--n", type=int, default=16)

    sp = add("attack-eval", "attack and utility reports for a checkpoint", needs_checkpoint=True)
    sp.add_argument("--n", type=int, default=None)

    sp = add("watermark-verify", "black-box ownership verification", needs_checkpoint=True)
    sp.add_argument("--queries", type=int, default=50)
    sp.add_argument("--threshold", type=float, default=0.1)

    sp = add("defend-clip", "inference-time clipping defense evaluation", needs_checkpoint=True)
    sp.add_argument("--n", type=int, default=None)

    sp = add("defend-finetune", "clean fine-tuning defense evaluation", needs_checkpoint=True)
    sp.add_argument("--epochs", type=int, default=5)
    sp.add_argument("--n", type=int, default=None)

    return p


_HANDLERS = {
    "verify-math": _cmd_verify_math,
    "train-clean": lambda cfg, args: _cmd_train(cfg, args, clean=True),
    "train-backdoor": lambda cfg, args: _cmd_train(cfg, args, clean=False),
    "finetune-backdoor": _cmd_finetune_backdoor,
    "sample": _cmd_sample,
    "attack-eval": _cmd_attack_eval,
    "watermark-verify": _cmd_watermark_verify,
    "defend-clip": _cmd_defend_clip,
    "defend-finetune": _cmd_defend_finetune,
}


def _error_category(exc: Exception) -> str:
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, CheckpointError):
        return "checkpoint"
    if isinstance(exc, TrainingDiverged):
        return "training"
    if isinstance(exc, (FileNotFoundError, OSError)):
        return "io"
    if isinstance(exc, ValueError):
        return "config"
    return "internal"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = None
        if getattr(args, "config", None):
            cfg = load_config(args.config)
            if "SEED" in os.environ:
                cfg = dataclasses.replace(cfg, seed=int(os.environ["SEED"]))
        return _HANDLERS[args.command](cfg, args)
    except Exception as exc:  # noqa: BLE001 - single CLI error boundary
        if os.environ.get("TRIGDIFF_DEBUG"):
            raise
        print(f"ERROR {_error_category(exc)}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
