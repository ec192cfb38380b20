#!/usr/bin/env python3
"""Calibration pilot for the toy-scale attack experiments.

Trains the five reference models (unconditional backdoor + clean baseline,
distributional-trigger backdoor, conditional backdoor + clean baseline) from
the committed configs, measures attack/utility/watermark metrics, and writes
calibration/toy_calibration.json with the measured values and the acceptance
bars derived from them. Run from the repository root:

    python scripts/calibrate_toy.py [--quick]

--quick shrinks the runs (for smoke-testing this script, not for producing
the committed calibration file).
"""

import argparse
import copy
import dataclasses
import json
import sys
import time
from pathlib import Path

import torch

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "src"))

from trigdiff.checkpoint import capture_payload, save_checkpoint
from trigdiff.cli import _vocab_texts, model_meta, prepare_experiment, schedule_dict
from trigdiff.config import load_config
from trigdiff.evaluation import (
    RandomConvFeatures,
    attack_eval_unconditional,
    conditional_attack_eval,
    eval_clip_defense,
    frechet_feature_distance,
    utility_eval_unconditional,
    watermark_verify,
)
from trigdiff.sampling import SamplerConfig
from trigdiff.training import (
    derive_seed,
    finetune_clean_defense,
    train_clean,
    train_conditional_backdoor,
    train_unconditional_backdoor,
)
from trigdiff.trigger import generate_conditional_trigger

CONFIG_DIR = ROOT / "configs"
OUT_PATH = ROOT / "calibration" / "toy_calibration.json"


def train_from_config(cfg, *, clean: bool):
    parts = prepare_experiment(cfg, poisoned=not clean)
    conditional = cfg.pipeline == "conditional"
    t0 = time.time()
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
    return state, parts, time.time() - t0


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--quick", action="store_true", help="short smoke-test runs")
    ap.add_argument("--save-checkpoints", action="store_true",
                    help="also store the trained pilot models under calibration/")
    args = ap.parse_args()

    uncond_cfg = load_config(CONFIG_DIR / "uncond_toy.yaml")
    dist_cfg = load_config(CONFIG_DIR / "distributional_toy.yaml")
    cond_cfg = load_config(CONFIG_DIR / "cond_toy.yaml")
    if args.quick:
        def shrink(c):
            return dataclasses.replace(
                c, train=dataclasses.replace(c.train, outer_iterations=60, inner_warmup=20)
            )
        uncond_cfg, dist_cfg, cond_cfg = map(shrink, (uncond_cfg, dist_cfg, cond_cfg))

    results: dict = {"timings_sec": {}}

    # --- unconditional: backdoor + clean baseline -------------------------
    print("== unconditional backdoor ==", flush=True)
    state_u, parts_u, dt = train_from_config(uncond_cfg, clean=False)
    results["timings_sec"]["uncond_backdoor"] = round(dt, 1)
    sampler = uncond_cfg.sampler.build()
    pair = state_u.pairs[0]
    rep = attack_eval_unconditional(
        state_u.model, pair.trigger, pair.target, sampler, parts_u.schedule,
        uncond_cfg.eval.mse_samples, derive_seed(uncond_cfg.seed, "attack-eval"),
    )
    results["uncond_attack_mse"] = rep.attack_mse
    print(f"   triggered attack MSE: {rep.attack_mse:.5f}", flush=True)

    print("== unconditional clean baseline ==", flush=True)
    state_c, parts_c, dt = train_from_config(uncond_cfg, clean=True)
    results["timings_sec"]["uncond_clean"] = round(dt, 1)
    extractor = RandomConvFeatures(
        seed=uncond_cfg.eval.extractor_seed, channels=3,
        feature_dim=uncond_cfg.eval.feature_dim,
    )
    n_util = uncond_cfg.eval.n_samples
    util_seed = derive_seed(uncond_cfg.seed, "utility-eval")
    fd_backdoor = utility_eval_unconditional(
        state_u.model, parts_u.dataset.train_images, sampler, parts_u.schedule,
        n_util, extractor, util_seed,
    ).frechet_distance
    fd_clean = utility_eval_unconditional(
        state_c.model, parts_c.dataset.train_images, sampler, parts_c.schedule,
        n_util, extractor, util_seed,
    ).frechet_distance
    results["uncond_frechet_backdoor"] = fd_backdoor
    results["uncond_frechet_clean"] = fd_clean
    print(f"   frechet proxy: backdoor {fd_backdoor:.3f} vs clean {fd_clean:.3f} "
          f"(ratio {fd_backdoor / max(fd_clean, 1e-9):.2f})", flush=True)

    # clipping defense + clean fine-tune defense on the backdoored model
    off, on = eval_clip_defense(
        state_u.model, pair.trigger, pair.target, sampler, parts_u.schedule,
        uncond_cfg.eval.mse_samples, derive_seed(uncond_cfg.seed, "clip-defense"),
    )
    results["clip_mse_off"], results["clip_mse_on"] = off.attack_mse, on.attack_mse
    print(f"   clip defense: off {off.attack_mse:.5f} on {on.attack_mse:.5f}", flush=True)

    dpm = attack_eval_unconditional(
        state_u.model, pair.trigger, pair.target,
        dataclasses.replace(sampler, kind="dpmsolver2"), parts_u.schedule,
        uncond_cfg.eval.mse_samples, derive_seed(uncond_cfg.seed, "attack-eval"),
    )
    results["uncond_attack_mse_dpmsolver2"] = dpm.attack_mse
    print(f"   dpmsolver2 attack MSE: {dpm.attack_mse:.5f}", flush=True)

    defended = copy.deepcopy(state_u.model)
    outcome = finetune_clean_defense(
        defended, parts_u.dataset.train_images, 5, uncond_cfg.train, parts_u.schedule,
        trigger=pair.trigger, target=pair.target, sampler_cfg=sampler,
        n_eval=uncond_cfg.eval.mse_samples,
        eval_seed=derive_seed(uncond_cfg.seed, "defense-eval"),
    )
    results["finetune_defense_before"] = outcome.attack_mse_before
    results["finetune_defense_after"] = outcome.attack_mse_after
    print(f"   clean fine-tune defense: before {outcome.attack_mse_before:.5f} "
          f"after {outcome.attack_mse_after:.5f}", flush=True)

    # --- distributional trigger ------------------------------------------
    print("== distributional trigger ==", flush=True)
    state_d, parts_d, dt = train_from_config(dist_cfg, clean=False)
    results["timings_sec"]["distributional"] = round(dt, 1)
    pair_d = state_d.pairs[0]
    rep_d = attack_eval_unconditional(
        state_d.model, pair_d.trigger, pair_d.target, dist_cfg.sampler.build(),
        parts_d.schedule, dist_cfg.eval.mse_samples,
        derive_seed(dist_cfg.seed, "attack-eval"),
    )
    results["dist_attack_mse"] = rep_d.attack_mse
    print(f"   triggered attack MSE: {rep_d.attack_mse:.5f}", flush=True)

    # --- conditional: backdoor + clean baseline ---------------------------
    print("== conditional backdoor ==", flush=True)
    state_k, parts_k, dt = train_from_config(cond_cfg, clean=False)
    results["timings_sec"]["cond_backdoor"] = round(dt, 1)
    vocab = parts_k.dataset.vocab
    texts = _vocab_texts(vocab)
    pool = parts_k.dataset.holdout_images
    cond_sampler = cond_cfg.sampler.build()
    pair_k = state_k.pairs[0]
    per_text = {}
    for t in texts:
        rep_t = conditional_attack_eval(
            state_k.model, state_k.trigger_net, pair_k.target, pool,
            cond_cfg.masks.build(), [t], vocab, cond_sampler, parts_k.schedule,
            8, derive_seed(cond_cfg.seed, "attack-eval"),
        )
        per_text["null" if t is None else " ".join(t)] = rep_t.attack_mse
    results["cond_attack_mse_per_text"] = per_text
    results["cond_attack_mse_max"] = max(per_text.values())
    base = conditional_attack_eval(
        state_k.model, state_k.trigger_net, pair_k.target, pool, cond_cfg.masks.build(),
        texts, vocab, cond_sampler, parts_k.schedule, 32,
        derive_seed(cond_cfg.seed, "attack-eval"), triggered=False,
    )
    results["cond_untriggered_mse"] = base.attack_mse
    print(f"   triggered MSE per text: {per_text}", flush=True)
    print(f"   untriggered MSE: {base.attack_mse:.4f}", flush=True)

    print("== conditional clean baseline ==", flush=True)
    state_kc, parts_kc, dt = train_from_config(cond_cfg, clean=True)
    results["timings_sec"]["cond_clean"] = round(dt, 1)

    def query_for(model):
        def query(conditioning, mask, text):
            tokens = None if text is None else vocab.encode(text)
            g = torch.Generator().manual_seed(derive_seed(cond_cfg.seed, "query-noise"))
            noise = torch.randn(conditioning.shape, generator=g, dtype=conditioning.dtype)
            from trigdiff.sampling import sample_guided

            return sample_guided(
                model, noise[None], conditioning[None], mask[None], tokens,
                cond_sampler, parts_k.schedule,
            )[0]
        return query

    net = state_k.trigger_net

    def trigger_fn(masked, mask):
        with torch.no_grad():
            return generate_conditional_trigger(net, masked, mask, pair_k.target, net.bound)

    for label, model in (("watermarked", state_k.model), ("clean", state_kc.model)):
        verdict = watermark_verify(
            query_for(model), trigger_fn, pair_k.target, pool, cond_cfg.masks.build(),
            texts, n_queries=50, threshold=0.1,
            generator=torch.Generator().manual_seed(derive_seed(cond_cfg.seed, "watermark")),
        )
        results[f"watermark_mse_{label}"] = verdict.mse_mean
        results[f"watermark_var_{label}"] = verdict.mse_variance
        print(f"   watermark query MSE ({label}): {verdict.mse_mean:.4f}", flush=True)

    # --- bars --------------------------------------------------------------
    # A4/A5/A7/A8/A9/A11 bars are fixed by the acceptance criteria; the
    # conditional bars are calibrated from the pilot with ~2x headroom,
    # capped by the watermark threshold for A7 coherence.
    cond_bar = min(0.1, 2.0 * results["cond_attack_mse_max"])
    untrig_bar = 0.5 * results["cond_untriggered_mse"]
    bars = {
        "a4_attack_mse": 0.05,
        "a4_frechet_ratio": 1.5,
        "a5_attack_mse": 0.05,
        "a6_attack_mse": round(cond_bar, 4),
        "a6_untriggered_min": round(untrig_bar, 4),
        "a7_threshold": 0.1,
        "a8_clip_ratio": 2.0,
        "a9_attack_mse": 0.05,
        "a11_dpm_ratio": 3.0,
    }
    payload = {
        "tag": "toy-calibration-v1",
        "generated_by": "scripts/calibrate_toy.py",
        "quick": args.quick,
        "bars": bars,
        "pilot_metrics": results,
    }
    OUT_PATH.parent.mkdir(parents=True, exist_ok=True)
    OUT_PATH.write_text(json.dumps(payload, indent=2, sort_keys=True))
    print(f"wrote {OUT_PATH}")

    if args.save_checkpoints:
        for name, (state, cfg) in {
            "uncond_backdoor": (state_u, uncond_cfg),
            "uncond_clean": (state_c, uncond_cfg),
            "distributional": (state_d, dist_cfg),
            "cond_backdoor": (state_k, cond_cfg),
            "cond_clean": (state_kc, cond_cfg),
        }.items():
            vocab_size = len(parts_k.dataset.vocab) if cfg.pipeline == "conditional" else 0
            save_checkpoint(
                OUT_PATH.parent / f"{name}.ckpt",
                capture_payload(state, model_meta(cfg, vocab_size), schedule_dict(cfg), cfg.train),
            )
    return 0


if __name__ == "__main__":
    sys.exit(main())
