"""Bi-level training loops, clean training, fine-tune injection, and the
clean-fine-tune defense.

Randomness discipline: every run owns two generator streams derived from the
root seed, one consumed by outer steps (batch indices, timesteps, noise,
masks, caption nulling) and one by the inner trigger loop. Because the
streams are separate, a backdoor run with poison rate 0 consumes the outer
stream exactly like clean training and reproduces it bit for bit.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import torch

from .data import Vocabulary
from .diffusion import (
    CondPrior,
    forward_marginal_backdoored,
    forward_marginal_clean,
    loss_inner,
)
from .errors import TrainingDiverged
from .masks import MaskConfig, apply_mask, draw_training_mask
from .sampling import SamplerConfig
from .schedule import NoiseSchedule, consecutive_zeta_table
from .trigger import (
    DistributionalTrigger,
    TriggerGeneratorNet,
    TriggerTargetPair,
    UniversalTrigger,
    generate_conditional_trigger,
    project_linf,
)

TRAIN_MODES = ("scratch", "finetune")


def derive_seed(root: int, tag: str) -> int:
    """Stable stream seed derived from the root seed and a stream name."""
    digest = hashlib.blake2b(f"{root}:{tag}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big") % (2**63)


@dataclass(frozen=True)
class TrainConfig:
    outer_iterations: int = 1000
    inner_steps: int = 2
    inner_lr: float = 1e-3
    outer_lr: float = 2e-4
    batch_size: int = 16
    poison_rate: float = 0.0
    inner_sample_steps: int = 10
    inner_batch: int = 4
    inner_warmup: int = 0  # outer steps before trigger updates begin
    null_text_prob: float = 0.5
    seed: int = 0
    mode: str = "scratch"

    def __post_init__(self):
        if not 0.0 <= self.poison_rate <= 1.0:
            raise ValueError(f"poison_rate must be in [0, 1], got {self.poison_rate}")
        if self.inner_warmup < 0:
            raise ValueError(f"inner_warmup must be >= 0, got {self.inner_warmup}")
        if self.inner_steps < 1:
            raise ValueError(f"inner_steps must be >= 1, got {self.inner_steps}")
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"mode must be one of {TRAIN_MODES}, got {self.mode!r}")
        if self.batch_size < 1 or self.inner_batch < 1:
            raise ValueError("batch sizes must be >= 1")
        if not 0.0 <= self.null_text_prob <= 1.0:
            raise ValueError(f"null_text_prob must be in [0, 1], got {self.null_text_prob}")


@dataclass
class PoisonedDataset:
    """Clean split plus designated poisoned items with their pair assignment."""

    images: torch.Tensor
    poison_mask: torch.Tensor  # bool (N,)
    pair_ids: torch.Tensor  # long (N,), -1 for clean items
    captions: list[tuple[str, ...]] | None = None
    vocab: Vocabulary | None = None

    @property
    def n_items(self) -> int:
        return int(self.images.shape[0])

    @property
    def n_poisoned(self) -> int:
        return int(self.poison_mask.sum())

    def clean_indices(self) -> torch.Tensor:
        return (~self.poison_mask).nonzero().flatten()


def assemble_poisoned_dataset(
    images: torch.Tensor,
    poison_rate: float,
    pairs: list[TriggerTargetPair],
    generator: torch.Generator,
    captions=None,
    vocab: Vocabulary | None = None,
) -> PoisonedDataset:
    """Designate round(rate * N) items as poisoned; multiple pairs are
    assigned round-robin. Deterministic under the generator state."""
    if not 0.0 <= poison_rate <= 1.0:
        raise ValueError(f"poison_rate must be in [0, 1], got {poison_rate}")
    n = images.shape[0]
    n_poisoned = int(round(poison_rate * n))
    if n_poisoned > 0 and not pairs:
        raise ValueError("poison_rate > 0 requires at least one trigger-target pair")
    perm = torch.randperm(n, generator=generator)
    poison_mask = torch.zeros(n, dtype=torch.bool)
    pair_ids = torch.full((n,), -1, dtype=torch.long)
    for i in range(n_poisoned):
        poison_mask[perm[i]] = True
        pair_ids[perm[i]] = i % len(pairs)
    return PoisonedDataset(images, poison_mask, pair_ids, captions, vocab)


@dataclass
class TrainState:
    """Everything a run mutates; checkpointable and resumable."""

    model: torch.nn.Module
    optimizer: torch.optim.Optimizer
    pairs: list[TriggerTargetPair]
    trigger_net: TriggerGeneratorNet | None
    trigger_net_opt: torch.optim.Optimizer | None
    outer_gen: torch.Generator
    inner_gen: torch.Generator
    step: int = 0
    loss_trace: list[float] = field(default_factory=list)
    inner_trace: list[float] = field(default_factory=list)


def init_train_state(
    model: torch.nn.Module,
    pairs: list[TriggerTargetPair],
    cfg: TrainConfig,
    trigger_net: TriggerGeneratorNet | None = None,
) -> TrainState:
    net_opt = (
        torch.optim.SGD(trigger_net.parameters(), lr=cfg.inner_lr)
        if trigger_net is not None
        else None
    )
    return TrainState(
        model=model,
        optimizer=torch.optim.Adam(model.parameters(), lr=cfg.outer_lr),
        pairs=pairs,
        trigger_net=trigger_net,
        trigger_net_opt=net_opt,
        outer_gen=torch.Generator().manual_seed(derive_seed(cfg.seed, "outer")),
        inner_gen=torch.Generator().manual_seed(derive_seed(cfg.seed, "inner")),
    )


def _encode_texts(data: PoisonedDataset, idx: torch.Tensor, null_flags: torch.Tensor):
    if data.captions is None:
        return None
    rows = []
    for i, item in enumerate(idx.tolist()):
        cap = None if bool(null_flags[i]) else data.captions[item]
        rows.append(data.vocab.encode(cap))
    return torch.stack(rows)


def _mean_subset_loss(residual_sq_sums: list[tuple[torch.Tensor, int]], batch: int):
    """Combine per-subset mean losses into the full-batch mean."""
    total = None
    for loss, count in residual_sq_sums:
        term = loss * (count / batch)
        total = term if total is None else total + term
    return total


def _outer_step_unconditional(state: TrainState, data: PoisonedDataset, cfg, schedule, zetas):
    g = state.outer_gen
    b = cfg.batch_size
    images = data.images
    idx = torch.randint(data.n_items, (b,), generator=g)
    t = torch.randint(1, schedule.T + 1, (b,), generator=g)
    eps = torch.randn((b,) + images.shape[1:], generator=g, dtype=images.dtype)
    x0 = images[idx]
    poisoned = data.poison_mask[idx]

    terms = []
    clean_sel = ~poisoned
    n_clean = int(clean_sel.sum())
    if n_clean:
        x_t = forward_marginal_clean(x0[clean_sel], t[clean_sel], eps[clean_sel], schedule)
        pred = state.model(x_t, t[clean_sel])
        terms.append(((eps[clean_sel] - pred).square().mean(), n_clean))
    if int(poisoned.sum()):
        batch_pids = data.pair_ids[idx]
        for pid in sorted(set(batch_pids[poisoned].tolist())):
            sel = poisoned & (batch_pids == pid)
            n_sel = int(sel.sum())
            pair = state.pairs[pid]
            trig = pair.trigger
            if isinstance(trig, DistributionalTrigger):
                xi = torch.randn((n_sel,) + images.shape[1:], generator=g, dtype=images.dtype)
                delta = trig.delta_mean + xi
            else:
                delta = trig.delta
            y = pair.target.expand((n_sel,) + pair.target.shape)
            x_t = forward_marginal_backdoored(y, delta, t[sel], eps[sel], schedule)
            zeta = zetas[t[sel]].to(eps.dtype).reshape(-1, 1, 1, 1)
            target = eps[sel] + zeta * delta
            pred = state.model(x_t, t[sel])
            terms.append(((target - pred).square().mean(), n_sel))

    loss = _mean_subset_loss(terms, b)
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    return float(loss.detach())


def _outer_step_conditional(state: TrainState, data: PoisonedDataset, cfg, schedule, mask_cfg):
    g = state.outer_gen
    b = cfg.batch_size
    images = data.images
    shape = images.shape[2:]
    idx = torch.randint(data.n_items, (b,), generator=g)
    t = torch.randint(1, schedule.T + 1, (b,), generator=g)
    eps = torch.randn((b,) + images.shape[1:], generator=g, dtype=images.dtype)
    masks = torch.stack([draw_training_mask(shape, mask_cfg, g) for _ in range(b)])
    null_flags = torch.rand(b, generator=g) < cfg.null_text_prob
    texts = _encode_texts(data, idx, null_flags)
    x0 = images[idx]
    poisoned = data.poison_mask[idx]
    n_pois = int(poisoned.sum())

    terms = []
    clean_sel = ~poisoned
    n_clean = int(clean_sel.sum())
    if n_clean:
        x_t = forward_marginal_clean(x0[clean_sel], t[clean_sel], eps[clean_sel], schedule)
        masked = apply_mask(x0[clean_sel], masks[clean_sel])
        pred = state.model(x_t, t[clean_sel], masked, masks[clean_sel], texts[clean_sel])
        terms.append(((eps[clean_sel] - pred).square().mean(), n_clean))
    if n_pois:
        clean_pool = data.clean_indices()
        pick = torch.randint(len(clean_pool), (n_pois,), generator=g)
        x_c = images[clean_pool[pick]]
        batch_pids = data.pair_ids[idx][poisoned]
        targets = torch.stack([state.pairs[int(p)].target for p in batch_pids])
        m_p = masks[poisoned]
        masked_c = apply_mask(x_c, m_p)
        with torch.no_grad():
            delta = generate_conditional_trigger(
                state.trigger_net, masked_c, m_p, targets, state.trigger_net.bound
            )
        y_t = forward_marginal_clean(targets, t[poisoned], eps[poisoned], schedule)
        pred = state.model(y_t, t[poisoned], masked_c + delta, m_p, texts[poisoned])
        terms.append(((eps[poisoned] - pred).square().mean(), n_pois))

    loss = _mean_subset_loss(terms, b)
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    return float(loss.detach())


def _inner_phase_unconditional(state: TrainState, cfg, schedule, inner_cfg):
    g = state.inner_gen
    for _ in range(cfg.inner_steps):
        for pair in state.pairs:
            trig = pair.trigger
            distributional = isinstance(trig, DistributionalTrigger)
            current = trig.delta_mean if distributional else trig.delta
            shape = current.shape
            eps_tilde = torch.randn((cfg.inner_batch,) + shape, generator=g, dtype=current.dtype)
            d = current.detach().clone().requires_grad_(True)
            if distributional:
                xi = torch.randn((cfg.inner_batch,) + shape, generator=g, dtype=current.dtype)
                applied = d + xi
            else:
                applied = d
            loss = loss_inner(state.model, eps_tilde, applied, pair.target, inner_cfg, schedule)
            (grad,) = torch.autograd.grad(loss, d)
            updated = project_linf((d - cfg.inner_lr * grad).detach(), trig.bound)
            if distributional:
                trig.delta_mean = updated
            else:
                trig.delta = updated
            state.inner_trace.append(float(loss.detach()))


def _inner_phase_conditional(state: TrainState, data: PoisonedDataset, cfg, schedule, mask_cfg, inner_cfg):
    g = state.inner_gen
    images = data.images
    shape = images.shape[2:]
    for _ in range(cfg.inner_steps):
        b = cfg.inner_batch
        idx = torch.randint(data.n_items, (b,), generator=g)
        masks = torch.stack([draw_training_mask(shape, mask_cfg, g) for _ in range(b)])
        null_flags = torch.rand(b, generator=g) < cfg.null_text_prob
        texts = _encode_texts(data, idx, null_flags)
        pids = torch.randint(len(state.pairs), (b,), generator=g)
        targets = torch.stack([state.pairs[int(p)].target for p in pids])
        noise = torch.randn((b,) + images.shape[1:], generator=g, dtype=images.dtype)
        masked = apply_mask(images[idx], masks)
        delta = generate_conditional_trigger(
            state.trigger_net, masked, masks, targets, state.trigger_net.bound
        )
        prior = CondPrior(noise=noise, masked_image=masked, mask=masks, text=texts)
        loss = loss_inner(state.model, prior, delta, targets, inner_cfg, schedule)
        state.trigger_net_opt.zero_grad(set_to_none=True)
        loss.backward()
        state.trigger_net_opt.step()
        state.inner_trace.append(float(loss.detach()))


def _run_training(
    state: TrainState,
    data: PoisonedDataset,
    cfg: TrainConfig,
    schedule: NoiseSchedule,
    *,
    conditional: bool,
    mask_cfg: MaskConfig | None = None,
    run_inner: bool,
    on_step=None,
) -> TrainState:
    if cfg.inner_sample_steps > schedule.T:
        raise ValueError("inner_sample_steps exceeds schedule horizon")
    if conditional and mask_cfg is None:
        raise ValueError("conditional training needs a mask config")
    zetas = consecutive_zeta_table(schedule)
    inner_cfg = SamplerConfig(
        kind="ddim", n_steps=cfg.inner_sample_steps, eta=0.0, differentiable=True
    )
    for k in range(state.step, cfg.outer_iterations):
        if run_inner and k >= cfg.inner_warmup:
            if conditional:
                _inner_phase_conditional(state, data, cfg, schedule, mask_cfg, inner_cfg)
            else:
                _inner_phase_unconditional(state, cfg, schedule, inner_cfg)
        if conditional:
            loss = _outer_step_conditional(state, data, cfg, schedule, mask_cfg)
        else:
            loss = _outer_step_unconditional(state, data, cfg, schedule, zetas)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"outer loss non-finite at step {k}: {loss}")
        state.loss_trace.append(loss)
        state.step = k + 1
        if on_step is not None:
            on_step(state)
    return state


def train_clean(
    model,
    data: PoisonedDataset,
    cfg: TrainConfig,
    schedule: NoiseSchedule,
    *,
    conditional: bool = False,
    mask_cfg: MaskConfig | None = None,
    on_step=None,
    state: TrainState | None = None,
) -> TrainState:
    """Standard noise-prediction training (the poison_rate = 0 path)."""
    if data.n_poisoned:
        raise ValueError("train_clean requires a dataset with no poisoned items")
    state = state or init_train_state(model, [], cfg)
    return _run_training(
        state, data, cfg, schedule,
        conditional=conditional, mask_cfg=mask_cfg, run_inner=False, on_step=on_step,
    )


def train_unconditional_backdoor(
    model,
    pairs: list[TriggerTargetPair],
    data: PoisonedDataset,
    cfg: TrainConfig,
    schedule: NoiseSchedule,
    *,
    on_step=None,
    state: TrainState | None = None,
) -> TrainState:
    """Alternating trigger/model optimization with noise priors.

    Inner steps mutate only trigger parameters (model frozen); the outer step
    mutates only model parameters. Trigger state carries across outer
    iterations. Universal and distributional pairs may be mixed.
    """
    bounds = {p.trigger.bound for p in pairs}
    if len(bounds) > 1:
        raise ValueError(f"all pairs must share one norm bound, got {sorted(bounds)}")
    state = state or init_train_state(model, pairs, cfg)
    return _run_training(
        state, data, cfg, schedule,
        conditional=False, run_inner=bool(pairs), on_step=on_step,
    )


def train_conditional_backdoor(
    model,
    trigger_net: TriggerGeneratorNet,
    pairs: list[TriggerTargetPair],
    data: PoisonedDataset,
    cfg: TrainConfig,
    schedule: NoiseSchedule,
    mask_cfg: MaskConfig,
    *,
    on_step=None,
    state: TrainState | None = None,
) -> TrainState:
    """Alternating generator/model optimization for the inpainting pipeline.

    Fresh random masks per sample per step in both loops; the caption is
    replaced by the empty string with probability null_text_prob; the inner
    chain samples single-branch (no guidance mixing). Multiple targets share
    one generator, which receives the pair's target as input.
    """
    if data.captions is None or data.vocab is None:
        raise ValueError("conditional training needs a captioned dataset")
    state = state or init_train_state(model, pairs, cfg, trigger_net=trigger_net)
    return _run_training(
        state, data, cfg, schedule,
        conditional=True, mask_cfg=mask_cfg, run_inner=True, on_step=on_step,
    )


def finetune_pretrained_backdoor(
    model,
    pairs: list[TriggerTargetPair],
    data: PoisonedDataset,
    cfg: TrainConfig,
    schedule: NoiseSchedule,
    *,
    trigger_net: TriggerGeneratorNet | None = None,
    mask_cfg: MaskConfig | None = None,
    on_step=None,
) -> TrainState:
    """Backdoor injection starting from a pretrained clean checkpoint; the
    loop is identical to scratch training, only the starting point differs."""
    if cfg.mode != "finetune":
        raise ValueError("finetune_pretrained_backdoor requires cfg.mode == 'finetune'")
    if trigger_net is not None:
        return train_conditional_backdoor(
            model, trigger_net, pairs, data, cfg, schedule, mask_cfg, on_step=on_step
        )
    return train_unconditional_backdoor(model, pairs, data, cfg, schedule, on_step=on_step)


@dataclass(frozen=True)
class DefenseOutcome:
    attack_mse_before: float
    attack_mse_after: float
    epochs: int
    steps: int


def finetune_clean_defense(
    model,
    clean_images: torch.Tensor,
    epochs: int,
    cfg: TrainConfig,
    schedule: NoiseSchedule,
    *,
    trigger,
    target: torch.Tensor,
    sampler_cfg: SamplerConfig,
    n_eval: int = 64,
    eval_seed: int = 1234,
) -> DefenseOutcome:
    """Fine-tune a backdoored model on clean data only, reporting triggered
    MSE before and after. The defense fails if the after value stays below
    the attack-success bar."""
    from .evaluation import attack_eval_unconditional

    before = attack_eval_unconditional(
        model, trigger, target, sampler_cfg, schedule, n_eval, eval_seed
    ).attack_mse
    steps = epochs * math.ceil(clean_images.shape[0] / cfg.batch_size)
    if steps > 0:
        data = PoisonedDataset(
            images=clean_images,
            poison_mask=torch.zeros(clean_images.shape[0], dtype=torch.bool),
            pair_ids=torch.full((clean_images.shape[0],), -1, dtype=torch.long),
        )
        defense_cfg = replace(cfg, outer_iterations=steps, poison_rate=0.0, mode="scratch")
        train_clean(model, data, defense_cfg, schedule)
    after = attack_eval_unconditional(
        model, trigger, target, sampler_cfg, schedule, n_eval, eval_seed
    ).attack_mse
    return DefenseOutcome(before, after, epochs, steps)
