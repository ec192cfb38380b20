import dataclasses

import pytest
import torch

from trigdiff.checkpoint import fingerprint_module, fingerprint_tensors
from trigdiff.data import build_shape_vocab, builtin_target, synthetic_shapes
from trigdiff.errors import TrainingDiverged
from trigdiff.masks import MaskConfig
from trigdiff.models import build_model
from trigdiff.sampling import SamplerConfig
from trigdiff.schedule import build_linear_schedule
from trigdiff.training import (
    PoisonedDataset,
    TrainConfig,
    assemble_poisoned_dataset,
    finetune_clean_defense,
    finetune_pretrained_backdoor,
    init_train_state,
    train_clean,
    train_conditional_backdoor,
    train_unconditional_backdoor,
    _inner_phase_unconditional,
    _outer_step_unconditional,
)
from trigdiff.trigger import (
    DistributionalTrigger,
    TriggerTargetPair,
    UniversalTrigger,
    build_trigger_generator,
)

RES = 8
SCHED = build_linear_schedule(20, 1e-3, 0.1)


def tiny_images(n=24, seed=0):
    g = torch.Generator().manual_seed(seed)
    images, captions = synthetic_shapes(n, RES, g)
    return images, captions


def tiny_cfg(**overrides):
    base = dict(
        outer_iterations=4,
        inner_steps=1,
        inner_lr=1e-3,
        outer_lr=1e-3,
        batch_size=8,
        poison_rate=0.25,
        inner_sample_steps=3,
        inner_batch=2,
        seed=5,
    )
    base.update(overrides)
    return TrainConfig(**base)


def make_pair(kind="universal", bound=0.2):
    target = builtin_target("checker", RES)
    if kind == "universal":
        trig = UniversalTrigger.zeros((3, RES, RES), bound)
    else:
        trig = DistributionalTrigger.zeros((3, RES, RES), bound)
    return TriggerTargetPair(trigger=trig, target=target, identifier=f"{kind}-pair")


class TestAssemblePoisonedDataset:
    def test_zero_rate(self):
        images, _ = tiny_images()
        data = assemble_poisoned_dataset(images, 0.0, [], torch.Generator().manual_seed(0))
        assert data.n_poisoned == 0

    def test_exact_fraction(self):
        g = torch.Generator().manual_seed(0)
        images = torch.zeros(1000, 3, 2, 2)
        data = assemble_poisoned_dataset(images, 0.05, [make_pair()], g)
        assert data.n_poisoned == 50

    def test_round_robin_two_pairs(self):
        g = torch.Generator().manual_seed(0)
        images = torch.zeros(1000, 3, 2, 2)
        pairs = [make_pair(), make_pair(kind="distributional")]
        data = assemble_poisoned_dataset(images, 0.1, pairs, g)
        assert data.n_poisoned == 100
        counts = torch.bincount(data.pair_ids[data.poison_mask], minlength=2)
        assert counts.tolist() == [50, 50]

    def test_rate_within_one_sample(self):
        g = torch.Generator().manual_seed(0)
        images = torch.zeros(37, 3, 2, 2)
        data = assemble_poisoned_dataset(images, 0.3, [make_pair()], g)
        assert abs(data.n_poisoned - 0.3 * 37) <= 0.5

    def test_requires_pairs_when_poisoning(self):
        with pytest.raises(ValueError):
            assemble_poisoned_dataset(
                torch.zeros(10, 3, 2, 2), 0.5, [], torch.Generator().manual_seed(0)
            )

    def test_deterministic_split(self):
        images = torch.zeros(100, 3, 2, 2)
        a = assemble_poisoned_dataset(images, 0.2, [make_pair()], torch.Generator().manual_seed(3))
        b = assemble_poisoned_dataset(images, 0.2, [make_pair()], torch.Generator().manual_seed(3))
        assert torch.equal(a.poison_mask, b.poison_mask)
        assert torch.equal(a.pair_ids, b.pair_ids)

    def test_splits_disjoint(self):
        g = torch.Generator().manual_seed(1)
        images = torch.zeros(50, 3, 2, 2)
        data = assemble_poisoned_dataset(images, 0.4, [make_pair()], g)
        clean = set(data.clean_indices().tolist())
        poisoned = set(data.poison_mask.nonzero().flatten().tolist())
        assert clean.isdisjoint(poisoned)
        assert len(clean | poisoned) == 50


def clean_dataset(images):
    n = images.shape[0]
    return PoisonedDataset(
        images=images,
        poison_mask=torch.zeros(n, dtype=torch.bool),
        pair_ids=torch.full((n,), -1, dtype=torch.long),
    )


class TestTrainClean:
    def test_loss_decreases(self):
        # bar calibrated by pilot: a base-16 model memorizes 2 images in
        # under 800 steps, reaching < 0.1 of the initial loss
        images, _ = tiny_images(8)
        images = images[:2]
        model = build_model(3, 16, 32, seed=0)
        cfg = tiny_cfg(outer_iterations=800, poison_rate=0.0, batch_size=4, outer_lr=3e-3)
        state = train_clean(model, clean_dataset(images), cfg, SCHED)
        first = state.loss_trace[0]
        last = sum(state.loss_trace[-20:]) / 20
        assert last < 0.1 * first

    def test_same_seed_identical_traces(self):
        images, _ = tiny_images()
        traces = []
        for _ in range(2):
            model = build_model(3, 8, 16, seed=1)
            cfg = tiny_cfg(poison_rate=0.0, outer_iterations=6)
            state = train_clean(model, clean_dataset(images), cfg, SCHED)
            traces.append(state.loss_trace)
        assert traces[0] == traces[1]

    def test_zero_lr_leaves_parameters(self):
        images, _ = tiny_images()
        model = build_model(3, 8, 16, seed=2)
        before = fingerprint_module(model)
        cfg = tiny_cfg(poison_rate=0.0, outer_iterations=3, outer_lr=0.0)
        train_clean(model, clean_dataset(images), cfg, SCHED)
        assert fingerprint_module(model) == before

    def test_divergence_detected(self):
        images, _ = tiny_images()
        model = build_model(3, 8, 16, seed=3)
        cfg = tiny_cfg(poison_rate=0.0, outer_iterations=50, outer_lr=1e12)
        with pytest.raises(TrainingDiverged):
            train_clean(model, clean_dataset(images), cfg, SCHED)

    def test_rejects_poisoned_dataset(self):
        images, _ = tiny_images()
        data = assemble_poisoned_dataset(
            images, 0.5, [make_pair()], torch.Generator().manual_seed(0)
        )
        with pytest.raises(ValueError):
            train_clean(build_model(3, 8, 16, seed=0), data, tiny_cfg(), SCHED)


class TestUnconditionalBackdoor:
    def test_runs_and_updates_both(self):
        images, _ = tiny_images()
        pair = make_pair()
        data = assemble_poisoned_dataset(images, 0.25, [pair], torch.Generator().manual_seed(0))
        model = build_model(3, 8, 16, seed=4)
        model_before = fingerprint_module(model)
        trig_before = fingerprint_tensors([pair.trigger.delta])
        state = train_unconditional_backdoor(model, [pair], data, tiny_cfg(), SCHED)
        assert fingerprint_module(model) != model_before
        assert fingerprint_tensors([pair.trigger.delta]) != trig_before
        assert len(state.loss_trace) == 4
        assert len(state.inner_trace) == 4 * 1  # iterations * inner_steps * pairs

    def test_trigger_feasible_after_every_inner_step(self):
        images, _ = tiny_images()
        pair = make_pair(bound=0.15)
        data = assemble_poisoned_dataset(images, 0.25, [pair], torch.Generator().manual_seed(0))
        model = build_model(3, 8, 16, seed=5)
        seen = []
        train_unconditional_backdoor(
            model, [pair], data, tiny_cfg(inner_steps=2, outer_iterations=3), SCHED,
            on_step=lambda s: seen.append(float(pair.trigger.delta.abs().max())),
        )
        assert seen and all(v <= 0.15 for v in seen)

    def test_mixed_bounds_rejected(self):
        images, _ = tiny_images()
        pairs = [make_pair(bound=0.1), make_pair(bound=0.2)]
        data = assemble_poisoned_dataset(images, 0.25, pairs, torch.Generator().manual_seed(0))
        with pytest.raises(ValueError):
            train_unconditional_backdoor(build_model(3, 8, 16, seed=0), pairs, data, tiny_cfg(), SCHED)

    def test_distributional_pair_trains(self):
        images, _ = tiny_images()
        pair = make_pair(kind="distributional")
        data = assemble_poisoned_dataset(images, 0.25, [pair], torch.Generator().manual_seed(0))
        model = build_model(3, 8, 16, seed=6)
        state = train_unconditional_backdoor(model, [pair], data, tiny_cfg(), SCHED)
        assert float(pair.trigger.delta_mean.abs().max()) <= 0.2
        assert len(state.loss_trace) == 4

    def test_rho_zero_reduces_to_clean_bitwise(self):
        images, _ = tiny_images()
        cfg = tiny_cfg(poison_rate=0.0, outer_iterations=5)

        model_a = build_model(3, 8, 16, seed=7)
        state_a = train_clean(model_a, clean_dataset(images), cfg, SCHED)

        model_b = build_model(3, 8, 16, seed=7)
        pair = make_pair()
        state_b = train_unconditional_backdoor(
            model_b, [pair], clean_dataset(images), cfg, SCHED
        )
        assert state_a.loss_trace == state_b.loss_trace
        assert fingerprint_module(model_a) == fingerprint_module(model_b)


class TestParameterHygiene:
    def test_inner_phase_touches_only_trigger(self):
        images, _ = tiny_images()
        pair = make_pair()
        model = build_model(3, 8, 16, seed=8)
        cfg = tiny_cfg()
        state = init_train_state(model, [pair], cfg)
        model_before = fingerprint_module(model)
        inner_cfg = SamplerConfig(kind="ddim", n_steps=3, differentiable=True)
        _inner_phase_unconditional(state, cfg, SCHED, inner_cfg)
        assert fingerprint_module(model) == model_before
        assert all(p.grad is None for p in model.parameters())

    def test_outer_step_touches_only_model(self):
        from trigdiff.schedule import consecutive_zeta_table

        images, _ = tiny_images()
        pair = make_pair()
        data = assemble_poisoned_dataset(images, 0.5, [pair], torch.Generator().manual_seed(0))
        model = build_model(3, 8, 16, seed=9)
        cfg = tiny_cfg()
        state = init_train_state(model, [pair], cfg)
        trig_before = fingerprint_tensors([pair.trigger.delta])
        _outer_step_unconditional(state, data, cfg, SCHED, consecutive_zeta_table(SCHED))
        assert fingerprint_tensors([pair.trigger.delta]) == trig_before
        assert fingerprint_module(model) != fingerprint_module(build_model(3, 8, 16, seed=9))


class TestConditionalBackdoor:
    def setup_method(self):
        self.images, self.captions = tiny_images()
        self.vocab = build_shape_vocab()
        self.mask_cfg = MaskConfig(min_area_frac=0.1, max_area_frac=0.4)
        self.net = build_trigger_generator(3, 8, bound=0.1, seed=0)
        self.pair = TriggerTargetPair(
            trigger=self.net, target=builtin_target("stripes", RES), identifier="cond-pair"
        )

    def make_data(self, rate):
        return assemble_poisoned_dataset(
            self.images, rate, [self.pair], torch.Generator().manual_seed(0),
            captions=self.captions, vocab=self.vocab,
        )

    def test_runs_and_updates_net(self):
        model = build_model(3, 8, 16, seed=10, conditional=True, vocab_size=len(self.vocab))
        net_before = fingerprint_module(self.net)
        model_before = fingerprint_module(model)
        state = train_conditional_backdoor(
            model, self.net, [self.pair], self.make_data(0.25),
            tiny_cfg(inner_sample_steps=2), SCHED, self.mask_cfg,
        )
        assert fingerprint_module(self.net) != net_before
        assert fingerprint_module(model) != model_before
        assert len(state.loss_trace) == 4

    def test_requires_captions(self):
        model = build_model(3, 8, 16, seed=10, conditional=True, vocab_size=len(self.vocab))
        data = assemble_poisoned_dataset(
            self.images, 0.25, [self.pair], torch.Generator().manual_seed(0)
        )
        with pytest.raises(ValueError):
            train_conditional_backdoor(
                model, self.net, [self.pair], data, tiny_cfg(), SCHED, self.mask_cfg
            )

    def test_rho_zero_matches_clean_conditional_bitwise(self):
        cfg = tiny_cfg(poison_rate=0.0, outer_iterations=4, inner_sample_steps=2)
        data = self.make_data(0.0)

        model_a = build_model(3, 8, 16, seed=11, conditional=True, vocab_size=len(self.vocab))
        state_a = train_clean(
            model_a, data, cfg, SCHED, conditional=True, mask_cfg=self.mask_cfg
        )
        model_b = build_model(3, 8, 16, seed=11, conditional=True, vocab_size=len(self.vocab))
        net = build_trigger_generator(3, 8, bound=0.1, seed=1)
        pair = TriggerTargetPair(trigger=net, target=builtin_target("stripes", RES))
        state_b = train_conditional_backdoor(
            model_b, net, [pair], self.make_data(0.0), cfg, SCHED, self.mask_cfg
        )
        assert state_a.loss_trace == state_b.loss_trace
        assert fingerprint_module(model_a) == fingerprint_module(model_b)


class TestFinetune:
    def test_mode_enforced(self):
        images, _ = tiny_images()
        pair = make_pair()
        data = assemble_poisoned_dataset(images, 0.25, [pair], torch.Generator().manual_seed(0))
        with pytest.raises(ValueError):
            finetune_pretrained_backdoor(
                build_model(3, 8, 16, seed=0), [pair], data, tiny_cfg(mode="scratch"), SCHED
            )

    def test_zero_iterations_noop(self):
        images, _ = tiny_images()
        pair = make_pair()
        data = assemble_poisoned_dataset(images, 0.25, [pair], torch.Generator().manual_seed(0))
        model = build_model(3, 8, 16, seed=0)
        before = fingerprint_module(model)
        finetune_pretrained_backdoor(
            model, [pair], data, tiny_cfg(mode="finetune", outer_iterations=0), SCHED
        )
        assert fingerprint_module(model) == before

    def test_defense_zero_epochs_before_equals_after(self):
        images, _ = tiny_images()
        pair = make_pair()
        model = build_model(3, 8, 16, seed=0)
        outcome = finetune_clean_defense(
            model, images, 0, tiny_cfg(), SCHED,
            trigger=pair.trigger, target=pair.target,
            sampler_cfg=SamplerConfig(kind="ddim", n_steps=3), n_eval=4,
        )
        assert outcome.attack_mse_before == outcome.attack_mse_after
        assert outcome.steps == 0


class TestTrainConfigValidation:
    @pytest.mark.parametrize(
        "kw",
        [
            dict(poison_rate=1.5),
            dict(poison_rate=-0.1),
            dict(inner_steps=0),
            dict(mode="warmstart"),
            dict(batch_size=0),
            dict(null_text_prob=2.0),
        ],
    )
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            tiny_cfg(**kw)

    def test_inner_steps_beyond_horizon(self):
        images, _ = tiny_images()
        with pytest.raises(ValueError):
            train_clean(
                build_model(3, 8, 16, seed=0),
                clean_dataset(images),
                tiny_cfg(poison_rate=0.0, inner_sample_steps=99),
                SCHED,
            )
