import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from trigdiff.masks import (
    MaskConfig,
    StrokeParams,
    apply_mask,
    draw_training_mask,
    free_form_mask,
    random_rect_mask,
    validate_binary_mask,
)


class TestRandomRectMask:
    def test_minimal_rectangle(self):
        # min = max = one pixel on an 8x8 grid
        frac = 1 / 64
        mask = random_rect_mask((8, 8), frac, frac, torch.Generator().manual_seed(0))
        assert int((mask == 0).sum()) == 1

    def test_zero_fraction_always_in_range(self):
        g = torch.Generator().manual_seed(1)
        lo, hi = 0.1, 0.5
        for _ in range(10000):
            mask = random_rect_mask((16, 16), lo, hi, g)
            frac = float((mask == 0).float().mean())
            assert lo <= frac <= hi

    def test_fixed_seed_identical(self):
        a = random_rect_mask((16, 16), 0.1, 0.4, torch.Generator().manual_seed(7))
        b = random_rect_mask((16, 16), 0.1, 0.4, torch.Generator().manual_seed(7))
        assert torch.equal(a, b)

    def test_infeasible_fractions_rejected(self):
        # no integer rectangle on 4x4 has area fraction inside (0.01, 0.05):
        # the smallest rectangle (1 pixel) is already 1/16 = 0.0625
        with pytest.raises(ValueError):
            random_rect_mask((4, 4), 0.01, 0.05, torch.Generator().manual_seed(0))

    @pytest.mark.parametrize("lo,hi", [(0.0, 0.5), (0.6, 0.4), (0.5, 1.0)])
    def test_invalid_ranges_rejected(self, lo, hi):
        with pytest.raises(ValueError):
            random_rect_mask((8, 8), lo, hi, torch.Generator().manual_seed(0))

    def test_binary(self):
        mask = random_rect_mask((12, 10), 0.2, 0.5, torch.Generator().manual_seed(3))
        validate_binary_mask(mask, training=True)


class TestFreeFormMask:
    def test_zero_strokes_gives_all_ones(self):
        params = StrokeParams(num_strokes=(0, 0))
        mask = free_form_mask((16, 16), params, torch.Generator().manual_seed(0))
        assert torch.equal(mask, torch.ones(16, 16))
        with pytest.raises(ValueError):
            validate_binary_mask(mask, training=True)

    def test_giant_brush_covers_everything(self):
        params = StrokeParams(num_strokes=(6, 6), width_frac=(4.0, 4.0))
        mask = free_form_mask((8, 8), params, torch.Generator().manual_seed(1))
        assert torch.equal(mask, torch.zeros(8, 8))
        with pytest.raises(ValueError):
            validate_binary_mask(mask, training=True)

    def test_strictly_binary(self):
        g = torch.Generator().manual_seed(2)
        for _ in range(50):
            mask = free_form_mask((16, 16), StrokeParams(), g)
            validate_binary_mask(mask)

    def test_pure_function_of_seed(self):
        a = free_form_mask((16, 16), StrokeParams(), torch.Generator().manual_seed(11))
        b = free_form_mask((16, 16), StrokeParams(), torch.Generator().manual_seed(11))
        assert torch.equal(a, b)

    def test_zero_fraction_distribution(self):
        # default params produce masks well inside the configured percentile bounds
        g = torch.Generator().manual_seed(3)
        fracs = []
        for _ in range(2000):
            mask = free_form_mask((16, 16), StrokeParams(), g)
            fracs.append(float((mask == 0).float().mean()))
        fracs = torch.tensor(sorted(fracs))
        p5 = float(fracs[int(0.05 * len(fracs))])
        p95 = float(fracs[int(0.95 * len(fracs))])
        assert 0.05 <= p5
        assert p95 <= 0.98


class TestDrawTrainingMask:
    def test_valid_for_training(self):
        cfg = MaskConfig()
        g = torch.Generator().manual_seed(4)
        for _ in range(100):
            mask = draw_training_mask((16, 16), cfg, g)
            validate_binary_mask(mask, training=True)

    def test_single_kind_config(self):
        cfg = MaskConfig(kinds=("rect",), min_area_frac=0.2, max_area_frac=0.4)
        g = torch.Generator().manual_seed(5)
        mask = draw_training_mask((16, 16), cfg, g)
        # a rect mask's zero region is a full rectangle: check row/col structure
        zero_rows = (mask == 0).any(dim=1)
        zero_cols = (mask == 0).any(dim=0)
        sub = mask[zero_rows][:, zero_cols]
        assert torch.equal(sub, torch.zeros_like(sub))

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            MaskConfig(kinds=("hexagon",))


class TestApplyMask:
    def test_zeros_where_masked(self):
        g = torch.Generator().manual_seed(6)
        img = torch.randn(3, 8, 8, generator=g)
        mask = (torch.rand(8, 8, generator=g) > 0.5).float()
        masked = apply_mask(img, mask)
        assert float(masked[:, mask == 0].abs().max()) == 0.0
        assert torch.equal(masked[:, mask == 1], img[:, mask == 1])

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_masked_image_invariant(self, seed):
        g = torch.Generator().manual_seed(seed)
        img = torch.randn(2, 3, 8, 8, generator=g)
        mask = (torch.rand(8, 8, generator=g) > 0.3).float()
        masked = apply_mask(img, mask)
        assert torch.equal(masked * mask, masked)
