import numpy as np
import pytest

from flora import numkit
from flora.costmodel import CostParams, bmm_lora_cost, flora_cost
from flora.errors import ConfigurationError, DimensionError
from flora.model import (
    PLACEMENTS,
    BlockConfig,
    block_forward,
    count_flops,
    make_block,
    make_bundle,
    materialized_block,
)

ALL = tuple(PLACEMENTS)


def rel_err(a, b):
    return np.max(np.abs(a - b)) / np.max(np.abs(b))


def per_example_materialized(X, block, bundles):
    return np.concatenate(
        [block_forward(X[i : i + 1], materialized_block(block, bundle)) for i, bundle in enumerate(bundles)]
    )


@pytest.fixture
def inputs():
    return numkit.rng(0).standard_normal((3, 5, 16))


class TestConfig:
    def test_heads_must_divide(self):
        with pytest.raises(ConfigurationError):
            BlockConfig(d_model=10, n_heads=3)

    def test_empty_placements(self):
        with pytest.raises(ConfigurationError):
            BlockConfig(placements=())

    def test_unknown_placement(self):
        with pytest.raises(ConfigurationError):
            BlockConfig(placements=("query", "gate"))


class TestBlockForward:
    @pytest.mark.parametrize("placements", [("query", "key"), ALL])
    @pytest.mark.parametrize("strategy", ["flora", "bmm_lora", "ia3"])
    @pytest.mark.parametrize("r", [1, 4])
    def test_noop_bundles_match_base(self, inputs, placements, strategy, r):
        cfg = BlockConfig(d_model=16, n_heads=4, d_ff=32, placements=placements)
        block = make_block(cfg, seed=1)
        kind = {"flora": "flora", "bmm_lora": "lora", "ia3": "ia3"}[strategy]
        bundles = [make_bundle(cfg, kind, r, seed=i) for i in range(3)]
        assert np.array_equal(block_forward(inputs, block, bundles, strategy), block_forward(inputs, block))

    @pytest.mark.parametrize("placements", [("query", "key"), ALL])
    def test_identical_flora_bundles_vs_shared_materialized(self, inputs, placements):
        cfg = BlockConfig(d_model=16, n_heads=4, d_ff=32, placements=placements)
        block = make_block(cfg, seed=2)
        bundle = make_bundle(cfg, "flora", 2, seed=5, strategy="random")
        out = block_forward(inputs, block, [bundle] * 3, "flora")
        assert rel_err(out, block_forward(inputs, materialized_block(block, bundle))) < 1e-8

    @pytest.mark.parametrize("placements", [("query", "key"), ALL])
    @pytest.mark.parametrize("strategy, kind, r", [("flora", "flora", 1), ("flora", "flora", 4), ("bmm_lora", "lora", 1), ("bmm_lora", "lora", 4), ("ia3", "ia3", 1)])
    def test_per_example_materialized_oracle(self, inputs, placements, strategy, kind, r):
        cfg = BlockConfig(d_model=16, n_heads=4, d_ff=32, placements=placements)
        block = make_block(cfg, seed=3)
        bundles = [make_bundle(cfg, kind, r, seed=10 + i, strategy="random", bundle_id=f"t{i}") for i in range(3)]
        out = block_forward(inputs, block, bundles, strategy)
        assert rel_err(out, per_example_materialized(inputs, block, bundles)) < 1e-8

    def test_strategy_none_ignores_bundles(self, inputs):
        cfg = BlockConfig(d_model=16, n_heads=4, d_ff=32)
        block = make_block(cfg)
        bundles = [make_bundle(cfg, "flora", 1, strategy="random")] * 3
        assert np.array_equal(block_forward(inputs, block, bundles, "none"), block_forward(inputs, block))

    def test_kind_mismatch(self, inputs):
        cfg = BlockConfig(d_model=16, n_heads=4, d_ff=32)
        block = make_block(cfg)
        with pytest.raises(ConfigurationError):
            block_forward(inputs, block, [make_bundle(cfg, "lora")] * 3, "flora")

    def test_missing_placement(self, inputs):
        cfg = BlockConfig(d_model=16, n_heads=4, d_ff=32)
        bundle = make_bundle(BlockConfig(d_model=16, n_heads=4, d_ff=32, placements=("query",)), "flora")
        with pytest.raises(ConfigurationError):
            block_forward(inputs, make_block(cfg), [bundle] * 3, "flora")

    def test_bad_input(self):
        cfg = BlockConfig(d_model=16, n_heads=4, d_ff=32)
        with pytest.raises(DimensionError):
            block_forward(np.ones((2, 3, 8)), make_block(cfg))

    def test_causal(self, inputs):
        cfg = BlockConfig(d_model=16, n_heads=4, d_ff=32)
        block = make_block(cfg)
        full = block_forward(inputs, block)
        prefix = block_forward(inputs[:, :3], block)
        np.testing.assert_allclose(full[:, :3], prefix, rtol=1e-12)


class TestCountFlops:
    cfg = BlockConfig(d_model=64, n_heads=4, d_ff=256)

    def test_none_independent_of_r(self):
        assert count_flops(self.cfg, 4, 8, 1, "none") == count_flops(self.cfg, 4, 8, 16, "none")

    def test_flora_below_bmm_at_rank_one(self):
        f = count_flops(self.cfg, 4, 8, 1, "flora").total
        m = count_flops(self.cfg, 4, 8, 1, "bmm_lora").total
        assert f < m

    def test_matches_cost_model_with_unit_coefficients(self):
        cfg = BlockConfig(d_model=32, n_heads=4, d_ff=64, placements=("query", "key"))
        for r in (1, 2, 8):
            p = CostParams(1, 1, d=32, b=3, l=5, r=r)
            assert count_flops(cfg, 3, 5, r, "flora").adapted == 2 * flora_cost(p)
            assert count_flops(cfg, 3, 5, r, "bmm_lora").adapted == 2 * bmm_lora_cost(p)

    def test_projection_terms_linear_in_l(self):
        for strategy in ("none", "flora", "bmm_lora", "ia3"):
            one, two = count_flops(self.cfg, 2, 8, 4, strategy), count_flops(self.cfg, 2, 16, 4, strategy)
            assert two.adapted == 2 * one.adapted
            assert two.projections == 2 * one.projections
            # scores and weighted values grow with l * l
            assert two.attention == 4 * one.attention

    def test_attention_strategy_independent(self):
        counts = {s: count_flops(self.cfg, 2, 8, 4, s).attention for s in ("none", "flora", "bmm_lora", "ia3")}
        assert len(set(counts.values())) == 1

    def test_unknown_strategy(self):
        with pytest.raises(ConfigurationError):
            count_flops(self.cfg, 1, 1, 1, "shared")
