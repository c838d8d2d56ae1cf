import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from dpenet.analysis import (
    Branches,
    GraphSpec,
    check_gridding,
    count_params,
    ddrb_stack,
    drb_stack,
    estimate_flops,
    format_analysis_report,
    graph_flops,
    layer_offsets,
    network_graph,
    param_breakdown,
    receptive_field,
)
from dpenet.blocks import ConvSpec
from dpenet.errors import ShapeMismatchError
from dpenet.networks import NetworkConfig, build_dpenet, parameter_count

# published depth/width sweep: (num_ddrb, num_erpab) -> parameters in millions
REFERENCE_PARAMS = {
    (15, 3): 0.924, (15, 1): 0.861, (10, 3): 0.647,
    (10, 1): 0.585, (5, 3): 0.371, (5, 1): 0.308,
}
REFERENCE_GFLOPS = 42.43


class TestReceptiveField:
    def test_plain_stack_table(self):
        assert receptive_field(drb_stack()) == [3, 5, 7, 9, 11, 13]

    def test_dilated_stack_table(self):
        assert receptive_field(ddrb_stack()) == [3, 5, 9, 13, 23, 33]

    def test_single_1x1_conv(self):
        assert receptive_field([ConvSpec(1, 8, 8)]) == [1]

    def test_branches_take_max(self):
        node = Branches(tuple(
            (ConvSpec(3, 8, 8, d),) for d in (1, 2, 5)
        ))
        assert receptive_field(GraphSpec((node,))) == [11]
        assert receptive_field(GraphSpec((node, ConvSpec(1, 24, 8)))) == [11, 11]

    @given(dilations=st.lists(st.integers(1, 6), min_size=1, max_size=8))
    @settings(max_examples=30, deadline=None)
    def test_monotone_non_decreasing(self, dilations):
        layers = [ConvSpec(3, 4, 4, d) for d in dilations]
        rf = receptive_field(layers)
        assert all(b >= a for a, b in zip(rf, rf[1:]))
        assert rf[-1] == 1 + 2 * sum(dilations)


class TestGridding:
    def test_hybrid_schedule_passes(self):
        result = check_gridding([1, 1, 2, 2, 5, 5], kernel=3)
        assert result.ok
        assert result.span == (-16, 16)
        assert result.holes == ()

    def test_uniform_dilation_two_fails_at_odd_offsets(self):
        result = check_gridding([2, 2, 2], kernel=3)
        assert not result.ok
        assert result.span == (-6, 6)
        assert set(result.holes) == {-5, -3, -1, 1, 3, 5}

    def test_single_unit_layer(self):
        assert check_gridding([1], kernel=3).ok

    @pytest.mark.parametrize("dilations", [[1, 1, 2, 2, 5, 5], [2, 2, 2], [1, 2, 9], [3, 3]])
    def test_matches_bruteforce_enumeration(self, dilations):
        result = check_gridding(dilations, kernel=3)
        brute = oracles.reachable_offsets_bruteforce(dilations, kernel=3)
        assert set(result.offsets) == brute
        expected_holes = set(range(min(brute), max(brute) + 1)) - brute
        assert set(result.holes) == expected_holes
        assert result.ok == (not expected_holes)

    @given(dilation=st.integers(1, 9), kernel=st.sampled_from([1, 3, 5]))
    @settings(max_examples=30, deadline=None)
    def test_single_layer_offsets_closed_form(self, dilation, kernel):
        half = (kernel - 1) // 2
        expected = list(range(-half * dilation, half * dilation + 1, dilation))
        assert layer_offsets(dilation, kernel) == expected
        result = check_gridding([dilation], kernel)
        assert sorted(result.offsets) == expected

    def test_empty_dilations_rejected(self):
        with pytest.raises(ValueError):
            check_gridding([])


class TestParamCount:
    @pytest.mark.parametrize("depths,millions", sorted(REFERENCE_PARAMS.items()))
    def test_within_two_percent_of_reference(self, depths, millions):
        cfg = NetworkConfig(num_ddrb=depths[0], num_erpab=depths[1])
        assert abs(count_params(cfg) / (millions * 1e6) - 1.0) <= 0.02

    @pytest.mark.parametrize("depths", sorted(REFERENCE_PARAMS))
    def test_exactly_matches_built_model(self, depths):
        cfg = NetworkConfig(num_ddrb=depths[0], num_erpab=depths[1], channels=8)
        assert count_params(cfg) == parameter_count(build_dpenet(cfg, seed=0))

    def test_matches_model_for_default_width(self):
        cfg = NetworkConfig()
        assert count_params(cfg) == parameter_count(build_dpenet(cfg, seed=0))

    def test_io_convs_hand_computed(self):
        # 3x3 convs 3->32 and 32->3 with biases: 864+32 and 864+3, per stage
        breakdown = param_breakdown(NetworkConfig())
        assert breakdown["stage1_io_convs"] == (864 + 32) + (864 + 3)
        assert breakdown["stage2_io_convs"] == (864 + 32) + (864 + 3)

    def test_depth_difference_is_block_multiple(self):
        ten = count_params(NetworkConfig(num_ddrb=10, num_erpab=3))
        five = count_params(NetworkConfig(num_ddrb=5, num_erpab=3))
        per_block = param_breakdown(NetworkConfig())["stage1_block"]
        assert ten - five == 5 * per_block

    @given(
        lam=st.integers(1, 6), mu=st.integers(1, 4), ch=st.integers(1, 12),
    )
    @settings(max_examples=30, deadline=None)
    def test_monotone_in_each_argument(self, lam, mu, ch):
        base = count_params(NetworkConfig(num_ddrb=lam, num_erpab=mu, channels=ch))
        assert count_params(NetworkConfig(num_ddrb=lam + 1, num_erpab=mu, channels=ch)) > base
        assert count_params(NetworkConfig(num_ddrb=lam, num_erpab=mu + 1, channels=ch)) > base
        assert count_params(NetworkConfig(num_ddrb=lam, num_erpab=mu, channels=ch + 1)) > base

    @pytest.mark.parametrize("kwargs", [
        {"stage1_block": "rb", "use_drnet": False},
        {"stage1_block": "drb", "use_drnet": False},
        {"stage2_block": "pab"},
        {"bias": False},
    ])
    def test_variants_match_models_exactly(self, kwargs):
        cfg = NetworkConfig(num_ddrb=2, num_erpab=2, channels=6, **kwargs)
        assert count_params(cfg) == parameter_count(build_dpenet(cfg, seed=1))


class TestFlops:
    def test_default_config_near_reference(self):
        estimate = estimate_flops(NetworkConfig(), (256, 256))
        assert abs(estimate.total / (REFERENCE_GFLOPS * 1e9) - 1.0) <= 0.10

    def test_single_conv_closed_form(self):
        graph = GraphSpec((ConvSpec(3, 32, 32, has_bias=False),))
        estimate = graph_flops(graph, (4, 4))
        assert estimate.multiply_add_total == 2 * 9 * 32 * 32 * 16 == 294_912
        assert estimate.conv_macs == 9 * 32 * 32 * 16

    def test_doubling_height_doubles_counts(self):
        cfg = NetworkConfig(num_ddrb=2, num_erpab=1, channels=8)
        single = estimate_flops(cfg, (32, 32))
        doubled = estimate_flops(cfg, (64, 32))
        assert doubled.total == 2 * single.total
        assert doubled.bias_adds == 2 * single.bias_adds
        assert doubled.skip_adds == 2 * single.skip_adds

    @given(lam=st.integers(1, 8))
    @settings(max_examples=20, deadline=None)
    def test_linear_in_stage1_depth(self, lam):
        def total(n):
            return estimate_flops(
                NetworkConfig(num_ddrb=n, num_erpab=2, channels=8), (16, 16)
            ).total

        slope = total(lam + 1) - total(lam)
        assert total(lam + 2) - total(lam + 1) == slope

    def test_rejects_empty_input(self):
        with pytest.raises(ValueError):
            estimate_flops(NetworkConfig(), (0, 256))


class TestGraphSpec:
    def test_network_graph_chains(self):
        graph, _ = network_graph(NetworkConfig(num_ddrb=2, num_erpab=2, channels=8))
        graph.validate_chaining()

    def test_chaining_catches_channel_breaks(self):
        broken = GraphSpec((ConvSpec(3, 3, 8), ConvSpec(3, 4, 8)))
        with pytest.raises(ShapeMismatchError):
            broken.validate_chaining()

    def test_flat_conv_listing(self):
        graph, _ = network_graph(NetworkConfig())
        # stage 1: 2 io + 10 blocks x 6; stage 2: 2 io + 3 blocks x 6
        assert len(graph.convs()) == 2 + 60 + 2 + 18


def test_report_contains_tables_and_totals():
    report = format_analysis_report(NetworkConfig(), (256, 256))
    assert "[3, 5, 7, 9, 11, 13]" in report
    assert "[3, 5, 9, 13, 23, 33]" in report
    assert "ok, covers [-16, 16]" in report
    assert "652777" in report
