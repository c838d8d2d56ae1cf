import json
import struct

import numpy as np
import pytest
import torch

import oracles
from conftest import seeded_input
from dpenet.errors import (
    CheckpointConfigError,
    CheckpointManifestError,
    CheckpointNotFoundError,
    CheckpointVersionError,
    ConfigError,
)
from dpenet.networks import (
    CHECKPOINT_MAGIC,
    DPENet,
    DRNet,
    NetworkConfig,
    R2Net,
    build_dpenet,
    init_params,
    load_checkpoint,
    load_model,
    parameter_count,
    save_checkpoint,
    zero_params,
)

TINY = NetworkConfig(num_ddrb=2, num_erpab=1, channels=6)

# oracle digests for the fixed-seed forwards below
FROZEN = {
    "r2net": -39.727662764296724,
    "drnet": 1773.6275984560802,
    "dpenet": -141.67909653837648,
}


def _sliced(params, prefix):
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def r2net_direct(x, model, num_blocks):
    params = oracles.module_params(model)
    h = oracles.conv2d_shift(x, params["head.weight"], params["head.bias"])
    for i in range(num_blocks):
        h = oracles.ddrb_direct(h, _sliced(params, f"body.{i}."))
    return oracles.conv2d_shift(h, params["tail.weight"], params["tail.bias"]) + x


def drnet_direct(x, model, num_blocks):
    params = oracles.module_params(model)
    h = oracles.conv2d_shift(x, params["head.weight"], params["head.bias"])
    for i in range(num_blocks):
        h = oracles.erpab_direct(h, _sliced(params, f"body.{i}."))
    return oracles.conv2d_shift(h, params["tail.weight"], params["tail.bias"]) + x


class TestConfig:
    def test_defaults(self):
        cfg = NetworkConfig()
        assert (cfg.num_ddrb, cfg.num_erpab, cfg.channels) == (10, 3, 32)

    @pytest.mark.parametrize("kwargs", [
        {"num_ddrb": 0}, {"num_erpab": 0}, {"channels": 0},
        {"stage1_block": "dense"}, {"stage2_block": "se"},
    ])
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ConfigError):
            NetworkConfig(**kwargs)


class TestInit:
    def test_deterministic_per_seed(self):
        a = build_dpenet(TINY, seed=7)
        b = build_dpenet(TINY, seed=7)
        for ta, tb in zip(a.state_dict().values(), b.state_dict().values()):
            assert torch.equal(ta, tb)

    def test_seed_changes_weights(self):
        a = build_dpenet(TINY, seed=7)
        b = build_dpenet(TINY, seed=8)
        assert any(
            not torch.equal(ta, tb)
            for ta, tb in zip(a.state_dict().values(), b.state_dict().values())
        )

    def test_biases_zero_and_weights_bounded(self):
        model = build_dpenet(TINY, seed=3)
        for name, param in model.named_parameters():
            if param.ndim == 1:
                assert torch.equal(param, torch.zeros_like(param)), name
            else:
                fan_in = param.shape[1] * param.shape[2] * param.shape[3]
                assert param.abs().max() <= fan_in ** -0.5

    @pytest.mark.parametrize("num_ddrb,num_erpab,target", [
        (10, 3, 647_000),
        (5, 1, 308_000),
    ])
    def test_parameter_totals_near_reference(self, num_ddrb, num_erpab, target):
        model = build_dpenet(NetworkConfig(num_ddrb=num_ddrb, num_erpab=num_erpab))
        assert abs(parameter_count(model) / target - 1.0) <= 0.02


class TestForward:
    def test_r2net_zero_weight_identity(self):
        net = zero_params(R2Net(TINY))
        x = torch.rand(2, 3, 24, 24)
        assert torch.equal(net(x), x)

    def test_r2net_fixed_seed_matches_oracle(self):
        net = init_params(R2Net(TINY), seed=31).double()
        x = seeded_input((1, 3, 32, 32), seed=32)
        expected = r2net_direct(x.numpy(), net, TINY.num_ddrb)
        np.testing.assert_allclose(net(x).detach().numpy(), expected, rtol=1e-9)
        assert float(expected.sum()) == pytest.approx(FROZEN["r2net"], rel=1e-12)

    def test_r2net_identity_gradient_under_zero_weights(self):
        net = zero_params(R2Net(TINY))
        x = torch.rand(1, 3, 16, 16, requires_grad=True)
        net(x).mean().backward()
        uniform = torch.full_like(x, 1.0 / x.numel())
        assert torch.allclose(x.grad, uniform, rtol=0, atol=1e-12)

    def test_drnet_zero_weight_identity(self):
        net = zero_params(DRNet(TINY))
        x = torch.rand(1, 3, 24, 24)
        assert torch.equal(net(x), x)

    def test_drnet_fixed_seed_matches_oracle(self):
        net = init_params(DRNet(TINY), seed=33).double()
        x = seeded_input((1, 3, 32, 32), seed=34)
        expected = drnet_direct(x.numpy(), net, TINY.num_erpab)
        np.testing.assert_allclose(net(x).detach().numpy(), expected, rtol=1e-9)
        assert float(expected.sum()) == pytest.approx(FROZEN["drnet"], rel=1e-12)

    def test_dpenet_zero_weight_identity(self):
        model = zero_params(DPENet(TINY))
        x = torch.rand(2, 3, 24, 24)
        coarse, refined = model(x)
        assert torch.equal(coarse, x) and torch.equal(refined, x)

    def test_dpenet_composes_the_stages(self):
        model = init_params(DPENet(TINY), seed=35)
        x = torch.rand(2, 3, 24, 24)
        coarse, refined = model(x)
        assert torch.equal(coarse, model.r2net(x))
        assert torch.equal(refined, model.drnet(model.r2net(x)))

    def test_dpenet_fixed_seed_matches_oracle(self):
        model = init_params(DPENet(TINY), seed=36).double()
        x = seeded_input((1, 3, 16, 16), seed=37)
        coarse, refined = model(x)
        expected_coarse = r2net_direct(x.numpy(), model.r2net, TINY.num_ddrb)
        expected_refined = drnet_direct(expected_coarse, model.drnet, TINY.num_erpab)
        np.testing.assert_allclose(coarse.detach().numpy(), expected_coarse, rtol=1e-9)
        np.testing.assert_allclose(refined.detach().numpy(), expected_refined, rtol=1e-9)
        assert float(expected_refined.sum()) == pytest.approx(FROZEN["dpenet"], rel=1e-12)

    def test_shapes_preserved(self):
        model = build_dpenet(TINY, seed=1)
        x = torch.rand(2, 3, 64, 64)
        coarse, refined = model(x)
        assert coarse.shape == x.shape and refined.shape == x.shape

    def test_stage1_only_variant_aliases_outputs(self):
        cfg = NetworkConfig(num_ddrb=1, num_erpab=1, channels=4, use_drnet=False)
        model = build_dpenet(cfg, seed=2)
        x = torch.rand(1, 3, 16, 16)
        coarse, refined = model(x)
        assert torch.equal(coarse, refined)

    @pytest.mark.parametrize("stage1", ["rb", "drb", "ddrb"])
    @pytest.mark.parametrize("stage2", ["pab", "erpab"])
    def test_all_wiring_variants_run(self, stage1, stage2):
        cfg = NetworkConfig(num_ddrb=1, num_erpab=1, channels=4,
                            stage1_block=stage1, stage2_block=stage2)
        model = build_dpenet(cfg, seed=4)
        coarse, refined = model(torch.rand(1, 3, 16, 16))
        assert coarse.shape == refined.shape == (1, 3, 16, 16)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        model = build_dpenet(TINY, seed=5)
        path = tmp_path / "model.dpck"
        save_checkpoint(path, model, TINY, extra={"note": "round trip"})
        state, config, extra = load_checkpoint(path)
        assert config == TINY
        assert extra == {"note": "round trip"}
        for name, tensor in model.state_dict().items():
            assert torch.equal(state[name], tensor), name

    def test_round_trip_float64(self, tmp_path):
        model = build_dpenet(TINY, seed=6, dtype=torch.float64)
        path = tmp_path / "model64.dpck"
        save_checkpoint(path, model, TINY)
        state, _, _ = load_checkpoint(path)
        for name, tensor in model.state_dict().items():
            assert state[name].dtype == torch.float64
            assert torch.equal(state[name], tensor), name

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointNotFoundError):
            load_checkpoint(tmp_path / "absent.dpck")

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "noise.dpck"
        path.write_bytes(b"definitely not a checkpoint")
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "model.dpck"
        save_checkpoint(path, build_dpenet(TINY, seed=7), TINY)
        blob = bytearray(path.read_bytes())
        blob[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(path)

    def test_tampered_shape_manifest(self, tmp_path):
        path = tmp_path / "model.dpck"
        save_checkpoint(path, build_dpenet(TINY, seed=8), TINY)
        blob = path.read_bytes()
        (header_len,) = struct.unpack_from("<Q", blob, 8)
        manifest_pos = 16 + header_len
        (manifest_len,) = struct.unpack_from("<Q", blob, manifest_pos)
        manifest_start = manifest_pos + 8
        manifest = json.loads(blob[manifest_start:manifest_start + manifest_len])
        manifest[0]["shape"][0] += 1
        new_manifest = json.dumps(manifest).encode()
        tampered = (blob[:manifest_pos] + struct.pack("<Q", len(new_manifest))
                    + new_manifest + blob[manifest_start + manifest_len:])
        path.write_bytes(tampered)
        with pytest.raises(CheckpointManifestError):
            load_checkpoint(path)

    def test_config_mismatch(self, tmp_path):
        path = tmp_path / "model.dpck"
        small = NetworkConfig(num_ddrb=5, num_erpab=1, channels=4)
        save_checkpoint(path, build_dpenet(small, seed=9), small)
        wanted = NetworkConfig(num_ddrb=10, num_erpab=1, channels=4)
        with pytest.raises(CheckpointConfigError, match="num_ddrb"):
            load_checkpoint(path, expected_config=wanted)

    def test_load_model_restores_forward(self, tmp_path):
        model = build_dpenet(TINY, seed=10)
        path = tmp_path / "model.dpck"
        save_checkpoint(path, model, TINY)
        restored, _ = load_model(path)
        x = torch.rand(1, 3, 16, 16)
        coarse_a, refined_a = model(x)
        coarse_b, refined_b = restored(x)
        assert torch.equal(coarse_a, coarse_b)
        assert torch.equal(refined_a, refined_b)

    def test_round_trip_all_depth_configs(self, tmp_path):
        for lam, mu in [(15, 3), (15, 1), (10, 3), (10, 1), (5, 3), (5, 1)]:
            cfg = NetworkConfig(num_ddrb=lam, num_erpab=mu, channels=4)
            model = build_dpenet(cfg, seed=lam * 10 + mu)
            path = tmp_path / f"l{lam}m{mu}.dpck"
            save_checkpoint(path, model, cfg)
            state, loaded_cfg, _ = load_checkpoint(path)
            assert loaded_cfg == cfg
            for name, tensor in model.state_dict().items():
                assert torch.equal(state[name], tensor)

    def test_magic_constant(self):
        assert CHECKPOINT_MAGIC == b"DPEC"
