"""Network stack: shapes, frozen snapshots, EMA updates, checkpoints."""

import hashlib

import pytest
import torch

from cromo.models import (EmaTarget, ModelConfig, build_trinet, embed,
                          ema_momentum, ema_update, load_checkpoint,
                          save_checkpoint, snapshot)

TOY = ModelConfig(arch="mlp", in_channels=2, image_size=8, feature_dim=16,
                  projector_hidden=16, projector_dim=8, predictor_hidden=16,
                  mlp_hidden=(32,))


def param_hash(module):
    h = hashlib.sha256()
    for key, value in sorted(module.state_dict().items()):
        h.update(key.encode())
        h.update(value.detach().numpy().tobytes())
    return h.hexdigest()


class TestBuild:
    def test_mlp_shape_contract(self):
        net = build_trinet("mlp", TOY)
        x = torch.randn(4, 2, 8, 8)
        h, z = embed(net, x)
        assert h.shape == (4, 16)
        assert z.shape == (4, 8)

    def test_resnet18_feature_and_projector_dims(self):
        net = build_trinet("resnet18", ModelConfig(in_channels=3, image_size=32,
                                                   projector_hidden=64,
                                                   projector_dim=2048))
        assert net.feature_dim == 512
        h, z = net(torch.randn(2, 3, 32, 32))
        assert z.shape == (2, 2048)

    def test_byol_predictor_dims(self):
        cfg = ModelConfig(**{**TOY.__dict__, "use_predictor": True})
        net = build_trinet("mlp", cfg)
        q = net.predictor(torch.randn(3, 8))
        assert q.shape == (3, 8)

    def test_small_cnn(self):
        cfg = ModelConfig(arch="small_cnn", in_channels=3, image_size=16,
                          feature_dim=24, projector_hidden=16, projector_dim=8,
                          mlp_hidden=(8, 16))
        net = build_trinet("small_cnn", cfg)
        h, z = net(torch.randn(2, 3, 16, 16))
        assert h.shape == (2, 24) and z.shape == (2, 8)

    def test_unknown_arch(self):
        with pytest.raises(ValueError):
            build_trinet("transformer", TOY)

    def test_distill_predictor_default_width(self):
        net = build_trinet("mlp", TOY)
        out = net.distill_predictor(torch.randn(5, 8))
        assert out.shape == (5, 8)

    def test_shape_independent_of_batch_content(self, torch_gen):
        net = build_trinet("mlp", TOY)
        for b in (1, 7, 32):
            net.eval()
            _, z = net(torch.randn((b, 2, 8, 8), generator=torch_gen))
            assert z.shape == (b, 8)


class TestEmbed:
    def test_nonfinite_output_fails_fast(self):
        net = build_trinet("mlp", TOY)
        with torch.no_grad():
            list(net.projector.parameters())[0].fill_(float("nan"))
        with pytest.raises(FloatingPointError):
            embed(net, torch.randn(2, 2, 8, 8))

    def test_batchnorm_eval_row_consistency(self):
        net = build_trinet("small_cnn", ModelConfig(
            arch="small_cnn", in_channels=2, image_size=8, feature_dim=8,
            projector_hidden=8, projector_dim=4, mlp_hidden=(4,)))
        net.eval()
        x = torch.randn(32, 2, 8, 8)
        _, z_full = net(x)
        _, z_one = net(x[:1])
        assert torch.allclose(z_full[0], z_one[0], atol=1e-6)


class TestSnapshot:
    def test_immutable_under_source_training(self, torch_gen):
        net = build_trinet("mlp", TOY)
        frozen = snapshot(net)
        before = param_hash(frozen)
        opt = torch.optim.SGD(net.parameters(), lr=0.5)
        for _ in range(10):
            x = torch.randn((8, 2, 8, 8), generator=torch_gen)
            _, z = net(x)
            loss = z.pow(2).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
        assert param_hash(frozen) == before

    def test_matches_source_at_creation(self, torch_gen):
        net = build_trinet("mlp", TOY)
        frozen = snapshot(net)
        x = torch.randn((4, 2, 8, 8), generator=torch_gen)
        net.eval()
        _, z_net = net(x)
        _, z_frozen = frozen(x)
        assert torch.equal(z_net, z_frozen)

    def test_diverges_after_source_perturbation(self, torch_gen):
        net = build_trinet("mlp", TOY)
        frozen = snapshot(net)
        with torch.no_grad():
            for p in net.parameters():
                p.add_(1.0)
        x = torch.randn((4, 2, 8, 8), generator=torch_gen)
        net.eval()
        _, z_net = net(x)
        _, z_frozen = frozen(x)
        assert not torch.allclose(z_net, z_frozen)

    def test_outputs_carry_no_grad(self):
        net = build_trinet("mlp", TOY)
        frozen = snapshot(net)
        _, z = frozen(torch.randn(2, 2, 8, 8))
        assert not z.requires_grad

    def test_gradient_isolation_through_losses(self, torch_gen):
        net = build_trinet("mlp", TOY)
        frozen = snapshot(net)
        before = param_hash(frozen)
        opt = torch.optim.SGD(net.parameters(), lr=0.1)
        x = torch.randn((6, 2, 8, 8), generator=torch_gen)
        _, z = net(x)
        _, z_old = frozen(x)
        loss = (z - z_old).pow(2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        assert param_hash(frozen) == before

    def test_train_mode_is_sticky_off(self):
        frozen = snapshot(build_trinet("mlp", TOY))
        frozen.train()
        assert not frozen.training


class TestEma:
    def test_momentum_one_is_fixed_point(self):
        net = build_trinet("mlp", TOY)
        tgt = EmaTarget(net)
        with torch.no_grad():
            for p in net.parameters():
                p.add_(1.0)
        before = param_hash(tgt)
        ema_update(tgt, net, 1.0)
        assert param_hash(tgt) == before

    def test_momentum_zero_copies_online(self):
        net = build_trinet("mlp", TOY)
        tgt = EmaTarget(net)
        with torch.no_grad():
            for p in net.parameters():
                p.mul_(0.5).add_(0.25)
        ema_update(tgt, net, 0.0)
        for (k1, a), (k2, b) in zip(sorted(tgt.encoder.state_dict().items()),
                                    sorted(net.encoder.state_dict().items())):
            assert torch.allclose(a.float(), b.float(), atol=1e-7), k1

    def test_elementwise_blend(self):
        net = build_trinet("mlp", TOY)
        tgt = EmaTarget(net)
        with torch.no_grad():
            for p in tgt.parameters():
                p.fill_(2.0)
            for p in net.encoder.parameters():
                p.fill_(4.0)
            for p in net.projector.parameters():
                p.fill_(4.0)
        ema_update(tgt, net, 0.5)
        for p in tgt.parameters():
            assert torch.allclose(p, torch.full_like(p, 3.0))

    def test_geometric_contraction(self):
        net = build_trinet("mlp", TOY)
        tgt = EmaTarget(net)
        with torch.no_grad():
            for p in tgt.parameters():
                p.zero_()
        ref = [p.detach().clone() for p in net.encoder.parameters()]
        m = 0.8
        gaps = []
        for _ in range(4):
            ema_update(tgt, net, m)
            with torch.no_grad():
                gap = sum((tp - sp).norm() ** 2 for tp, sp in
                          zip(tgt.encoder.parameters(), net.encoder.parameters()))
            gaps.append(float(gap) ** 0.5)
        for a, b in zip(gaps, gaps[1:]):
            assert b == pytest.approx(m * a, rel=1e-5)

    def test_momentum_out_of_range(self):
        net = build_trinet("mlp", TOY)
        tgt = EmaTarget(net)
        with pytest.raises(ValueError):
            ema_update(tgt, net, 1.5)

    def test_ramp_endpoints(self):
        assert ema_momentum(0.9, 0, 100) == pytest.approx(0.9)
        assert ema_momentum(0.9, 100, 100) == pytest.approx(1.0)
        assert 0.9 < ema_momentum(0.9, 50, 100) < 1.0


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, torch_gen):
        cfg = ModelConfig(**{**TOY.__dict__, "use_predictor": True})
        net = build_trinet("mlp", cfg)
        ema = EmaTarget(net)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, net, meta={"task_index": 2, "config_hash": "h"},
                        ema=ema)
        net2, ema2, meta = load_checkpoint(path)
        assert meta["task_index"] == 2
        assert param_hash(net2) == param_hash(net)
        assert param_hash(ema2) == param_hash(ema)
        x = torch.randn((3, 2, 8, 8), generator=torch_gen)
        net.eval(), net2.eval()
        assert torch.equal(net(x)[1], net2(x)[1])

    def test_deterministic_bytes(self, tmp_path):
        net = build_trinet("mlp", TOY)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, net, meta={"task_index": 0})
        save_checkpoint(p2, net, meta={"task_index": 0})
        assert p1.read_bytes() == p2.read_bytes()
