"""Contract tests for the model zoo: shapes, determinism, head growth,
generator geometry, spectral norm, checkpoints, and finite-difference
gradient checks through tiny models."""

import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.autograd import gradcheck

from lander.errors import BadShapeError, ShrinkingHeadError, UnknownArchError
from lander.losses import (
    bounding_loss,
    client_loss_current,
    feature_mse,
    gen_adv_loss,
    gen_bn_loss,
    gen_oh_loss,
    kd_kl,
)
from lander.models import (
    GEN_LATENT_DIM,
    LearnableDataStats,
    ModelSnapshot,
    build_classifier,
    build_generator,
    build_noisy_layer,
    extend_head,
    load_checkpoint,
    save_checkpoint,
    top_singular_value,
)


class TestClassifier:
    def test_forward_shapes(self):
        model = build_classifier("small_cnn", num_classes=7, d_e=12, seed=0)
        x = torch.randn(4, 3, 32, 32)
        logits, feat = model(x)
        assert logits.shape == (4, 7)
        assert feat.shape == (4, model.feat_dim)
        assert model.project(feat).shape == (4, 12)

    def test_resnet_shapes(self):
        model = build_classifier("resnet18_like", num_classes=5, d_e=8, seed=0)
        logits, feat = model(torch.randn(2, 3, 32, 32))
        assert logits.shape == (2, 5)
        assert feat.shape == (2, 512)

    def test_same_seed_identical(self):
        a = build_classifier("small_cnn", 5, 16, seed=3)
        b = build_classifier("small_cnn", 5, 16, seed=3)
        for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert na == nb
            assert torch.equal(pa, pb)

    def test_different_seed_differs(self):
        a = build_classifier("small_cnn", 5, 16, seed=3)
        b = build_classifier("small_cnn", 5, 16, seed=4)
        assert not torch.equal(a.head.weight, b.head.weight)

    def test_unknown_arch(self):
        with pytest.raises(UnknownArchError):
            build_classifier("vgg", 10, 8)

    def test_grayscale_channels(self):
        model = build_classifier("small_cnn", 4, 8, seed=0, in_channels=1)
        logits, _ = model(torch.randn(2, 1, 16, 16))
        assert logits.shape == (2, 4)

    def test_bn_modules_nonempty(self):
        model = build_classifier("small_cnn", 4, 8)
        stats = model.running_bn_stats()
        assert len(stats) == len(model.bn_modules()) > 0
        for mean, var in stats:
            assert torch.all(var > 0)


class TestExtendHead:
    def test_old_logits_preserved(self):
        model = build_classifier("small_cnn", 20, 16, seed=1).eval()
        probe = torch.randn(6, 3, 32, 32, generator=torch.Generator().manual_seed(9))
        before, _ = model(probe)
        grown = extend_head(model, 40).eval()
        after, _ = grown(probe)
        assert after.shape == (6, 40)
        assert torch.allclose(after[:, :20], before, atol=1e-7)

    def test_cumulative_growth(self):
        model = build_classifier("small_cnn", 20, 16, seed=1)
        widths = [model.num_classes]
        for target in (40, 60):
            model = extend_head(model, target)
            widths.append(model.num_classes)
        assert widths == [20, 40, 60]
        assert model.head.weight.shape == (60, model.feat_dim)

    def test_shrink_rejected(self):
        model = build_classifier("small_cnn", 20, 16)
        with pytest.raises(ShrinkingHeadError):
            extend_head(model, 10)
        with pytest.raises(ShrinkingHeadError):
            extend_head(model, 20)

    def test_backbone_and_projector_copied(self):
        model = build_classifier("small_cnn", 5, 16, seed=2)
        grown = extend_head(model, 8)
        for name, p in model.state_dict().items():
            if name.startswith("head."):
                continue
            assert torch.equal(p, grown.state_dict()[name])

    def test_new_rows_fresh(self):
        model = build_classifier("small_cnn", 5, 16, seed=2)
        a = extend_head(model, 8, seed=10)
        b = extend_head(model, 8, seed=11)
        assert not torch.equal(a.head.weight[5:], b.head.weight[5:])
        assert torch.equal(a.head.weight[:5], b.head.weight[:5])

    def test_original_untouched(self):
        model = build_classifier("small_cnn", 5, 16, seed=2)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        extend_head(model, 9)
        for k, v in model.state_dict().items():
            assert torch.equal(v, before[k])


class TestModelSnapshot:
    def test_frozen_and_isolated(self):
        model = build_classifier("small_cnn", 5, 16, seed=0)
        snap = ModelSnapshot(model)
        assert all(not p.requires_grad for p in snap.model.parameters())
        probe = torch.randn(2, 3, 16, 16)
        ref, _ = snap.forward(probe)
        with torch.no_grad():
            model.head.weight.add_(1.0)
        again, _ = snap.forward(probe)
        assert torch.equal(ref, again)

    def test_state_bytes_stable(self):
        model = build_classifier("small_cnn", 5, 16, seed=0)
        assert ModelSnapshot(model).state_bytes() == ModelSnapshot(model).state_bytes()
        with torch.no_grad():
            model.head.bias.add_(0.5)
        assert ModelSnapshot(model).state_bytes() != ModelSnapshot(model).state_bytes()[:-1] + b"x"


class TestGenerator:
    def test_reference_shape(self):
        gen = build_generator((3, 32, 32), scale="standard", seed=0).eval()
        z = torch.randn(256, GEN_LATENT_DIM)
        with torch.no_grad():
            out = gen(z)
        assert out.shape == (256, 3, 32, 32)

    def test_small_shape(self):
        gen = build_generator((3, 16, 16), seed=0).eval()
        with torch.no_grad():
            out = gen(torch.randn(4, GEN_LATENT_DIM))
        assert out.shape == (4, 3, 16, 16)

    def test_deep_variant_shape(self):
        gen = build_generator((3, 32, 32), scale="deep", seed=0).eval()
        with torch.no_grad():
            out = gen(torch.randn(2, GEN_LATENT_DIM))
        assert out.shape == (2, 3, 32, 32)

    def test_bad_shapes(self):
        with pytest.raises(BadShapeError):
            build_generator((3, 30, 30), scale="standard")
        with pytest.raises(BadShapeError):
            build_generator((3, 24, 24), scale="deep")
        with pytest.raises(ValueError):
            build_generator((3, 32, 32), scale="huge")

    def test_pre_bn_output_in_unit_interval(self):
        gen = build_generator((3, 16, 16), seed=1).train()
        z = torch.randn(8, GEN_LATENT_DIM) * 3
        with torch.no_grad():
            for _ in range(50):  # settle spectral-norm power iterations
                gen(z)
            gen.eval()
            out = gen(z, pre_bn=True)
            # sigmoid output: strictly inside (0,1) once conv gains are bounded
            assert float(out.min()) > 0.0
            assert float(out.max()) < 1.0
            # and within the closed unit interval for any input scale
            wild = gen(torch.randn(8, GEN_LATENT_DIM) * 50, pre_bn=True)
            assert float(wild.min()) >= 0.0 and float(wild.max()) <= 1.0

    def test_final_bn_optional(self):
        gen = build_generator((3, 16, 16), seed=1, final_bn=False).eval()
        with torch.no_grad():
            z = torch.randn(8, GEN_LATENT_DIM)
            assert torch.equal(gen(z), gen(z, pre_bn=True))

    def test_param_count_deterministic(self):
        a = build_generator((3, 32, 32), seed=0)
        b = build_generator((3, 32, 32), seed=0)
        na = sum(p.numel() for p in a.parameters())
        nb = sum(p.numel() for p in b.parameters())
        assert na == nb
        assert all(torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))

    def test_spectral_norm_bound(self):
        gen = build_generator((3, 16, 16), seed=0).train()
        z = torch.randn(8, GEN_LATENT_DIM)
        with torch.no_grad():
            for _ in range(100):  # power-iteration warm-up
                gen(z)
        gen.eval()
        convs = [
            m
            for m in gen.modules()
            if isinstance(m, nn.Conv2d) and hasattr(m, "weight_orig")
        ]
        assert len(convs) >= 3
        for conv in convs:
            assert top_singular_value(conv) <= 1.0 + 1e-2


class TestNoisyLayer:
    def test_shape(self):
        layer = build_noisy_layer(d_e=24, seed=0).eval()
        with torch.no_grad():
            out = layer(torch.randn(5, 24))
        assert out.shape == (5, GEN_LATENT_DIM)

    def test_reinit_differs(self):
        e = torch.randn(4, 16, generator=torch.Generator().manual_seed(0))
        a = build_noisy_layer(16, seed=1).eval()
        b = build_noisy_layer(16, seed=2).eval()
        with torch.no_grad():
            assert not torch.equal(a(e), b(e))

    def test_same_seed_reproducible(self):
        e = torch.randn(4, 16)
        a = build_noisy_layer(16, seed=5).eval()
        b = build_noisy_layer(16, seed=5).eval()
        with torch.no_grad():
            assert torch.equal(a(e), b(e))


class TestLearnableDataStats:
    def test_sigma_positive_under_extreme_rho(self):
        lds = LearnableDataStats(3)
        with torch.no_grad():
            lds.rho.fill_(-60.0)
        assert torch.all(lds.sigma > 0)

    def test_normalization_arithmetic(self):
        lds = LearnableDataStats(2, mu_init=0.5, sigma_init=0.25)
        x = torch.full((1, 2, 2, 2), 1.0)
        out = lds(x)
        assert torch.allclose(out, torch.full_like(out, 0.5 / lds.sigma[0].item()), atol=1e-5)

    def test_trainable_flag(self):
        frozen = LearnableDataStats(3, trainable=False)
        assert not frozen.mu.requires_grad and not frozen.rho.requires_grad
        live = LearnableDataStats(3, trainable=True)
        assert live.mu.requires_grad and live.rho.requires_grad

    def test_rejects_nonpositive_sigma(self):
        with pytest.raises(ValueError):
            LearnableDataStats(3, sigma_init=0.0)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = build_classifier("small_cnn", 6, 16, seed=7)
        model.train()
        model(torch.randn(8, 3, 16, 16))  # mutate BN running stats
        with torch.no_grad():
            model.head.bias.add_(0.25)
        path = tmp_path / "ckpt" / "model.bin"
        save_checkpoint(model, path, task_index=3)
        loaded, task_index = load_checkpoint(path)
        assert task_index == 3
        assert loaded.num_classes == 6 and loaded.d_e == 16
        for name, p in model.state_dict().items():
            assert torch.equal(p, loaded.state_dict()[name]), name

    def test_bn_stats_survive(self, tmp_path):
        model = build_classifier("small_cnn", 4, 8, seed=0)
        model.train()
        model(torch.rand(16, 3, 16, 16) * 3 + 1)
        save_checkpoint(model, tmp_path / "m.bin")
        loaded, _ = load_checkpoint(tmp_path / "m.bin")
        for (m0, v0), (m1, v1) in zip(model.running_bn_stats(), loaded.running_bn_stats()):
            assert torch.equal(m0, m1) and torch.equal(v0, v1)

    def test_rejects_garbage(self, tmp_path):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"not a checkpoint at all")
        with pytest.raises(ValueError):
            load_checkpoint(bad)


class TestGradientChecks:
    """Analytic gradients vs central finite differences (double precision)."""

    RTOL = 1e-3

    def _tiny_classifier(self):
        torch.manual_seed(0)
        model = build_classifier("small_cnn", 4, 6, seed=0).double().eval()
        model.requires_grad_(False)
        return model

    def test_bounding_loss_through_projector(self):
        torch.manual_seed(1)
        proj = nn.Linear(8, 5).double()
        proj.requires_grad_(False)
        f = torch.randn(3, 8, dtype=torch.float64, requires_grad=True)
        e = torch.randn(3, 5, dtype=torch.float64)
        assert gradcheck(lambda t: bounding_loss(t, e, proj, 0.0), (f,), rtol=self.RTOL)

    def test_feature_mse(self):
        a = torch.randn(3, 6, dtype=torch.float64, requires_grad=True)
        b = torch.randn(3, 6, dtype=torch.float64)
        assert gradcheck(lambda t: feature_mse(t, b), (a,), rtol=self.RTOL)

    def test_kd_kl(self):
        s = torch.randn(4, 5, dtype=torch.float64, requires_grad=True)
        t = torch.randn(4, 5, dtype=torch.float64)
        assert gradcheck(lambda u: kd_kl(u, t, 2.0), (s,), rtol=self.RTOL)

    def test_client_loss_through_model(self):
        model = self._tiny_classifier()
        anchors = torch.randn(2, 6, dtype=torch.float64)
        labels = torch.tensor([1, 3])
        x = torch.rand(2, 3, 8, 8, dtype=torch.float64, requires_grad=True)

        def func(inp):
            logits, feat = model(inp)
            return client_loss_current(
                logits, labels, feat, anchors, model.projector, 0.0, 5.0
            )

        assert gradcheck(func, (x,), rtol=self.RTOL, atol=1e-5)

    def test_head_weight_gradient(self):
        model = self._tiny_classifier()
        x = torch.rand(3, 3, 8, 8, dtype=torch.float64)
        feat = model.backbone(x)
        labels = torch.tensor([0, 2, 1])
        w = model.head.weight.detach().clone().requires_grad_(True)

        def func(weight):
            logits = F.linear(feat, weight, model.head.bias)
            return F.cross_entropy(logits, labels)

        assert gradcheck(func, (w,), rtol=self.RTOL, atol=1e-5)

    def test_gen_losses_through_generator_chain(self):
        torch.manual_seed(2)
        gen = build_generator((3, 8, 8), seed=0).double().eval()
        noisy = build_noisy_layer(6, seed=0).double().eval()
        lds = LearnableDataStats(3).double()
        teacher = self._tiny_classifier()
        gen.requires_grad_(False)
        noisy.requires_grad_(False)
        lds.requires_grad_(False)
        anchors = torch.randn(2, 6, dtype=torch.float64)
        labels = torch.tensor([0, 2])
        running = [
            (torch.zeros(3, dtype=torch.float64), torch.ones(3, dtype=torch.float64))
        ]

        def func(e):
            x = lds(gen(noisy(e)))
            logits, feat = teacher(x)
            batch = [(x.mean((0, 2, 3)), x.var((0, 2, 3), unbiased=False))]
            total = (
                gen_oh_loss(logits, labels)
                + gen_bn_loss(batch, running)
                + bounding_loss(feat, anchors, teacher.projector, 0.0)
            )
            return total

        e = torch.randn(2, 6, dtype=torch.float64, requires_grad=True)
        assert gradcheck(func, (e,), rtol=self.RTOL, atol=1e-4)

    def test_adv_loss_gradient(self):
        torch.manual_seed(3)
        t = torch.randn(4, 5, dtype=torch.float64) * 2  # fixed teacher, clear margins
        s = torch.randn(4, 5, dtype=torch.float64, requires_grad=True)
        assert gradcheck(lambda u: gen_adv_loss(u, t), (s,), rtol=self.RTOL, atol=1e-5)
