"""Encoder/classifier/projection heads and the EMA mirror."""
import hashlib

import numpy as np
import pytest
import torch
import torch.nn as nn

from tailcontrast import diagnostics
from tailcontrast.models import ModelState, ProjectionHead, SmallCNN, WideResNet, l2_normalize


def _param_hash(module):
    h = hashlib.sha256()
    for p in module.parameters():
        h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


@pytest.fixture
def state():
    torch.manual_seed(0)
    return ModelState.build("small-cnn", num_classes=4, proj_dim=16, ema_momentum=0.9)


class TestEncode:
    def test_zero_initialized_encoder_maps_to_zero(self, state):
        for p in state.encoder.parameters():
            nn.init.zeros_(p)
        state.eval_mode()
        feats = state.encode(torch.rand(2, 3, 32, 32))
        assert torch.all(feats == 0)

    def test_deterministic_in_eval_mode(self, state):
        state.eval_mode()
        x = torch.rand(3, 3, 32, 32)
        assert torch.equal(state.encode(x), state.encode(x))

    def test_shape_mismatch_raises(self, state):
        with pytest.raises(ValueError, match="expected images"):
            state.encode(torch.rand(2, 1, 32, 32))
        with pytest.raises(ValueError, match="expected images"):
            state.encode(torch.rand(2, 32, 32))

    def test_ema_path_equals_online_after_rho_zero_update(self, state):
        state.ema_momentum = 0.0
        state.eval_mode()
        x = torch.rand(2, 3, 32, 32)
        state.ema_update()
        assert torch.allclose(state.encode(x, use_ema=True), state.encode(x), atol=1e-6)

    def test_ema_path_carries_no_grad(self, state):
        out = state.encode(torch.rand(2, 3, 32, 32), use_ema=True)
        assert not out.requires_grad


class TestClassify:
    def test_zero_weights_give_uniform_softmax(self, state):
        nn.init.zeros_(state.classifier.weight)
        nn.init.zeros_(state.classifier.bias)
        logits = state.classify(torch.rand(5, state.feature_dim))
        probs = torch.softmax(logits, dim=-1)
        assert torch.allclose(probs, torch.full_like(probs, 0.25), atol=1e-7)

    def test_closed_form_softmax(self):
        logits = torch.tensor([[np.log(2.0), 0.0]])
        probs = torch.softmax(logits, dim=-1)
        assert probs[0, 0].item() == pytest.approx(2.0 / 3.0, abs=1e-7)
        assert probs[0, 1].item() == pytest.approx(1.0 / 3.0, abs=1e-7)

    def test_permutation_equivariance(self, state):
        z = torch.rand(3, state.feature_dim)
        logits = state.classify(z)
        perm = torch.tensor([2, 0, 1, 3])
        state.classifier.weight.data = state.classifier.weight.data[perm]
        state.classifier.bias.data = state.classifier.bias.data[perm]
        assert torch.allclose(state.classify(z), logits[:, perm], atol=1e-7)

    def test_dimension_mismatch_raises(self, state):
        with pytest.raises(ValueError, match="features of dim"):
            state.classify(torch.rand(2, state.feature_dim + 1))


class TestProject:
    def test_unit_norm_output(self, state):
        z = torch.rand(100, state.feature_dim)
        e = state.project(z)
        assert torch.allclose(e.norm(dim=-1), torch.ones(100), atol=1e-6)

    def test_unit_norm_many_random_inputs(self, state):
        torch.manual_seed(1)
        z = torch.randn(1000, state.feature_dim)
        e = state.project(z)
        assert (e.norm(dim=-1) - 1.0).abs().max().item() < 1e-6

    def test_scale_invariance_with_linear_no_bias_head(self):
        torch.manual_seed(2)
        enc = SmallCNN()
        st = ModelState(
            encoder=enc,
            classifier=nn.Linear(enc.feature_dim, 4),
            projector=nn.Linear(enc.feature_dim, 8, bias=False),
            ema_encoder=SmallCNN(),
            ema_projector=nn.Linear(enc.feature_dim, 8, bias=False),
            ema_momentum=0.99,
        )
        z = torch.randn(4, enc.feature_dim)
        assert torch.allclose(st.project(z), st.project(2.0 * z), atol=1e-6)

    def test_zero_vector_maps_to_basis_and_counts(self):
        diagnostics.reset()
        out = l2_normalize(torch.zeros(2, 8))
        expected = torch.zeros(2, 8)
        expected[:, 0] = 1.0
        assert torch.equal(out, expected)
        assert diagnostics.counters["zero_vector_projection"] == 2

    def test_default_projection_dim(self):
        torch.manual_seed(0)
        st = ModelState.build("small-cnn", num_classes=4)
        assert st.project(torch.rand(1, st.feature_dim)).shape[-1] == 64


class TestEmaUpdate:
    def test_single_step_arithmetic(self):
        lin = nn.Linear(2, 2, bias=False)
        nn.init.ones_(lin.weight)
        mirror = nn.Linear(2, 2, bias=False)
        nn.init.zeros_(mirror.weight)
        st = ModelState(
            encoder=lin, classifier=nn.Linear(2, 2), projector=nn.Identity(),
            ema_encoder=mirror, ema_projector=nn.Identity(), ema_momentum=0.9, in_channels=2,
        )
        st.ema_update()
        assert torch.allclose(mirror.weight, torch.full((2, 2), 0.1))

    def test_rho_one_keeps_mirror(self):
        lin = nn.Linear(2, 2, bias=False)
        mirror = nn.Linear(2, 2, bias=False)
        nn.init.zeros_(mirror.weight)
        st = ModelState(
            encoder=lin, classifier=nn.Linear(2, 2), projector=nn.Identity(),
            ema_encoder=mirror, ema_projector=nn.Identity(), ema_momentum=1.0, in_channels=2,
        )
        st.ema_update()
        assert torch.all(mirror.weight == 0)

    def test_closed_form_after_ten_steps(self):
        # mirror_n = rho^n * mirror_0 + (1 - rho^n) * online, for constant online
        rho = 0.9
        lin = nn.Linear(3, 3, bias=False).double()
        mirror = nn.Linear(3, 3, bias=False).double()
        torch.manual_seed(3)
        online_value = torch.randn(3, 3, dtype=torch.float64)
        start_value = torch.randn(3, 3, dtype=torch.float64)
        lin.weight.data = online_value.clone()
        mirror.weight.data = start_value.clone()
        st = ModelState(
            encoder=lin, classifier=nn.Linear(3, 3).double(), projector=nn.Identity(),
            ema_encoder=mirror, ema_projector=nn.Identity(), ema_momentum=rho, in_channels=3,
        )
        for _ in range(10):
            st.ema_update()
        expected = rho**10 * start_value + (1 - rho**10) * online_value
        assert (mirror.weight - expected).abs().max().item() < 1e-7

    def test_backward_pass_leaves_mirror_untouched(self, state):
        before = _param_hash(state.ema_encoder)
        x = torch.rand(2, 3, 32, 32)
        state.train_mode()
        loss = state.classify(state.encode(x)).sum() + state.project(state.encode(x)).sum()
        loss.backward()
        opt = torch.optim.SGD(state.trainable_parameters(), lr=0.1)
        opt.step()
        assert _param_hash(state.ema_encoder) == before


class TestBackbones:
    def test_small_cnn_feature_shape(self):
        enc = SmallCNN()
        assert enc(torch.rand(2, 3, 32, 32)).shape == (2, enc.feature_dim)

    def test_wide_resnet_feature_shape(self):
        enc = WideResNet(depth=28, widen=2)
        enc.eval()
        assert enc.feature_dim == 128
        with torch.no_grad():
            assert enc(torch.rand(1, 3, 32, 32)).shape == (1, 128)

    def test_projection_head_is_two_layers(self):
        head = ProjectionHead(32, 8)
        linears = [m for m in head.net if isinstance(m, nn.Linear)]
        assert len(linears) == 2

    def test_state_dict_round_trip(self, state):
        torch.manual_seed(9)
        other = ModelState.build("small-cnn", num_classes=4, proj_dim=16, ema_momentum=0.9)
        other.load_state_dict(state.state_dict())
        x = torch.rand(2, 3, 32, 32)
        state.eval_mode(), other.eval_mode()
        assert torch.equal(state.encode(x), other.encode(x))
