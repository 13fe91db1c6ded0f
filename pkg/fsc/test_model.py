"""
Tests for the completion network, its building blocks and the critics
"""

import numpy as np
import pytest
import torch
from config import ABLATION_FLAGS, ConfigError, ModelConfig, PointCountOutOfRange
from errors import EmptyInput, InputError, NonFiniteGradient
from metrics import chamfer_l2_torch
from model import (
    CascadedExternalAttention,
    CoarseDecoder,
    Critics,
    DetailDecoder,
    EncoderBranch,
    ExternalAttention,
    FeatureReviser,
    OffsetAttention,
    PointCritic,
    PointReviser,
    backward,
    ball_query,
    build_model,
    check_gradients,
    complete,
    critic_forward,
    folding_grid,
    parameter_count,
)


def numpy_linear(layer, x):
    weight = layer.weight.detach().numpy()
    bias = 0.0 if layer.bias is None else layer.bias.detach().numpy()
    return x @ weight.T + bias


def softmax(x, axis):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def relu(x):
    return np.maximum(x, 0.0)


def leaky(x):
    return np.where(x > 0, x, 0.2 * x)


@pytest.fixture
def double_rng():
    torch.manual_seed(0)
    return np.random.default_rng(0)


@pytest.fixture
def micro_model(micro_model_config):
    model, _ = build_model(micro_model_config, seed=1)
    return model.eval()


class TestAttention:
    """Test offset and external attention against dense recomputation"""

    def test_offset_attention_singleton_is_identity(self):
        block = OffsetAttention(4).double()
        with torch.no_grad():
            block.value.weight.copy_(torch.eye(4))
            block.value.bias.zero_()
            block.transform.bias.zero_()
        features = torch.randn(1, 1, 4, dtype=torch.float64)
        torch.testing.assert_close(block(features), features, rtol=0, atol=0)

    def test_offset_attention_matches_dense_recomputation(self, double_rng):
        block = OffsetAttention(4).double()
        F = double_rng.normal(size=(3, 4))
        out = block(torch.from_numpy(F).unsqueeze(0))[0].detach().numpy()

        energy = numpy_linear(block.query, F) @ numpy_linear(block.key, F).T
        A = softmax(energy, axis=1)
        A = A / A.sum(axis=0, keepdims=True)
        attended = A.T @ numpy_linear(block.value, F)
        expected = F + relu(numpy_linear(block.transform, F - attended))
        np.testing.assert_allclose(out, expected, atol=1e-9)

    def test_external_attention_matches_dense_recomputation(self, double_rng):
        block = ExternalAttention(8, heads=2, memory=5).double()
        F = double_rng.normal(size=(4, 8))
        out = block(torch.from_numpy(F).unsqueeze(0))[0].detach().numpy()

        x = numpy_linear(block.project_in, F)
        Mk = block.memory_key.detach().numpy()
        Mv = block.memory_value.detach().numpy()
        heads = []
        for h in range(2):
            xh = x[:, 4 * h : 4 * (h + 1)]
            A = softmax(xh @ Mk.T, axis=0)
            A = A / A.sum(axis=1, keepdims=True)
            heads.append(A @ Mv)
        expected = F + numpy_linear(block.project_out, np.concatenate(heads, axis=1))
        np.testing.assert_allclose(out, expected, atol=1e-9)

    def test_external_attention_is_row_equivariant(self):
        block = ExternalAttention(8, heads=2, memory=5).double()
        F = torch.randn(1, 6, 8, dtype=torch.float64)
        perm = torch.randperm(6)
        torch.testing.assert_close(block(F[:, perm]), block(F)[:, perm])

    def test_cascade_composes_its_blocks(self):
        cascade = CascadedExternalAttention(8, heads=2, memory=4).double()
        F = torch.randn(1, 5, 8, dtype=torch.float64)
        first, second = cascade.blocks
        torch.testing.assert_close(cascade(F), second(first(F)), rtol=0, atol=0)

    def test_heads_must_divide_width(self):
        with pytest.raises(ConfigError):
            ExternalAttention(10, heads=4, memory=8)

    @pytest.mark.parametrize("n", [1, 5])
    def test_shapes_are_preserved(self, n):
        features = torch.randn(2, n, 8)
        assert OffsetAttention(8)(features).shape == features.shape
        assert ExternalAttention(8, 2, 4)(features).shape == features.shape


class TestEncoder:
    """Test the two encoder branches"""

    def test_extensive_branch_matches_manual_forward(self, double_rng):
        branch = EncoderBranch(4).double()
        X = double_rng.normal(size=(3, 3))
        acts = branch.activations(torch.from_numpy(X))

        F11 = numpy_linear(branch.first[2], relu(numpy_linear(branch.first[0], X)))
        f11 = F11.max(axis=0)
        expanded = np.hstack([F11, np.tile(f11, (3, 1))])
        hidden = relu(numpy_linear(branch.second_in, expanded))
        f12 = numpy_linear(branch.second_out, hidden).max(axis=0)
        np.testing.assert_allclose(acts.point_features[0].detach().numpy(), F11, atol=1e-12)
        np.testing.assert_allclose(acts.expanded[0].detach().numpy(), expanded, atol=1e-12)
        np.testing.assert_allclose(
            acts.output[0].detach().numpy(), np.concatenate([f11, f12]), atol=1e-12
        )

    @pytest.mark.parametrize("attention", [False, True])
    def test_branch_is_permutation_invariant(self, attention):
        branch = EncoderBranch(16, attention, heads=2, memory=4)
        X = torch.randn(1, 50, 3)
        perm = torch.randperm(50)
        torch.testing.assert_close(branch(X[:, perm]), branch(X), atol=1e-5, rtol=0)

    def test_single_point(self):
        out = EncoderBranch(8, True, heads=2, memory=4)(torch.randn(1, 3))
        assert out.shape == (1, 8)
        assert torch.isfinite(out).all()

    def test_empty_cloud(self):
        with pytest.raises(EmptyInput):
            EncoderBranch(8)(torch.zeros(1, 0, 3))

    def test_wrong_shape(self):
        with pytest.raises(InputError):
            EncoderBranch(8)(torch.zeros(1, 5, 2))

    def test_salient_without_attention_has_extensive_topology(self, micro_model_config):
        model, _ = build_model(micro_model_config.with_disabled(["salient_attention"]))

        def branch_names(prefix):
            return {
                name.removeprefix(prefix)
                for name, _ in model.named_parameters()
                if name.startswith(prefix)
            }

        assert branch_names("encoder.salient.") == branch_names("encoder.extensive.")

    def test_encode_width_and_origin_cloud(self, micro_model, micro_model_config):
        f = micro_model.encode(torch.zeros(2, 10, 3))
        assert f.shape == (2, micro_model_config.feature_width)
        assert torch.isfinite(f).all()

    @pytest.mark.parametrize("flag", ["extensive_branch", "salient_branch"])
    def test_lone_branch_is_projected(self, micro_model_config, flag):
        config = micro_model_config.with_disabled([flag])
        model, _ = build_model(config)
        assert model.encoder.projection is not None
        assert model.encode(torch.randn(1, 20, 3)).shape == (1, config.feature_width)


class TestRevisionAndDecoders:
    """Test the revision stages and both decoders"""

    def test_feature_reviser_is_identity_at_init(self):
        reviser = FeatureReviser(12)
        f = torch.randn(3, 12)
        torch.testing.assert_close(reviser(f), f, rtol=0, atol=0)

    def test_feature_reviser_matches_dense_recomputation(self, double_rng):
        reviser = FeatureReviser(6, hidden=5).double()
        with torch.no_grad():
            reviser.layers[-1].weight.normal_()
            reviser.layers[-1].bias.normal_()
        f = double_rng.normal(size=(2, 6))
        out = reviser(torch.from_numpy(f)).detach().numpy()

        x = f
        for i, layer in enumerate(reviser.layers):
            if i in (2, 4):
                x = np.hstack([x, f])
            x = numpy_linear(layer, x)
            if i < 6:
                x = leaky(x)
        np.testing.assert_allclose(out, f + x, atol=1e-12)

    def test_coarse_decoder_zero_weights_give_origin(self):
        decoder = CoarseDecoder(8, 16, 10)
        with torch.no_grad():
            for p in decoder.parameters():
                p.zero_()
        out = decoder(torch.randn(2, 8))
        assert out.shape == (2, 10, 3)
        assert torch.count_nonzero(out) == 0

    def test_point_reviser_identity_and_equivariance(self):
        reviser = PointReviser(8)
        Y = torch.randn(1, 12, 3)
        torch.testing.assert_close(reviser(Y), Y, rtol=0, atol=0)
        with torch.no_grad():
            reviser.mlp[-1].weight.normal_()
        perm = torch.randperm(12)
        torch.testing.assert_close(reviser(Y[:, perm]), reviser(Y)[:, perm])

    def test_ball_query_groups(self):
        points = torch.tensor([[[0.0, 0, 0], [0.1, 0, 0], [1.0, 0, 0], [0.15, 0, 0]]])
        index = ball_query(points, 0.2, 3)
        assert index[0, 0].tolist() == [0, 1, 3]
        # a lone point repeats itself
        assert index[0, 2].tolist() == [2, 2, 2]
        assert ball_query(points, 0.2, 6).shape == (1, 4, 6)

    def test_folding_grid(self):
        assert folding_grid(1).tolist() == [[0.0, 0.0]]
        grid = folding_grid(3)
        assert grid.shape == (9, 2)
        assert float(grid.abs().max()) == pytest.approx(0.05)

    def test_detail_decoder_single_cell_is_identity(self, micro_model_config):
        config = ModelConfig.model_validate({**micro_model_config.model_dump(), "grid": 1})
        decoder = DetailDecoder(config)
        Y = torch.randn(2, config.n_coarse, 3)
        out = decoder(Y, torch.randn(2, config.feature_width))
        torch.testing.assert_close(out, Y, rtol=0, atol=0)

    def test_detail_decoder_cardinality(self, micro_model_config):
        decoder = DetailDecoder(micro_model_config)
        out = decoder(torch.randn(1, 16, 3), torch.randn(1, micro_model_config.feature_width))
        assert out.shape == (1, micro_model_config.m_detail, 3)


class TestCompletionNetwork:
    """Test the full forward pass"""

    @pytest.mark.parametrize("n", [16, 64, 256])
    def test_output_sizes_independent_of_input(self, micro_model, micro_model_config, n):
        trace = complete(micro_model, torch.randn(n, 3))
        assert trace.Y_coarse.shape == (1, micro_model_config.n_coarse, 3)
        assert trace.Y_fine.shape == trace.Y_coarse.shape
        assert trace.Y_detail.shape == (1, micro_model_config.m_detail, 3)

    def test_permutation_invariance(self, micro_model):
        X = torch.randn(1, 80, 3)
        perm = torch.randperm(80)
        with torch.no_grad():
            a = micro_model(X).Y_detail
            b = micro_model(X[:, perm]).Y_detail
        torch.testing.assert_close(a, b, atol=1e-5, rtol=0)

    def test_revision_stages_are_identities_at_init(self, micro_model):
        trace = micro_model(torch.randn(2, 30, 3))
        torch.testing.assert_close(trace.f_fine, trace.f_coarse, rtol=0, atol=0)
        torch.testing.assert_close(trace.Y_fine, trace.Y_coarse, rtol=0, atol=0)

    def test_point_count_limits(self, micro_model_config):
        config = ModelConfig.model_validate({**micro_model_config.model_dump(), "max_points": 32})
        model, _ = build_model(config)
        with pytest.raises(PointCountOutOfRange, match="accepts") as raised:
            model(torch.randn(33, 3))
        assert raised.value.exit_code == 3
        assert isinstance(raised.value, InputError)

    def test_build_is_deterministic_and_leaves_global_rng(self, micro_model_config):
        torch.manual_seed(99)
        before = torch.rand(1)
        torch.manual_seed(99)
        a, _ = build_model(micro_model_config, seed=4)
        after = torch.rand(1)
        b, _ = build_model(micro_model_config, seed=4)
        assert before == after
        for (name, p), (_, q) in zip(a.named_parameters(), b.named_parameters(), strict=True):
            assert torch.equal(p, q), name

    @pytest.mark.parametrize("flag", ABLATION_FLAGS)
    def test_ablation_census(self, micro_model_config, flag):
        full, full_critics = build_model(micro_model_config)
        config = micro_model_config.with_disabled([flag])
        model, critics = build_model(config)
        prefixes = {
            "extensive_branch": ["encoder.extensive."],
            "salient_branch": ["encoder.salient."],
            "salient_attention": ["encoder.salient.offset_attention.", "encoder.salient.cascade."],
            "feature_revision": ["feature_reviser."],
            "point_revision": ["point_reviser."],
            "pointnetpp_fusion": ["detail_decoder.local."],
            "transformer_fusion": ["detail_decoder.attention."],
        }[flag]
        names = {name for name, _ in model.named_parameters()}
        full_names = {name for name, _ in full.named_parameters()}
        for prefix in prefixes:
            assert any(n.startswith(prefix) for n in full_names)
            assert not any(n.startswith(prefix) for n in names)
        assert parameter_count(model) < parameter_count(full) or flag.endswith("_branch")
        if flag == "feature_revision":
            assert critics.feature is None and full_critics.feature is not None
        if flag == "point_revision":
            assert critics.point is None and full_critics.point is not None


class TestCritics:
    """Test both critics"""

    def test_point_critic_is_permutation_invariant(self):
        critic = PointCritic(16)
        Y = torch.randn(3, 40, 3)
        perm = torch.randperm(40)
        torch.testing.assert_close(critic(Y[:, perm]), critic(Y), atol=1e-5, rtol=0)

    def test_one_score_per_batch_member(self, micro_model_config):
        critics = Critics(micro_model_config)
        features = torch.randn(4, micro_model_config.feature_width)
        assert critic_forward(critics, "feature", features).shape == (4,)
        assert critic_forward(critics, "point", torch.randn(4, 16, 3)).shape == (4,)

    def test_disabled_stage_has_no_critic(self, micro_model_config):
        critics = Critics(micro_model_config.with_disabled(["point_revision"]))
        with pytest.raises(ConfigError, match="disabled"):
            critics.get("point")

    def test_unknown_kind(self, micro_model_config):
        with pytest.raises(ValueError):
            Critics(micro_model_config).get("colour")


class TestGradients:
    """Test analytic gradients"""

    def test_zero_upstream_gives_zero_gradients(self, micro_model):
        trace = micro_model(torch.randn(1, 20, 3))
        params = dict(micro_model.named_parameters())
        grads = backward(trace.Y_detail, torch.zeros_like(trace.Y_detail), params)
        assert set(grads) == set(params)
        assert all(torch.count_nonzero(g) == 0 for g in grads.values())

    def test_non_finite_gradient_is_named(self, micro_model):
        trace = micro_model(torch.randn(1, 20, 3))
        params = dict(micro_model.coarse_decoder.named_parameters())
        upstream = torch.full_like(trace.Y_detail, float("nan"))
        with pytest.raises(NonFiniteGradient) as info:
            backward(trace.Y_detail, upstream, params)
        assert info.value.tensor_name in params

    def test_check_gradients_names_parameter(self):
        layer = torch.nn.Linear(2, 2)
        layer(torch.ones(1, 2)).sum().backward()
        layer.bias.grad[0] = float("inf")
        with pytest.raises(NonFiniteGradient, match="net.bias"):
            check_gradients(layer, "net.")

    def test_chamfer_gradient_for_one_point(self):
        y = torch.tensor([[[0.2, 0.0, 0.0]]], dtype=torch.float64, requires_grad=True)
        g = torch.tensor([[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]], dtype=torch.float64)
        chamfer_l2_torch(y, g).backward()
        # 2 (y - g1) from y's nearest neighbour plus the mean of 2 (y - g_j) over g
        expected = 2 * (y - g[:, 0]) + (y - g[:, 0]) + (y - g[:, 1])
        torch.testing.assert_close(y.grad, expected.detach())

    def test_input_gradcheck(self, micro_model_config):
        torch.manual_seed(0)
        model, _ = build_model(micro_model_config, seed=2)
        model = model.double()
        with torch.no_grad():
            # wake the zero-initialized heads so every stage carries gradient
            for layer in (
                model.feature_reviser.layers[-1],
                model.point_reviser.mlp[-1],
                model.detail_decoder.fold_second[-1],
            ):
                layer.weight.normal_(std=0.1)
        X = torch.randn(1, 8, 3, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(lambda x: model(x).Y_detail, (X,), eps=1e-6, atol=1e-4)

    def test_parameter_gradients_match_finite_differences(self, micro_model_config):
        torch.manual_seed(0)
        model, critics = build_model(micro_model_config, seed=3)
        model, critics = model.double(), critics.double()
        with torch.no_grad():
            for layer in (
                model.feature_reviser.layers[-1],
                model.point_reviser.mlp[-1],
                model.detail_decoder.fold_second[-1],
            ):
                layer.weight.normal_(std=0.1)
        X = torch.randn(1, 12, 3, dtype=torch.float64)
        weights = torch.randn(1, micro_model_config.m_detail, 3, dtype=torch.float64)

        def objective() -> torch.Tensor:
            trace = model(X)
            return (
                (trace.Y_detail * weights).sum()
                + critics.feature(trace.f_fine).sum()
                + critics.point(trace.Y_fine).sum()
            )

        params = {f"model.{k}": v for k, v in model.named_parameters()}
        params.update({f"critics.{k}": v for k, v in critics.named_parameters()})
        analytic = backward(objective(), torch.ones((), dtype=torch.float64), params)

        rng = np.random.default_rng(0)
        h = 1e-6
        for name, param in params.items():
            flat = param.data.view(-1)
            for i in rng.choice(flat.numel(), size=min(2, flat.numel()), replace=False):
                original = flat[i].item()
                with torch.no_grad():
                    flat[i] = original + h
                    up = objective().item()
                    flat[i] = original - h
                    down = objective().item()
                    flat[i] = original
                numeric = (up - down) / (2 * h)
                exact = analytic[name].view(-1)[i].item()
                assert abs(numeric - exact) <= 1e-3 * max(1.0, abs(exact)), name
