import numpy as np
import numpy.testing as npt
import pytest

from deepe.gradcheck import check_full_model
from deepe.model import DeepEModel, DropoutSpec, ModelConfig
from deepe.numkernel import Rng


def tiny_model(seed=0, **overrides):
    kwargs = dict(
        dim=4, n_deepe_blocks=2, n_resnet_blocks=1, resnet_inner_layers=2,
        seed=seed, precision=64,
    )
    kwargs.update(overrides)
    return DeepEModel(ModelConfig(**kwargs), n_entities=9, n_relations=2)


class TestConfigValidation:
    def test_zero_feature_blocks_rejected(self):
        with pytest.raises(ValueError, match="2d -> d"):
            ModelConfig(dim=4, n_deepe_blocks=0)

    def test_more_than_two_project_blocks_rejected(self):
        with pytest.raises(ValueError, match="0, 1 or 2"):
            ModelConfig(dim=4, n_resnet_blocks=3)

    def test_bad_dropout_rejected(self):
        with pytest.raises(ValueError):
            ModelConfig(dim=4, dropout=DropoutSpec(p_fc=1.0))

    def test_roundtrips_through_dict(self):
        config = ModelConfig(dim=8, n_deepe_blocks=3, dropout=DropoutSpec(p_fc=0.4))
        assert ModelConfig.from_dict(config.to_dict()) == config


class TestFeatureForward:
    def test_single_block_with_dead_nonlinear_branch(self):
        """All weights zero: v is exactly Ws applied to the normalized (h || r)."""
        model = tiny_model(n_deepe_blocks=1, n_resnet_blocks=0)
        block = model.feature_blocks[0]
        block.fc1.weight.fill(0)
        block.fc1.bias.fill(0)
        block.fc2.weight.fill(0)
        block.fc2.bias.fill(0)
        heads = np.array([0, 1, 2])
        rels = np.array([0, 1, 2])
        v = model.feature_forward(heads, rels, "eval")
        x = np.concatenate(
            [model.entity_emb[heads], model.relation_emb[rels]], axis=1
        )
        bn = model.input_bn
        xhat = bn.gamma * (x - bn.running_mean) / np.sqrt(bn.running_var + bn.eps) + bn.beta
        expected = xhat @ block.ws.weight.T + block.ws.bias
        npt.assert_allclose(v, expected, atol=1e-12)

    def test_matches_layer_composition(self):
        model = tiny_model(seed=5)
        heads = np.array([3, 1, 4])
        rels = np.array([2, 0, 1])
        v = model.feature_forward(heads, rels, "eval")
        x = np.concatenate([model.entity_emb[heads], model.relation_emb[rels]], axis=1)
        h = model.input_bn.forward(x, "eval")
        for block in model.feature_blocks:
            h = block.forward(h, "eval")
        npt.assert_allclose(v, h, atol=1e-12)

    def test_id_out_of_range(self):
        model = tiny_model()
        with pytest.raises(ValueError, match="entity id out of range"):
            model.feature_forward(np.array([99]), np.array([0]), "eval")
        with pytest.raises(ValueError, match="relation id out of range"):
            model.feature_forward(np.array([0]), np.array([4]), "eval")


class TestProjectForward:
    def test_zero_blocks_returns_entity_table_unchanged(self):
        model = tiny_model(n_resnet_blocks=0)
        out = model.project_forward("eval")
        assert out is model.entity_emb

    def test_single_zeroed_block_is_relu_of_table(self):
        model = tiny_model(n_resnet_blocks=1)
        for fc in model.project_blocks[0].fcs:
            fc.weight.fill(0)
            fc.bias.fill(0)
        out = model.project_forward("eval")
        npt.assert_array_equal(out, np.maximum(model.entity_emb, 0))

    def test_matches_layer_composition(self):
        model = tiny_model(seed=6, n_resnet_blocks=2)
        out = model.project_forward("eval")
        h = model.entity_emb
        for block in model.project_blocks:
            h = block.forward(h, "eval")
        npt.assert_allclose(out, h, atol=1e-12)


class TestScoreAll:
    def test_hand_set_dot_products(self):
        model = tiny_model(n_deepe_blocks=1, n_resnet_blocks=0, dim=2)
        scores = model.score_all(np.array([0]), np.array([0]), "eval")
        v = model._v
        expected = v @ model.entity_emb.T
        npt.assert_allclose(scores, expected, atol=1e-12)

    def test_orthogonal_vectors_score_zero(self):
        model = tiny_model(n_resnet_blocks=0)
        model.entity_emb.fill(0)
        scores = model.score_all(np.array([0, 1]), np.array([0, 1]), "eval")
        npt.assert_array_equal(scores, np.zeros((2, model.n_entities)))

    @pytest.mark.parametrize("precision,tol", [(64, 1e-10), (32, 1e-4)])
    def test_matches_per_entity_loop(self, precision, tol):
        model = tiny_model(seed=7, precision=precision)
        heads = np.array([0, 2, 5])
        rels = np.array([1, 3, 0])
        scores = model.score_all(heads, rels, "eval")
        v = model._v
        tprime = model._tprime
        for b in range(len(heads)):
            for e in range(model.n_entities):
                loop = float(np.dot(v[b].astype(np.float64), tprime[e].astype(np.float64)))
                assert abs(scores[b, e] - loop) < tol


class TestBackward:
    def test_zero_upstream_zero_grads(self):
        model = tiny_model(seed=8)
        scores = model.score_all(np.array([0, 1]), np.array([0, 1]), "train")
        model.zero_grad()
        model.backward(np.zeros_like(scores))
        for _, _, grad in model.named_parameters():
            assert not grad.any()

    def test_duplicate_triples_double_embedding_grads(self):
        base = tiny_model(seed=9, n_resnet_blocks=0)
        dup = tiny_model(seed=9, n_resnet_blocks=0)

        one = np.array([2])
        two = np.array([2, 2])
        rel = np.array([1])
        rel2 = np.array([1, 1])

        scores = base.score_all(one, rel, "eval")
        upstream = np.ones_like(scores)
        base.zero_grad()
        base.backward(upstream)

        scores2 = dup.score_all(two, rel2, "eval")
        dup.zero_grad()
        dup.backward(np.ones_like(scores2))

        # the head-row gradient through the feature path doubles; the project
        # path contribution also doubles since both rows carry the same dv
        npt.assert_allclose(dup.entity_grad, 2 * base.entity_grad, atol=1e-12)
        npt.assert_allclose(dup.relation_grad, 2 * base.relation_grad, atol=1e-12)

    def test_full_model_finite_differences(self):
        errors = check_full_model(seed=7, precision=64)
        assert max(errors.values()) < 1e-5

    def test_backward_before_forward_is_an_error(self):
        model = tiny_model()
        with pytest.raises(RuntimeError, match="before"):
            model.backward(np.zeros((1, model.n_entities)))


class TestDeterminismAndGates:
    def test_eval_forward_is_bit_deterministic(self):
        model = tiny_model(seed=10)
        heads = np.array([0, 1, 2, 3])
        rels = np.array([0, 1, 2, 3])
        a = model.score_all(heads, rels, "eval")
        b = model.score_all(heads, rels, "eval")
        assert a.tobytes() == b.tobytes()

    def test_same_seed_same_model(self):
        a = tiny_model(seed=11)
        b = tiny_model(seed=11)
        for (name_a, pa, _), (name_b, pb, _) in zip(a.named_parameters(), b.named_parameters()):
            assert name_a == name_b
            npt.assert_array_equal(pa, pb)

    def test_gates_off_makes_feature_network_affine(self):
        model = tiny_model(seed=12, gate_nonlinear=False, n_deepe_blocks=3)
        rng = Rng(13)
        x0 = rng.child(0).normal(size=(2, 8), dtype=np.float64)

        def f(x):
            return model.feature_stack_forward(x, "eval")

        base = f(x0)
        for trial in range(4):
            d1 = rng.child(20 + trial).normal(size=x0.shape, dtype=np.float64)
            d2 = rng.child(30 + trial).normal(size=x0.shape, dtype=np.float64)
            lhs = f(x0 + 0.3 * d1 + 2.0 * d2) - base
            rhs = 0.3 * (f(x0 + d1) - base) + 2.0 * (f(x0 + d2) - base)
            npt.assert_allclose(lhs, rhs, atol=1e-8)


class TestParameterAudit:
    def test_enumeration_matches_closed_form(self):
        for kwargs in (
            dict(dim=4, n_deepe_blocks=1, n_resnet_blocks=0),
            dict(dim=4, n_deepe_blocks=3, n_resnet_blocks=2, resnet_inner_layers=3),
            dict(dim=6, n_deepe_blocks=2, n_resnet_blocks=1, feature_block_kind="resnet"),
        ):
            audit = tiny_model(**kwargs).parameter_count_audit()
            assert audit["total"] == audit["closed_form"]
            assert audit["total"] == audit["embedding_params"] + audit["block_params"]

    def test_block_params_scale_quadratically_with_dim(self):
        small = tiny_model(dim=8).parameter_count_audit()
        big = tiny_model(dim=16).parameter_count_audit()
        ratio = big["block_params"] / small["block_params"]
        assert 3.2 < ratio < 4.2

    def test_benchmark_scale_arithmetic(self):
        """d=300, 40 blocks, |E|=14541, |R|=237: embeddings vs k d^2 block term."""
        config = ModelConfig(dim=300, n_deepe_blocks=40, n_resnet_blocks=1, seed=0)
        d, k = 300, 40
        embedding_term = 14541 * d + 2 * 237 * d
        weight_term = 2 * k * d * d
        assert embedding_term == 4504500
        assert weight_term == 7200000
        # at this scale the block weights actually dominate the entity table;
        # verify the audit's closed form contains both terms exactly
        model = DeepEModel(
            ModelConfig(dim=4, n_deepe_blocks=2, n_resnet_blocks=1, seed=0),
            n_entities=20, n_relations=3,
        )
        audit = model.parameter_count_audit()
        assert audit["embedding_params"] == 20 * 4 + 2 * 3 * 4
