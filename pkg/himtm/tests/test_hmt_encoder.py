import numpy as np
from django.test import SimpleTestCase

from ..exceptions import ConfigurationError, ContractError
from ..services.hmt_encoder import (
    AttentionWeights,
    EncoderConfig,
    HierarchicalEncoder,
    MultiHeadAttention,
    TransformerBlock,
    attention,
    encode,
    merge,
)
from ..services.parameters import ModelParams
from ..services.tensor_engine import Tensor


class EncoderConfigTest(SimpleTestCase):
    def test_heads_must_divide_width(self):
        with self.assertRaisesMessage(ConfigurationError, 'not divisible'):
            EncoderConfig(d_model=10, heads=4)

    def test_empty_hierarchy(self):
        with self.assertRaises(ConfigurationError):
            EncoderConfig(layers_per_hierarchy=(2, 0))


class MergeTest(SimpleTestCase):
    def test_pairs_are_concatenated_then_projected(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(2, 6, 3))
        weight = rng.normal(size=(6, 3))
        bias = rng.normal(size=3)
        out = merge(Tensor(z), Tensor(weight), Tensor(bias)).data
        self.assertEqual(out.shape, (2, 3, 3))
        expected = np.concatenate([z[1, 4], z[1, 5]]) @ weight + bias
        np.testing.assert_allclose(out[1, 2], expected, atol=1e-12)

    def test_odd_token_count(self):
        with self.assertRaises(ContractError):
            merge(Tensor(np.ones((1, 5, 3))), Tensor(np.ones((6, 3))), Tensor(np.zeros(3)))


class AttentionTest(SimpleTestCase):
    def test_trace_rows_are_distributions(self):
        params = ModelParams()
        attn = MultiHeadAttention(params, 'attn', 8, 2, np.random.default_rng(1))
        trace = []
        out = attn(Tensor(np.random.default_rng(2).normal(size=(3, 5, 8))), Tensor(np.ones((3, 7, 8))), trace=trace)
        self.assertEqual(out.shape, (3, 5, 8))
        self.assertEqual(trace[0].shape, (3, 2, 5, 7))
        np.testing.assert_allclose(trace[0].sum(axis=-1), 1.0, atol=1e-12)

    def test_unbatched_inputs(self):
        params = ModelParams()
        attn = MultiHeadAttention(params, 'attn', 4, 2, np.random.default_rng(1))
        self.assertEqual(attn(Tensor(np.ones((3, 4))), Tensor(np.ones((6, 4)))).shape, (3, 4))


class HierarchicalEncoderTest(SimpleTestCase):
    def build(self, config):
        params = ModelParams()
        return HierarchicalEncoder(params, config, np.random.default_rng(0)), params

    def test_default_sized_output_shapes(self):
        """84 fine tokens at d=128 over three hierarchies give 84, 42 and 21 tokens"""
        encoder, _ = self.build(EncoderConfig())
        z0 = Tensor(np.random.default_rng(3).normal(size=(1, 84, 128)))
        features = encoder(z0)
        self.assertEqual(features.shapes, [(1, 84, 128), (1, 42, 128), (1, 21, 128)])
        self.assertEqual(HierarchicalEncoder.token_counts(84, 3), [84, 42, 21])

    def test_registers_merges_between_hierarchies(self):
        _, params = self.build(EncoderConfig((1, 2), heads=2, d_model=8, d_ff=16))
        self.assertIn('encoder.h1.merge.weight', params)
        self.assertNotIn('encoder.h2.merge.weight', params)
        self.assertIn('encoder.h2.layer1.ffn.w1', params)
        self.assertEqual(params['encoder.h1.merge.weight'].shape, (16, 8))

    def test_token_count_not_divisible(self):
        encoder, _ = self.build(EncoderConfig((1, 1, 1), heads=2, d_model=8, d_ff=16))
        with self.assertRaises(ContractError):
            encoder(Tensor(np.ones((1, 6, 8))))

    def test_eval_is_deterministic(self):
        encoder, _ = self.build(EncoderConfig((1, 1), heads=2, d_model=8, d_ff=16, dropout=0.3))
        z0 = Tensor(np.random.default_rng(4).normal(size=(2, 8, 8)))
        first = encoder(z0, 'eval')
        second = encoder(z0, 'eval')
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.data, b.data)

    def test_train_dropout_draws_from_the_generator(self):
        encoder, _ = self.build(EncoderConfig((1, 1), heads=2, d_model=8, d_ff=16, dropout=0.3))
        z0 = Tensor(np.random.default_rng(4).normal(size=(2, 8, 8)))
        a = encoder(z0, 'train', np.random.default_rng(0))[1].data
        b = encoder(z0, 'train', np.random.default_rng(0))[1].data
        c = encoder(z0, 'train', np.random.default_rng(1))[1].data
        np.testing.assert_array_equal(a, b)
        self.assertFalse(np.allclose(a, c))

    def test_trace_collects_every_layer(self):
        encoder, _ = self.build(EncoderConfig((2, 1), heads=2, d_model=8, d_ff=16))
        trace = []
        encoder(Tensor(np.ones((1, 4, 8))), trace=trace)
        self.assertEqual([t.shape for t in trace], [(1, 2, 4, 4), (1, 2, 4, 4), (1, 2, 2, 2)])


def _random_weights(d, seed=0):
    rng = np.random.default_rng(seed)
    return AttentionWeights(*(Tensor(rng.normal(size=(d, d))) for _ in range(4)), Tensor(rng.normal(size=d)))


class AttentionOracleTest(SimpleTestCase):
    def test_single_key_returns_the_projected_value(self):
        """Softmax over one key is 1, so every query gets V W_V W_O + b_O"""
        weights = _random_weights(4)
        rng = np.random.default_rng(1)
        query = rng.normal(size=(2, 3, 4))
        value = rng.normal(size=(2, 1, 4))
        out = attention(Tensor(query), Tensor(value), weights, heads=2).data
        expected = value @ weights.w_v.data @ weights.w_o.data + weights.b_o.data
        np.testing.assert_allclose(out, np.broadcast_to(expected, (2, 3, 4)), atol=1e-12)

    def test_duplicating_every_key_leaves_the_output_unchanged(self):
        weights = _random_weights(6, seed=2)
        rng = np.random.default_rng(3)
        query = Tensor(rng.normal(size=(1, 4, 6)))
        keys = rng.normal(size=(1, 3, 6))
        once = attention(query, Tensor(keys), weights, heads=3).data
        twice = attention(query, Tensor(np.repeat(keys, 2, axis=1)), weights, heads=3).data
        np.testing.assert_allclose(twice, once, atol=1e-12)

    def test_identical_keys_average_to_that_value(self):
        weights = _random_weights(4, seed=4)
        row = np.random.default_rng(5).normal(size=(1, 1, 4))
        many = attention(Tensor(np.ones((1, 2, 4))), Tensor(np.repeat(row, 5, axis=1)), weights, heads=2).data
        single = attention(Tensor(np.ones((1, 2, 4))), Tensor(row), weights, heads=2).data
        np.testing.assert_allclose(many, single, atol=1e-12)


class TransformerBlockOracleTest(SimpleTestCase):
    def test_zero_weights_in_eval_reduce_to_normalised_residual(self):
        """With every projection zero both residual branches vanish; two fresh eval BatchNorms scale by 1/(1+eps)"""
        config = EncoderConfig((1,), heads=2, d_model=4, d_ff=8, dropout=0.0)
        params = ModelParams()
        block = TransformerBlock(params, 'block', config, np.random.default_rng(0))
        for name, tensor in params.params.items():
            if '.attn.' in name or '.ffn.' in name:
                tensor.data[...] = 0.0
        x = np.random.default_rng(6).normal(size=(2, 3, 4))
        out = block(Tensor(x), 'eval').data
        np.testing.assert_allclose(out, x / (1.0 + 1e-5), rtol=1e-12)


class MergeOracleTest(SimpleTestCase):
    def test_identity_left_half_selects_even_tokens(self):
        d = 3
        z = np.random.default_rng(7).normal(size=(2, 8, d))
        weight = np.vstack([np.eye(d), np.zeros((d, d))])
        out = merge(Tensor(z), Tensor(weight), Tensor(np.zeros(d))).data
        np.testing.assert_array_equal(out, z[:, ::2])

    def test_output_row_depends_only_on_its_pair(self):
        rng = np.random.default_rng(8)
        z = rng.normal(size=(1, 8, 3))
        weight, bias = Tensor(rng.normal(size=(6, 3))), Tensor(rng.normal(size=3))
        base = merge(Tensor(z), weight, bias).data
        changed = z.copy()
        changed[0, 5] += 1.0
        out = merge(Tensor(changed), weight, bias).data
        self.assertFalse(np.allclose(out[0, 2], base[0, 2]))
        np.testing.assert_array_equal(np.delete(out, 2, axis=1), np.delete(base, 2, axis=1))

    def test_pair_permutation_permutes_the_output(self):
        rng = np.random.default_rng(9)
        z = rng.normal(size=(1, 8, 3))
        weight, bias = Tensor(rng.normal(size=(6, 3))), Tensor(rng.normal(size=3))
        order = np.array([2, 0, 3, 1])
        permuted = z.reshape(1, 4, 2, 3)[:, order].reshape(1, 8, 3)
        np.testing.assert_allclose(
            merge(Tensor(permuted), weight, bias).data, merge(Tensor(z), weight, bias).data[:, order], atol=1e-12
        )


class EncodeShapeTest(SimpleTestCase):
    def test_half_length_window_shapes(self):
        """44 fine tokens (11 coarse patches of 4) give 44, 22 and 11 tokens at d=128"""
        config = EncoderConfig((1, 1, 1))
        params = ModelParams()
        HierarchicalEncoder(params, config, np.random.default_rng(0))
        z0 = Tensor(np.random.default_rng(10).normal(size=(1, 44, 128)))
        features = encode(z0, config, params)
        self.assertEqual(features.shapes, [(1, 44, 128), (1, 22, 128), (1, 11, 128)])
