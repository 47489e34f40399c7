import numpy as np
from django.test import SimpleTestCase

from ..exceptions import ConfigurationError, ContractError, InputTooShortError
from ..services.parameters import ModelParams
from ..services.tensor_engine import Tensor, grad_check, mul, sum_
from ..services.patching import (
    PatchEmbedding,
    PatchSpec,
    build_masked_batch,
    full_tokens,
    make_mask_plan,
    patch_embed,
    positions_at_hierarchy,
    segment_series,
    split_visible_masked,
    targets_at_hierarchy,
)


class PatchSpecTest(SimpleTestCase):
    def test_default_geometry(self):
        """P=24, S=24, SP=6 on a 512-step window: 21 coarse, 84 fine tokens, 3 hierarchies"""
        spec = PatchSpec()
        self.assertEqual(spec.n_coarse(512), 21)
        self.assertEqual(spec.n_fine(512), 84)
        self.assertEqual(spec.n_sub, 4)
        self.assertEqual(spec.hierarchies, 3)
        self.assertEqual([spec.segment_len(level) for level in (1, 2, 3)], [6, 12, 24])

    def test_sub_patch_must_tile(self):
        with self.assertRaises(ConfigurationError):
            PatchSpec(24, 24, 5)

    def test_sub_patch_count_must_be_power_of_two(self):
        with self.assertRaises(ConfigurationError):
            PatchSpec(24, 24, 8)

    def test_window_shorter_than_patch(self):
        with self.assertRaisesMessage(InputTooShortError, 'Lb=20'):
            PatchSpec().n_coarse(20)


class SegmentTest(SimpleTestCase):
    def test_fine_tokens_reconstruct_the_covered_window(self):
        spec = PatchSpec()
        window = np.random.default_rng(0).normal(size=512)
        patches = segment_series(window, spec)
        self.assertEqual(patches.fine_tokens.shape, (84, 6))
        np.testing.assert_array_equal(patches.fine_tokens.reshape(-1), window[:504])
        np.testing.assert_array_equal(patches.coarse_of[:8], [0, 0, 0, 0, 1, 1, 1, 1])

    def test_overlapping_stride(self):
        spec = PatchSpec(8, 4, 4)
        patches = segment_series(np.arange(16.0), spec)
        self.assertEqual(patches.n_coarse, 3)
        np.testing.assert_array_equal(patches.fine_tokens[2], [4, 5, 6, 7])


class MaskPlanTest(SimpleTestCase):
    def test_mask_count_rounds_half_up(self):
        self.assertEqual(len(make_mask_plan(21, 0.5, seed=0).masked_indices), 11)
        self.assertEqual(len(make_mask_plan(20, 0.5, seed=0).masked_indices), 10)
        self.assertEqual(len(make_mask_plan(21, 0.1, seed=0).masked_indices), 2)

    def test_same_seed_same_plan(self):
        self.assertEqual(make_mask_plan(21, 0.5, 7), make_mask_plan(21, 0.5, 7))

    def test_each_patch_masked_with_equal_frequency(self):
        """Over 10000 seeds every coarse index is hidden about 11/21 of the time"""
        counts = np.zeros(21)
        trials = 10000
        for seed in range(trials):
            counts[list(make_mask_plan(21, 0.5, seed).masked_indices)] += 1
        np.testing.assert_allclose(counts / trials, 11 / 21, atol=0.02)

    def test_invalid_arguments(self):
        with self.assertRaises(ContractError):
            make_mask_plan(1, 0.5, 0)
        with self.assertRaises(ContractError):
            make_mask_plan(10, 1.5, 0)

    def test_visible_indices_complement(self):
        plan = make_mask_plan(21, 0.5, 3)
        self.assertEqual(sorted(plan.visible_indices + plan.masked_indices), list(range(21)))


class SplitTest(SimpleTestCase):
    def setUp(self):
        self.spec = PatchSpec()
        self.patches = segment_series(np.random.default_rng(1).normal(size=512), self.spec)
        self.plan = make_mask_plan(21, 0.5, seed=5)

    def test_masking_hides_whole_coarse_patches(self):
        visible, masked = split_visible_masked(self.patches, self.plan)
        self.assertEqual(len(masked), 44)
        self.assertEqual(len(visible), 40)
        runs = masked.positions.reshape(-1, 4)
        np.testing.assert_array_equal(runs % 4, np.tile(np.arange(4), (11, 1)))
        np.testing.assert_array_equal(runs[:, 0] // 4, self.plan.masked_indices)
        np.testing.assert_array_equal(np.sort(np.concatenate([visible.positions, masked.positions])), np.arange(84))

    def test_plan_size_mismatch(self):
        with self.assertRaises(ContractError):
            split_visible_masked(self.patches, make_mask_plan(20, 0.5, 0))

    def test_top_hierarchy_targets_are_the_masked_coarse_patches(self):
        coarse = self.patches.fine_tokens.reshape(21, 24)
        top = targets_at_hierarchy(self.patches, self.plan, 3)
        np.testing.assert_array_equal(top, coarse[list(self.plan.masked_indices)])
        self.assertEqual(targets_at_hierarchy(self.patches, self.plan, 1).shape, (44, 6))
        self.assertEqual(targets_at_hierarchy(self.patches, self.plan, 2).shape, (22, 12))

    def test_hierarchy_out_of_range(self):
        with self.assertRaises(ContractError):
            targets_at_hierarchy(self.patches, self.plan, 4)

    def test_positions_at_hierarchy(self):
        positions = np.array([8, 9, 10, 11, 20, 21, 22, 23])
        np.testing.assert_array_equal(positions_at_hierarchy(positions, 1), positions)
        np.testing.assert_array_equal(positions_at_hierarchy(positions, 2), [4, 5, 10, 11])
        np.testing.assert_array_equal(positions_at_hierarchy(positions, 3), [2, 5])


class MaskedBatchTest(SimpleTestCase):
    def test_shapes(self):
        spec = PatchSpec(8, 8, 2)
        windows = np.random.default_rng(2).normal(size=(3, 64))
        batch = build_masked_batch(windows, spec, 0.5, np.random.default_rng(0))
        self.assertEqual(batch.visible.shape, (3, 16, 2))
        self.assertEqual(batch.masked.shape, (3, 16, 2))
        self.assertEqual([t.shape for t in batch.targets], [(3, 16, 2), (3, 8, 4), (3, 4, 8)])
        self.assertEqual([s.shape for s in batch.slot_positions], [(3, 16), (3, 8), (3, 4)])
        self.assertEqual(len(batch.plans), 3)

    def test_full_tokens_positions(self):
        tokens, positions = full_tokens(np.zeros((2, 64)), PatchSpec(8, 8, 2))
        self.assertEqual(tokens.shape, (2, 32, 2))
        np.testing.assert_array_equal(positions[1], np.arange(32))


class PatchEmbeddingTest(SimpleTestCase):
    def setUp(self):
        self.params = ModelParams()
        self.embed = PatchEmbedding(self.params, PatchSpec(8, 8, 2), 4, 32, np.random.default_rng(0))

    def test_output_shape(self):
        tokens, positions = full_tokens(np.ones((2, 64)), PatchSpec(8, 8, 2))
        self.assertEqual(self.embed(tokens, positions).shape, (2, 32, 4))

    def test_position_outside_table(self):
        with self.assertRaises(ConfigurationError):
            self.embed(np.ones((1, 2, 2)), np.array([[0, 32]]))

    def test_token_length_mismatch(self):
        with self.assertRaises(ConfigurationError):
            self.embed(np.ones((1, 2, 3)), np.array([[0, 1]]))


class MergeTreeTest(SimpleTestCase):
    def test_child_segments_concatenate_to_the_parent(self):
        """Rows 2j and 2j+1 of the level-l target, joined, equal row j of level l+1"""
        spec = PatchSpec()
        window = np.random.default_rng(3).normal(size=512)
        patches = segment_series(window, spec)
        plan = make_mask_plan(patches.n_coarse, 0.5, seed=7)
        for level in range(1, spec.hierarchies):
            child = targets_at_hierarchy(patches, plan, level)
            parent = targets_at_hierarchy(patches, plan, level + 1)
            np.testing.assert_array_equal(child.reshape(len(parent), -1), parent)
            np.testing.assert_array_equal(np.concatenate([child[2], child[3]]), parent[1])


class PatchEmbedTest(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(11)
        self.tokens = rng.normal(size=(2, 8, 4))
        self.positions = np.tile(np.arange(8), (2, 1))
        self.weight = Tensor(rng.normal(size=(4, 6)), requires_grad=True, name='conv.weight')
        self.bias = Tensor(rng.normal(size=6), requires_grad=True, name='conv.bias')
        self.w_pos = Tensor(rng.normal(size=(10, 6)), requires_grad=True, name='pos')

    def test_zero_kernel_returns_positional_rows(self):
        z0 = patch_embed(self.tokens, self.positions, Tensor(np.zeros((4, 6))), Tensor(np.zeros(6)), self.w_pos)
        np.testing.assert_array_equal(z0.data, self.w_pos.data[self.positions])

    def test_permuting_tokens_with_their_positions_permutes_the_output(self):
        order = np.random.default_rng(12).permutation(8)
        base = patch_embed(self.tokens, self.positions, self.weight, self.bias, self.w_pos).data
        shuffled = patch_embed(
            self.tokens[:, order], self.positions[:, order], self.weight, self.bias, self.w_pos
        ).data
        np.testing.assert_allclose(shuffled, base[:, order], atol=1e-12)

    def test_gradients_match_finite_differences(self):
        readout = Tensor(np.random.default_rng(13).uniform(-1, 1, size=(2, 8, 6)))
        result = grad_check(
            lambda p: sum_(mul(patch_embed(self.tokens, self.positions, p[0], p[1], p[2]), readout)),
            [self.weight, self.bias, self.w_pos],
        )
        self.assertLess(result.max_rel_error, 1e-4)
        self.assertEqual(result.detached, [])

    def test_registered_embedding_is_differentiable(self):
        params = ModelParams()
        embed = PatchEmbedding(params, PatchSpec(8, 8, 4), 6, 12, np.random.default_rng(0))
        params['embed.pos'].data[...] = np.random.default_rng(14).normal(size=(12, 6))
        tokens = np.random.default_rng(15).normal(size=(1, 4, 4))
        positions = np.array([[0, 1, 4, 5]])
        readout = Tensor(np.random.default_rng(16).uniform(-1, 1, size=(1, 4, 6)))
        names = ['embed.conv.weight', 'embed.conv.bias', 'embed.pos']
        result = grad_check(
            lambda p: sum_(mul(patch_embed(tokens, positions, *p), readout)),
            [params[name] for name in names],
        )
        self.assertLess(result.max_rel_error, 1e-4)
        self.assertEqual(embed(tokens, positions).shape, (1, 4, 6))
