import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vimsvp import numerics as nx
from vimsvp.errors import ContractError, DimensionError
from vimsvp.numerics import Tape, Tensor, backward
from vimsvp.svp import (
    POSITIONS,
    AppendedPrompts,
    SvpConfig,
    SvpModule,
    append_order,
    assign_layer_groups,
    baseline_append_prompts,
    insertion_points,
    svp_parameter_count,
)
from vimsvp.vim import VimConfig, VimModel, count_parameters


def randomize(svp, rng, scale=0.3):
    for e in svp.registry:
        e.tensor.data[...] = rng.standard_normal(e.shape) * scale


def loop_overlay(x, svp, j, cls_index):
    """Row-by-row oracle of the prompted layer input."""
    cross, inner, s = svp.cross(j), svp.inner(j), svp.scales(j)
    out = x.copy()
    for t in range(x.shape[0]):
        if t == cls_index:
            continue
        pc = cross.weight.data @ x[t] + cross.bias.data
        hid = inner.down_weight.data @ x[t] + inner.down_bias.data
        pre = inner.up_weight.data @ hid + inner.up_bias.data
        pi = pre / (1.0 + np.exp(-pre))
        out[t] = x[t] + s.alpha.data * pc + s.beta.data * pi
    return out


@pytest.fixture
def svp(rng):
    m = SvpModule(6, 5, SvpConfig(hidden_dim=3, share_group=2), seed=1)
    randomize(m, rng)
    return m


class TestOverlay:
    def test_matches_loop_oracle(self, svp, rng):
        x = rng.standard_normal((7, 6))
        for j in range(5):
            np.testing.assert_allclose(svp.overlay(j, Tensor(x), 3).data, loop_overlay(x, svp, j, 3), atol=1e-12)

    def test_token_locality(self, svp, rng):
        x = rng.standard_normal((7, 6))
        base = svp.overlay(0, Tensor(x), None).data
        x2 = x.copy()
        x2[4] += 1.0
        moved = svp.overlay(0, Tensor(x2), None).data
        changed = np.abs(moved - base).sum(axis=1) > 0
        assert changed.tolist() == [False] * 4 + [True] + [False] * 2

    def test_class_row_untouched(self, svp, rng):
        x = rng.standard_normal((2, 7, 6))
        out = svp.overlay(1, Tensor(x), 3).data
        np.testing.assert_array_equal(out[:, 3], x[:, 3])
        assert not np.allclose(out[:, 2], x[:, 2])

    def test_batched_matches_single(self, svp, rng):
        x = rng.standard_normal((3, 7, 6))
        out = svp.overlay(2, Tensor(x), 3).data
        for b in range(3):
            np.testing.assert_allclose(out[b], loop_overlay(x[b], svp, 2, 3), atol=1e-12)

    def test_fresh_module_is_exact_noop(self, rng):
        m = SvpModule(6, 4, SvpConfig(hidden_dim=3, share_group=2))
        x = rng.standard_normal((5, 6))
        for j in range(4):
            np.testing.assert_array_equal(m.overlay(j, Tensor(x), 2).data, x)

    def test_disabled_is_identity(self, svp, rng):
        svp.config.enabled = False
        x = Tensor(rng.standard_normal((5, 6)))
        assert svp.overlay(0, x, None) is x

    def test_shape_mismatch(self, svp):
        from vimsvp.svp import combine_and_overlay, cross_prompt
        x = Tensor(np.zeros((4, 6)))
        with pytest.raises(DimensionError):
            combine_and_overlay(x, cross_prompt(x, svp.cross(0)), Tensor(np.zeros((3, 6))), svp.scales(0))

    def test_zero_init_scales_still_get_gradient(self, rng):
        m = SvpModule(6, 2, SvpConfig(hidden_dim=3, share_group=2))
        x = Tensor(rng.standard_normal((5, 6)))
        r = rng.standard_normal((5, 6))
        for e in m.registry:
            e.tensor.requires_grad = True
        with Tape() as tape:
            loss = nx.sum(nx.mul(m.overlay(0, x, 2), r))
        backward(loss, tape)
        assert np.abs(m.scales(0).alpha.grad).sum() > 0
        assert np.abs(m.scales(0).beta.grad).sum() > 0
        # prompter weights see no gradient while both scales are still zero
        assert m.cross(0).weight.grad is None or not m.cross(0).weight.grad.any()


class TestSharing:
    def test_contiguous_groups(self):
        assert assign_layer_groups(24, 8) == [list(range(0, 8)), list(range(8, 16)), list(range(16, 24))]
        assert assign_layer_groups(5, 2) == [[0, 1], [2, 3], [4]]

    def test_oversized_group_warns(self):
        with pytest.warns(UserWarning):
            groups = assign_layer_groups(3, 8)
        assert groups == [[0, 1, 2]]

    def test_group_members_share_tensor(self, svp):
        assert svp.cross(0).weight is svp.cross(1).weight
        assert svp.cross(1).weight is not svp.cross(2).weight
        assert svp.inner(0).down_weight is not svp.inner(1).down_weight

    def test_one_group_per_layer(self):
        m = SvpModule(4, 3, SvpConfig(hidden_dim=2, share_group=1))
        assert len({id(m.cross(j).weight) for j in range(3)}) == 3

    def test_bad_config(self):
        with pytest.raises(ContractError):
            SvpConfig(share_group=0)
        with pytest.raises(ContractError):
            SvpConfig(hidden_dim=0)


class TestCounts:
    @given(st.integers(1, 30), st.integers(1, 40), st.integers(1, 12), st.integers(1, 10))
    @settings(max_examples=60, deadline=None)
    def test_formula_matches_registry(self, N, d, r, g):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            m = SvpModule(d, N, SvpConfig(hidden_dim=r, share_group=g), allocate=False)
            formula = svp_parameter_count(d, N, r, g)
        expected = N * (2 * d * r + r + d) + math.ceil(N / min(g, N)) * (d * d + d) + 2 * d * N
        assert count_parameters(m.registry) == formula == expected

    def test_desk_configuration(self):
        # 8 layers, width 96, bottleneck 64, groups of 4
        assert svp_parameter_count(96, 8, 64, 4) == 119_744

    def test_shape_only_registry(self):
        m = SvpModule(192, 24, SvpConfig(hidden_dim=16, share_group=4), allocate=False)
        assert all(e.tensor is None for e in m.registry)
        assert all(e.tag == "svp" for e in m.registry)


class TestModelIntegration:
    def test_untrained_svp_leaves_logits_bitwise(self, small_config, rng):
        model = VimModel(small_config, seed=2)
        svp = SvpModule.for_model(model, SvpConfig(hidden_dim=4, share_group=1))
        imgs = rng.standard_normal((2, 16, 16, 3))
        np.testing.assert_array_equal(model(imgs, svp=svp).data, model(imgs).data)

    def test_trained_svp_changes_logits(self, small_config, rng):
        model = VimModel(small_config, seed=2)
        svp = SvpModule.for_model(model, SvpConfig(hidden_dim=4, share_group=1))
        randomize(svp, rng, 0.1)
        imgs = rng.standard_normal((2, 16, 16, 3))
        assert not np.allclose(model(imgs, svp=svp).data, model(imgs).data)


class TestBaselinePositions:
    @pytest.mark.parametrize("position,expected", [
        ("pre", [0, 0, 0]),
        ("post", [8, 8, 8]),
        ("both", [0, 0, 8]),
        ("uniform", [2, 4, 6]),
        ("middle", [4, 4, 4]),
    ])
    def test_insertion_points(self, position, expected):
        assert insertion_points(8, 3, position) == expected

    def test_unknown_position(self):
        with pytest.raises(ContractError):
            insertion_points(8, 2, "random")

    @pytest.mark.parametrize("position", POSITIONS)
    def test_order_is_permutation(self, position):
        order = append_order(9, 4, position)
        assert sorted(order.tolist()) == list(range(13))
        tokens = [i for i in order if i < 9]
        assert tokens == list(range(9))

    @pytest.mark.parametrize("position", POSITIONS)
    def test_multiset_of_rows_preserved(self, position, rng):
        tokens = Tensor(rng.standard_normal((2, 9, 4)))
        prompts = Tensor(rng.standard_normal((3, 4)))
        seq, ci = baseline_append_prompts(tokens, prompts, position, cls_index=4)
        assert seq.shape == (2, 12, 4)
        np.testing.assert_array_equal(seq.data[:, ci], tokens.data[:, 4])
        rows = sorted(map(tuple, seq.data[0]))
        ref = sorted(map(tuple, np.concatenate([tokens.data[0], prompts.data])))
        assert rows == ref

    def test_pre_layout(self, rng):
        tokens = Tensor(rng.standard_normal((5, 2)))
        prompts = Tensor(rng.standard_normal((2, 2)))
        seq, ci = baseline_append_prompts(tokens, prompts, "pre", cls_index=2)
        np.testing.assert_array_equal(seq.data[:2], prompts.data)
        np.testing.assert_array_equal(seq.data[2:], tokens.data)
        assert ci == 4

    def test_appended_module(self, small_config, rng):
        model = VimModel(small_config, seed=2)
        prompts = AppendedPrompts(small_config.d_model, num_prompts=3, position="uniform", seed=4)
        assert count_parameters(prompts.registry, "prompt") == 3 * small_config.d_model
        traces = []
        model.features(rng.standard_normal((1, 16, 16, 3)), prompts=prompts, traces=traces)
        assert traces[0]["fwd"][0].length == small_config.n_tokens + 1 + 3
        assert model.last_class_index != model.class_index

    def test_every_position_gives_distinct_logits(self, small_config, rng):
        model = VimModel(small_config, seed=2)
        img = rng.standard_normal((1, 16, 16, 3))
        outs = []
        for pos in POSITIONS:
            prompts = AppendedPrompts(small_config.d_model, num_prompts=2, position=pos, seed=4)
            outs.append(model(img, prompts=prompts).data)
        for a in range(len(outs)):
            for b in range(a + 1, len(outs)):
                assert not np.allclose(outs[a], outs[b])
