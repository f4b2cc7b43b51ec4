"""
Тесты блоков энкодера: PatchEmbed, LFE, GFE и их проверки градиентов.
"""

import numpy as np
import pytest

from src.core import functional as F
from src.core.gradcheck import run_check
from src.core.tensor import Tensor
from src.domain.errors import DimensionError
from src.nn.blocks import GFEBlock, LFEBlock, PatchEmbed, gfe_forward, lfe_forward, patch_embed
from src.nn.module import ParamInit


class TestPatchEmbed:

    def test_stem_stride_four(self, rng):
        embed = PatchEmbed(3, 64, 4, ParamInit(0))
        out = patch_embed(Tensor(rng.random((1, 3, 224, 224))), embed)
        assert out.shape == (1, 64, 56, 56)

    def test_stage_stride_two(self, rng):
        embed = PatchEmbed(64, 128, 2, ParamInit(0))
        out = patch_embed(Tensor(rng.standard_normal((1, 64, 56, 56))), embed)
        assert out.shape == (1, 128, 28, 28)

    def test_output_is_channel_normalized(self, rng):
        out = PatchEmbed(3, 8, 4, ParamInit(0))(Tensor(rng.random((2, 3, 16, 16))))
        np.testing.assert_allclose(out.data.mean(axis=1), 0.0, atol=1e-9)

    def test_indivisible_extent(self, rng):
        with pytest.raises(DimensionError):
            PatchEmbed(3, 8, 4, ParamInit(0))(Tensor(rng.random((1, 3, 10, 10))))


class TestLFEBlock:

    def test_shape_preserved(self, rng):
        block = LFEBlock(32, ParamInit(0))
        assert lfe_forward(Tensor(rng.standard_normal((2, 32, 14, 14))), block).shape == (2, 32, 14, 14)

    def test_zero_positional_kernel_is_identity(self, rng):
        block = LFEBlock(8, ParamInit(0))
        block.pos.weight.data[...] = 0.0
        x = Tensor(rng.standard_normal((1, 8, 6, 6)))
        np.testing.assert_array_equal((block.pos(x) + x).data, x.data)

    def test_eval_mode_uses_running_stats(self, rng):
        block = LFEBlock(8, ParamInit(0))
        x = Tensor(rng.standard_normal((2, 8, 6, 6)) + 3.0)
        train_out = lfe_forward(x, block, training=True)
        eval_out = lfe_forward(x, block, training=False)
        assert not block.training
        assert not np.allclose(train_out.data, eval_out.data)

    def test_parameter_layout(self):
        names = dict(LFEBlock(8, ParamInit(0)).named_parameters())
        assert names["pos.weight"].shape == (8, 1, 3, 3)
        assert names["dw.weight"].shape == (8, 1, 5, 5)
        assert names["pw1.weight"].shape == (8, 8, 1, 1)
        assert names["ffn.fc1.weight"].shape == (32, 8, 1, 1)


class TestGFEBlock:

    def test_shape_preserved(self, rng):
        block = GFEBlock(64, 16, [3, 5, 7, 9], ParamInit(0))
        assert gfe_forward(Tensor(rng.standard_normal((1, 49, 64))), block).shape == (1, 49, 64)

    def test_zero_branches_leave_residual_path(self, rng):
        block = GFEBlock(16, 4, [3, 5, 7, 9], ParamInit(0))
        block.msla.fusion.weight.data[...] = 0.0
        block.ffn.fc2.weight.data[...] = 0.0
        x = Tensor(rng.standard_normal((1, 16, 16)))
        expected = F.map_to_tokens(block.pos(F.tokens_to_map(x))) + x
        np.testing.assert_allclose(block(x).data, expected.data, atol=1e-12)

    def test_non_square_tokens(self, rng):
        block = GFEBlock(16, 4, [3, 5, 7, 9], ParamInit(0))
        with pytest.raises(DimensionError):
            block(Tensor(rng.standard_normal((1, 10, 16))))

    def test_rectangular_grid(self, rng):
        block = GFEBlock(16, 4, [3, 5, 7, 9], ParamInit(0))
        x = Tensor(rng.standard_normal((1, 10, 16)))
        assert block(x, (2, 5)).shape == (1, 10, 16)
        with pytest.raises(DimensionError):
            block(x, (3, 3))


@pytest.mark.parametrize("name", ["patch_embed", "lfe", "gfe", "msla", "decoder"])
@pytest.mark.parametrize("seed", [0, 1])
def test_module_gradients(name, seed):
    results = run_check(name, seed)
    assert all(r["passed"] for r in results), [r for r in results if not r["passed"]]
