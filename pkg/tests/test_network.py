"""
Тесты сборки MSLAU-Net: конфигурация, энкодер, декодер, реестр параметров, подсчёт FLOPs.
"""

import numpy as np
import pytest

from src.core.tensor import Tensor
from src.domain.config import ModelConfig, PRESETS, parse_config
from src.domain.errors import CheckpointMismatchError, ConfigParseError, ConfigurationError, DimensionError
from src.domain.state import EncoderOutputs
from src.nn.layers import Linear
from src.nn.module import ParamInit
from src.nn.network import Decoder, build_model, decoder_forward, encoder_forward, model_forward
from src.training.bench import attention_macs
from src.training.profiler import count_flops, count_params


def _tiny(pattern: str, head_width: int = 8) -> ModelConfig:
    return ModelConfig.create(stage_depths=[1, 1, 1, 1], stage_widths=[32, 64, 128, 256], block_pattern=pattern,
                              kernel_set=[3, 5, 7, 9], head_width=head_width, num_classes=4, input_size=(64, 64))


class TestParseConfig:

    def test_preset_base(self):
        config = parse_config("preset=base\n")
        assert config.stage_depths == [4, 8, 11, 5]
        assert config.stage_widths == [64, 128, 256, 512]

    def test_all_cnn_pattern(self):
        assert parse_config("pattern=LLLL").block_pattern == "LLLL"

    def test_widths_must_double(self):
        with pytest.raises(ConfigurationError, match="stage_widths"):
            parse_config("stage_widths=64,128,256,500")

    def test_unknown_key_line_number(self):
        with pytest.raises(ConfigParseError) as info:
            parse_config("# comment\npreset=desk\nwidth_mult=2\n")
        assert info.value.line_no == 3

    def test_missing_equals(self):
        with pytest.raises(ConfigParseError):
            parse_config("preset desk")

    def test_kernel_sets(self):
        assert parse_config("kernel_set=1,3").branches == 2
        assert parse_config("kernel_set=none").branches == 1
        with pytest.raises(ConfigurationError):
            parse_config("kernel_set=3,5,7")
        with pytest.raises(ConfigurationError):
            parse_config("kernel_set=1,5,7,9")

    def test_input_size_multiple_of_32(self):
        with pytest.raises(ConfigurationError, match="input_size"):
            parse_config("preset=desk\ninput_size=48,48")

    def test_head_width_divides_branches(self):
        with pytest.raises(ConfigurationError, match="head_width"):
            parse_config("preset=desk\nhead_width=48")

    def test_text_round_trip(self):
        config = ModelConfig.preset("desk")
        assert parse_config(config.to_text()) == config


class TestModelSize:

    def test_base_parameter_count(self):
        params = count_params(build_model(ModelConfig.preset("base"), seed=0))
        assert abs(params - 21.90e6) <= 0.15 * 21.90e6

    def test_small_parameter_count(self):
        params = count_params(build_model(ModelConfig.preset("small"), seed=0))
        assert abs(params - 14.39e6) <= 0.15 * 14.39e6

    def test_linear_parameter_count(self):
        assert count_params(Linear(4, 3, ParamInit(0))) == 15

    @pytest.mark.slow
    def test_base_flops(self):
        flops = count_flops(build_model(ModelConfig.preset("base"), seed=0), 224, 224)
        assert abs(flops - 5.05e9) <= 0.25 * 5.05e9

    def test_flop_conventions(self):
        model = build_model(_tiny("LLGG"), seed=0)
        single = count_flops(model, 64, 64)
        assert single > 0
        assert count_flops(model, 64, 64, convention="2mac") == 2 * single

    def test_efficient_attention_flops_linear(self):
        ratio = attention_macs("efficient", 4096, 64, 16) / attention_macs("efficient", 1024, 64, 16)
        assert ratio == 4.0
        assert attention_macs("softmax", 4096, 64, 16) / attention_macs("softmax", 1024, 64, 16) == 16.0


class TestRegistry:

    def test_same_seed_identical(self):
        a = build_model(ModelConfig.preset("desk"), seed=5).state_dict()
        b = build_model(ModelConfig.preset("desk"), seed=5).state_dict()
        assert list(a) == list(b)
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_hierarchical_names(self):
        names = set(build_model(ModelConfig.preset("desk"), seed=0).state_dict())
        assert "enc.stage1.embed.proj.weight" in names
        assert "enc.stage3.block2.msla.wq.1.0" in names
        assert "enc.stage1.block0.norm1.running_mean" in names
        assert "dec.align4.2.weight" in names
        assert "dec.head.weight" in names

    def test_load_state_dict_mismatch(self):
        model = build_model(_tiny("LLGG"), seed=0)
        state = dict(model.state_dict())
        state["dec.head.bias"] = np.zeros(7)
        with pytest.raises(CheckpointMismatchError, match="dec.head.bias"):
            model.load_state_dict(state)

    def test_load_state_dict_copies_values(self):
        source = build_model(_tiny("LLGG"), seed=1)
        target = build_model(_tiny("LLGG"), seed=2)
        target.load_state_dict(source.state_dict())
        for (name, a), b in zip(source.state_dict().items(), target.state_dict().values()):
            np.testing.assert_array_equal(a, b, err_msg=name)


class TestEncoder:

    @pytest.mark.slow
    def test_base_resolutions(self, rng):
        model = build_model(ModelConfig.preset("base"), seed=0)
        model.eval()
        enc = encoder_forward(Tensor(rng.random((1, 3, 224, 224))), model)
        assert enc["s1"].shape == (1, 64, 56, 56)
        assert enc["s2"].shape == (1, 128, 28, 28)
        assert enc["s3"].shape == (1, 256, 14, 14)
        assert enc["s4"].shape == (1, 512, 7, 7)

    def test_desk_resolutions(self, rng):
        model = build_model(_tiny("LLGG"), seed=0)
        enc = encoder_forward(Tensor(rng.random((1, 3, 64, 64))), model)
        assert [enc[k].shape[2] for k in ("s1", "s2", "s3", "s4")] == [16, 8, 4, 2]

    def test_patterns_share_shapes(self, rng):
        x = Tensor(rng.random((1, 3, 64, 64)))
        shapes = []
        for pattern in ("GGGG", "LLGG", "LLLL"):
            enc = encoder_forward(x, build_model(_tiny(pattern), seed=0))
            shapes.append([enc[k].shape for k in ("s1", "s2", "s3", "s4")])
        assert shapes[0] == shapes[1] == shapes[2]

    def test_rectangular_input(self, rng):
        model = build_model(_tiny("LLGG"), seed=0)
        enc = encoder_forward(Tensor(rng.random((1, 3, 64, 96))), model)
        assert [enc[k].shape[2:] for k in ("s1", "s2", "s3", "s4")] == [(16, 24), (8, 12), (4, 6), (2, 3)]


class TestDecoder:

    def test_zero_features_zero_logits(self):
        widths = [8, 16, 32, 64]
        decoder = Decoder(widths, 3, ParamInit(0))
        enc = EncoderOutputs(**{f"s{i + 1}": Tensor(np.zeros((1, widths[i], 8 >> i, 8 >> i))) for i in range(4)})
        logits = decoder(enc)
        assert logits.shape == (1, 3, 32, 32)
        np.testing.assert_array_equal(logits.data, 0.0)

    def test_widths_must_double(self):
        with pytest.raises(ConfigurationError):
            Decoder([8, 16, 24, 48], 2, ParamInit(0))

    def test_channel_mismatch(self):
        decoder = Decoder([8, 16, 32, 64], 2, ParamInit(0))
        enc = EncoderOutputs(**{f"s{i + 1}": Tensor(np.zeros((1, 4, 8 >> i, 8 >> i))) for i in range(4)})
        with pytest.raises(DimensionError):
            decoder(enc)


class TestModelForward:

    def test_logit_shape_and_labels(self, rng):
        model = build_model(_tiny("LLGG"), seed=0)
        logits = model_forward(Tensor(rng.random((2, 3, 64, 64))), model)
        assert logits.shape == (2, 4, 64, 64)
        labels = logits.data.argmax(axis=1)
        assert labels.min() >= 0 and labels.max() < 4

    def test_deterministic(self, rng):
        x = Tensor(rng.random((1, 3, 64, 64)))
        a = model_forward(x, build_model(_tiny("LLGG"), seed=3)).data
        b = model_forward(x, build_model(_tiny("LLGG"), seed=3)).data
        np.testing.assert_array_equal(a, b)

    def test_decoder_forward_matches_model(self, rng):
        model = build_model(_tiny("LLGG"), seed=0)
        model.eval()
        x = Tensor(rng.random((1, 3, 64, 64)))
        split = decoder_forward(encoder_forward(x, model), model).data
        np.testing.assert_allclose(split, model(x).data)

    @pytest.mark.parametrize("pattern", ["LLGG", "GGGG"])
    def test_rectangular_logits(self, pattern, rng):
        model = build_model(_tiny(pattern), seed=0)
        logits = model_forward(Tensor(rng.random((1, 3, 64, 96))), model)
        assert logits.shape == (1, 4, 64, 96)

    def test_input_not_divisible_by_32(self, rng):
        model = build_model(_tiny("LLGG"), seed=0)
        with pytest.raises(DimensionError):
            model(Tensor(rng.random((1, 3, 48, 48))))

    def test_wrong_channel_count(self, rng):
        model = build_model(_tiny("LLGG"), seed=0)
        with pytest.raises(DimensionError):
            model(Tensor(rng.random((1, 1, 64, 64))))

    def test_presets_valid(self):
        for name in PRESETS:
            assert ModelConfig.preset(name).block_pattern == "LLGG"
