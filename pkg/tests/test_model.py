import numpy as np
import pytest

from specklesense.errors import (BadMagicError, ChecksumError, ConfigurationError, FormatError,
                                 InferenceModeError, ShapeError, TruncatedError,
                                 VersionMismatchError)
from specklesense.nn.model import MODEL_MAGIC
from specklesense.nn import (Architecture, build_decoder, build_linear_baseline,
                             load_model, model_from_bytes, model_to_bytes, predict, save_model)
from gradcheck import model_gradient_errors
from oracles import DECODER_PARAMETERS


def test_parameter_count_closed_form():
    assert Architecture().parameter_count() == DECODER_PARAMETERS == 8_605_991


def test_parameter_count_matches_built_model():
    model = build_decoder(seed=None)
    assert model.n_parameters() == DECODER_PARAMETERS
    arch = Architecture(classes=("a", "b", "c"))
    assert build_decoder(arch, seed=None).n_parameters() == arch.parameter_count()


def test_linear_baseline_parameter_count():
    assert build_linear_baseline(seed=None).n_parameters() == 3 * 64 * 64 + 3 == 12_291


def test_layer_shapes():
    p = build_decoder(seed=None).parameters()
    assert p["trunk.0.kernel"].shape == (5, 5, 1, 32)
    assert p["trunk.4.kernel"].shape == (5, 5, 32, 64)
    assert p["trunk.9.weight"].shape == (16_384, 500)
    assert [p[f"head.depth.{i}.weight"].shape for i in (0, 2, 4)] == [(500, 200), (200, 100),
                                                                       (100, 1)]


def test_zero_init_forward_is_zero():
    model = build_decoder(seed=None)
    reg, logits = model.forward(np.zeros((2, 64, 64)), train=True)
    assert np.all(reg == 0) and logits is None


def test_batch_forward_shape():
    model = build_decoder(seed=0, dtype=np.float32)
    reg, _ = model.forward(np.random.default_rng(0).normal(size=(50, 64, 64)), train=True)
    assert reg.shape == (50, 3)


def test_classifier_branch_shape():
    model = build_decoder(Architecture(regression=("depth",), classes=("a", "b", "c")), seed=1)
    reg, logits = model.forward(np.random.default_rng(0).normal(size=(4, 64, 64)))
    assert reg.shape == (4, 1) and logits.shape == (4, 3)


@pytest.mark.parametrize("kw", [dict(kind="mlp"), dict(regression=(), classes=()),
                                dict(input_size=30), dict(kind="linear", classes=("a", "b")),
                                dict(classes=("a",)), dict(kernel_size=4),
                                dict(conv_channels=(8,))])
def test_inconsistent_descriptor(kw):
    with pytest.raises(ConfigurationError):
        Architecture(**kw)


def test_wrong_input_size():
    with pytest.raises(ShapeError):
        build_decoder(seed=0).forward(np.zeros((1, 32, 32)))


def test_full_model_gradients_small_input():
    arch = Architecture(input_size=8, classes=("a", "b"))
    model = build_decoder(arch, seed=3)
    rng = np.random.default_rng(0)
    errors = model_gradient_errors(model, rng.normal(size=(4, 8, 8)), rng.uniform(-1, 1, (4, 3)),
                                   rng.integers(0, 2, 4), per_tensor=4)
    assert max(errors.values()) < 1e-4, errors


def test_linear_gradients():
    model = build_linear_baseline(input_size=8, seed=1)
    rng = np.random.default_rng(0)
    errors = model_gradient_errors(model, rng.normal(size=(3, 8, 8)), rng.normal(size=(3, 3)),
                                   per_tensor=10)
    assert max(errors.values()) < 1e-4


def test_untrained_batchnorm_refuses_inference():
    with pytest.raises(InferenceModeError):
        predict(build_decoder(seed=0), np.zeros((64, 64)))


def _trained_tiny():
    arch = Architecture(input_size=8, classes=("a", "b"))
    model = build_decoder(arch, seed=5)
    model.forward(np.random.default_rng(1).normal(size=(4, 8, 8)), train=True)
    model.bounds = np.array([[100.0, 212.0], [0.0, 800.0], [21.0, 23.0]])
    return model


def test_checkpoint_round_trip(tmp_path):
    model = _trained_tiny()
    save_model(model, tmp_path / "m.spkm")
    back = load_model(tmp_path / "m.spkm")
    assert model_to_bytes(back) == model_to_bytes(model)
    for k, v in model.parameters().items():
        assert np.array_equal(v, back.parameters()[k])
    for k, v in model.buffers().items():
        assert np.array_equal(v, back.buffers()[k])
    x = np.random.default_rng(2).normal(size=(3, 8, 8))
    a, b = predict(model, x), predict(back, x)
    assert np.array_equal(a.values, b.values) and np.array_equal(a.probabilities, b.probabilities)


def test_checkpoint_float32_round_trip():
    model = build_decoder(Architecture(input_size=8), seed=1, dtype=np.float32)
    back = model_from_bytes(model_to_bytes(model))
    assert back.dtype == np.float32
    assert model_to_bytes(back) == model_to_bytes(model)


def test_checkpoint_errors():
    data = model_to_bytes(_trained_tiny())
    with pytest.raises(BadMagicError):
        model_from_bytes(b"XXXX" + data[4:])
    bumped = bytearray(data)
    bumped[len(MODEL_MAGIC)] = 2
    with pytest.raises(VersionMismatchError):
        model_from_bytes(bytes(bumped))
    with pytest.raises(TruncatedError):
        model_from_bytes(data[:len(data) // 2])
    flipped = bytearray(data)
    flipped[-50] ^= 4
    with pytest.raises(ChecksumError):
        model_from_bytes(bytes(flipped))
    with pytest.raises(FormatError):
        model_from_bytes(data + b"\0")


def test_checkpoint_fuzz():
    data = model_to_bytes(build_linear_baseline(input_size=4, seed=0))
    rng = np.random.default_rng(1)
    for cut in rng.integers(0, len(data), 50):
        with pytest.raises(FormatError):
            model_from_bytes(data[:cut])
    for pos in rng.integers(0, len(data), 50):
        flipped = bytearray(data)
        flipped[pos] ^= 1 << int(rng.integers(0, 8))
        with pytest.raises(FormatError):
            model_from_bytes(bytes(flipped))


def test_kink_aware_difference_steps_past_a_switch():
    from gradcheck import kink_aware_difference
    w = np.zeros(1)
    loss = lambda: 2.0 * w[0] + 10.0 * max(w[0] - 3e-7, 0.0)    # switch 3e-7 to the right
    estimate, retries = kink_aware_difference(loss, w, 0, loss())
    assert retries == 1 and estimate == pytest.approx(2.0, rel=1e-6)
    assert w[0] == 0.0
