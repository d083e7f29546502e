import dataclasses
import struct
import zlib

import numpy as np
import pytest

from ternkit.errors import (
    BadMagicError,
    ChecksumError,
    DomainError,
    IntegrityError,
    ModelFormatError,
    TruncatedFileError,
)
from ternkit.network import (
    BNParams,
    LayerSpec,
    ModeMismatchError,
    NetworkSpec,
    build_table1,
    build_toy,
    count_flops,
    count_params,
    count_params_memory,
    deserialize,
    forward,
    init_model,
    predict_mask,
    quantize_model,
    serialize,
    skip_pairs,
)
from ternkit.network.serialize import from_bytes, to_bytes
from ternkit.packed import words_for

TABLE1_MFLOPS = [172, 718, 345, 661, 303, 552, 31, 31, 2005, 453, 1719, 407, 1583, 770, 2]


def randomise_bn(model, rng):
    for name, bn in model.bn.items():
        c = bn.gain.size
        model.bn[name] = BNParams(
            rng.uniform(0.5, 1.5, c), rng.normal(0, 0.2, c), rng.normal(0, 0.3, c), rng.uniform(0.5, 2.0, c)
        )
    return model


# --- architecture -----------------------------------------------------------

def test_table1_rows():
    net = build_table1()
    conv7 = net.layer("conv7")
    assert conv7.kernel == (1, 1) and conv7.out_channels == 256
    assert sum(l.kind == "avgpool" for l in net.layers) == 3
    assert skip_pairs(net) == [("act6", "conv9"), ("act4", "conv11"), ("act2", "conv13")]
    assert [l.name for l in net.weighted_layers][-1] == "prediction"
    assert len(net.weighted_layers) == 15


def test_table1_flops():
    flops = count_flops(build_table1())
    assert [round(f.mflops) for f in flops] == TABLE1_MFLOPS
    assert flops[0].macs == 234 * 170 * 3 * 3 * 15 * 32
    assert flops[8].macs == 50 * 34 * 9 * 512 * 256


def test_table1_params_and_memory():
    net = build_table1()
    assert count_params(net) == 2_661_728
    params, fbytes = count_params_memory(net, "float32")
    assert params == 2_661_728
    assert fbytes / 1e6 == pytest.approx(10.6, rel=0.01)
    assert count_params_memory(net, "ternary2bit")[1] / 1e6 == pytest.approx(0.66, rel=0.01)
    assert count_params_memory(net, "binary1bit")[1] / 1e6 == pytest.approx(0.33, rel=0.01)
    with pytest.raises(DomainError):
        count_params_memory(net, "int4")


def test_toy_builder():
    net = build_toy()
    assert net.first_conv.out_channels == 8
    assert sum(l.kind == "avgpool" for l in net.layers) == 2
    assert net.layers[-1].out_size == (64, 64)
    ratio = count_params(build_toy(width=16)) / count_params(build_toy(width=8))
    assert 3.5 < ratio < 4.1
    assert all(f.macs > 0 for f in count_flops(net))
    with pytest.raises(DomainError):
        build_toy(size=30)
    with pytest.raises(DomainError):
        build_toy(width=0)


def test_spec_validation():
    pred = LayerSpec("prediction", "prediction", kernel=(1, 1), in_channels=2, out_channels=2)
    with pytest.raises(DomainError):
        NetworkSpec((pred, pred), (8, 8), 2)
    cat = LayerSpec("concat", "cat", in_channels=2, out_channels=4, skip="later")
    with pytest.raises(DomainError):
        NetworkSpec((cat, pred), (8, 8), 2)


# --- inference ----------------------------------------------------------------

def test_float_forward_shape():
    net = build_toy(width=4, size=32)
    scores = forward(init_model(net, 0), np.random.default_rng(0).normal(size=(3, 32, 32)))
    assert scores.shape == (2, 32, 32) and np.all(np.isfinite(scores))
    assert predict_mask(scores).shape == (32, 32)


def test_zero_input_propagates_zeros():
    model = init_model(build_toy(width=4, size=16, mode="ternary-weights-only"), 1)
    model.bias["prediction"][:] = [0.25, -0.5]
    scores = forward(model, np.zeros((3, 16, 16)), beta=3.0)
    assert np.array_equal(scores[0], np.full((16, 16), 0.25))
    assert np.array_equal(scores[1], np.full((16, 16), -0.5))


@pytest.mark.parametrize("trial", range(20))
def test_ternary_forward_equals_dense_simulation(trial):
    rng = np.random.default_rng(100 + trial)
    levels = int(rng.integers(2, 4))
    size = 2 ** (levels - 1) * int(rng.integers(2, 5))
    net = build_toy(width=int(rng.integers(1, 5)), in_slices=int(rng.integers(1, 4)), levels=levels,
                    size=size, ternarize_input=bool(trial % 2))
    model = randomise_bn(init_model(net, rng), rng)
    q = quantize_model(model, "ternary")
    x = rng.normal(size=(2, net.in_slices, size, size))
    assert np.array_equal(forward(q, x), forward(q, x, dense_sim=True))


def test_binary_forward_equals_dense_simulation():
    rng = np.random.default_rng(7)
    model = randomise_bn(init_model(build_toy(width=3, size=16), rng), rng)
    q = quantize_model(model, "binary")
    x = rng.normal(size=(3, 16, 16))
    assert np.array_equal(forward(q, x), forward(q, x, dense_sim=True))


def test_float_model_runs_ternary_mode_by_quantising():
    rng = np.random.default_rng(8)
    model = randomise_bn(init_model(build_toy(width=3, size=16), rng), rng)
    x = rng.normal(size=(3, 16, 16))
    assert np.array_equal(forward(model, x, mode="ternary"), forward(quantize_model(model), x))


def test_mode_mismatch():
    model = init_model(build_toy(width=2, size=8), 0)
    x = np.zeros((3, 8, 8))
    with pytest.raises(ModeMismatchError):
        forward(quantize_model(model, "ternary"), x, mode="float")
    with pytest.raises(ModeMismatchError):
        forward(quantize_model(model, "binary"), x, mode="ternary")


def test_bn_folding_matches():
    rng = np.random.default_rng(9)
    model = randomise_bn(init_model(build_toy(width=4, size=16), rng), rng)
    x = rng.normal(size=(2, 3, 16, 16))
    for mode in ("float", "ternary-full"):
        a = forward(model, x, mode=mode)
        b = forward(model, x, mode=mode, fold_bn=True)
        assert np.abs(a - b).max() <= 1e-5 * max(1.0, np.abs(a).max())


def test_concat_shape_mismatch():
    L = [
        LayerSpec("conv", "conv1", kernel=(3, 3), padding=1, in_channels=1, out_channels=2),
        LayerSpec("activation", "act1", in_channels=2, out_channels=2),
        LayerSpec("avgpool", "pool1", in_channels=2, out_channels=2),
        LayerSpec("concat", "cat", in_channels=2, out_channels=4, skip="act1"),
        LayerSpec("prediction", "prediction", kernel=(1, 1), in_channels=4, out_channels=2),
    ]
    model = init_model(NetworkSpec(tuple(L), (8, 8), 1), 0)
    with pytest.raises(DomainError, match="concatenate"):
        forward(model, np.zeros((1, 8, 8)))


def test_input_slice_mismatch():
    model = init_model(build_toy(width=2, size=8), 0)
    with pytest.raises(DomainError):
        forward(model, np.zeros((2, 8, 8)))


# --- serialization ------------------------------------------------------------

@pytest.fixture(scope="module")
def toy_models():
    rng = np.random.default_rng(10)
    model = randomise_bn(init_model(build_toy(), rng), rng)
    model.bias["prediction"][:] = rng.normal(size=2)
    return {"float": model, "ternary": quantize_model(model, "ternary"),
            "binary": quantize_model(model, "binary"),
            "sparse": quantize_model(model, "ternary", sparsity=0.5)}


@pytest.mark.parametrize("kind", ["float", "ternary", "binary", "sparse"])
def test_roundtrip_bit_exact(toy_models, kind, tmp_path):
    m = toy_models[kind]
    path = tmp_path / "m.tnn"
    n = serialize(m, path)
    assert path.stat().st_size == n
    back = deserialize(path)
    assert back.same_as(m)
    assert to_bytes(back) == path.read_bytes()


def test_ternary_file_size_formula(toy_models):
    m = toy_models["ternary"]
    spec = m.spec
    size = 36 + 2 + 1 + len(spec.name) + 4  # header, mode bytes, name, CRC
    for layer in spec.layers:
        size += 2 + 13 * 4 + 2 + len(layer.name) + len(layer.skip or "")
        if layer.kind == "conv":
            n = layer.param_count // layer.out_channels
            size += layer.out_channels * 2 * words_for(n) * 8 + 4 * layer.out_channels
        elif layer.kind == "prediction":
            size += 4 * layer.param_count + 4 * layer.out_channels
        elif layer.kind == "batchnorm":
            size += 8 + 4 * 4 * layer.out_channels
    assert len(to_bytes(m)) == size


def test_binary_file_stores_one_plane(toy_models):
    assert len(to_bytes(toy_models["binary"])) < len(to_bytes(toy_models["ternary"]))


def test_corrupt_magic(toy_models):
    data = bytearray(to_bytes(toy_models["ternary"]))
    data[:4] = b"XXXX"
    with pytest.raises(BadMagicError, match="bad magic"):
        from_bytes(bytes(data))


def test_truncated(toy_models):
    data = to_bytes(toy_models["ternary"])
    for cut in (2, 20, len(data) // 2, len(data) - 1):
        with pytest.raises(TruncatedFileError):
            from_bytes(data[:cut])


def test_checksum_mismatch(toy_models):
    data = bytearray(to_bytes(toy_models["float"]))
    data[len(data) // 2] ^= 0x10
    with pytest.raises(ChecksumError):
        from_bytes(bytes(data))
    with pytest.raises(ChecksumError):
        from_bytes(to_bytes(toy_models["float"]) + b"\0")


def test_errors_are_distinct():
    assert len({BadMagicError, TruncatedFileError, ChecksumError}) == 3
    for cls in (BadMagicError, TruncatedFileError, ChecksumError):
        assert issubclass(cls, ModelFormatError)


def _reseal(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body))


def test_sign_on_zero_payload_rejected(toy_models):
    m = toy_models["ternary"]
    name = m.spec.conv_layers[1].name
    w = m.weights[name]
    zero_lane = int(np.flatnonzero(~np.unpackbits(w.value_words[0].view(np.uint8), bitorder="little").astype(bool))[0])
    sign = w.sign_words.copy()
    sign[0, zero_lane // 64] |= np.uint64(1 << (zero_lane % 64))
    bad = dataclasses.replace(w, sign_words=sign)
    # bypass the tensor's own checks by splicing raw words into a serialised file
    data = to_bytes(m)
    old = w.sign_words.astype("<u8").tobytes()
    new = bad.sign_words.astype("<u8").tobytes()
    assert data.count(old) == 1
    with pytest.raises(IntegrityError, match="sign bit on zero"):
        from_bytes(_reseal(data[:-4].replace(old, new)))


def test_garbage_record(toy_models):
    data = bytearray(to_bytes(toy_models["float"])[:-4])
    data[36 + 2 + 1 + len("toy")] = 250  # first layer kind byte
    with pytest.raises(ModelFormatError):
        from_bytes(_reseal(bytes(data)))
