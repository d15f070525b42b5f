import numpy as np
import pytest

from bfpsearch.accuracy import (
    AccuracyError,
    AccuracyTable,
    layer_samples,
    loads_table,
    lookup_acc_loss,
    normalized_mse,
    proxy_acc_loss,
    proxy_layer_loss,
    synthetic_sample,
)
from bfpsearch.codec import BfpSpec
from bfpsearch.model import ModelDesc

from conftest import small_layer, spec_triple


def two_layer_model():
    return ModelDesc(name="two", layers=[
        small_layer(index=1, c_in=2, c_out=2),
        small_layer(index=2, c_in=2, c_out=2),
    ])


def samples_for(model, seed=7):
    return {l.index: {"input": synthetic_sample(l, "input", seed),
                      "weight": synthetic_sample(l, "weight", seed)} for l in model.layers}


def test_table_parse_lookup():
    table = loads_table("""format_version 1
# scope SE BS qb loss
model 3 8 8 0.0029
layer:1 3 8 8 0.001
layer:2 3 8 8 0.004
""")
    assert lookup_acc_loss(table, (3, 8, 8)) == 0.0029


def test_table_negative_loss_clamped():
    table = loads_table("format_version 1\nmodel 3 8 8 -0.01\n")
    assert lookup_acc_loss(table, (3, 8, 8)) == 0.0
    assert table.diagnostics


def test_table_empty_rejected():
    with pytest.raises(AccuracyError):
        lookup_acc_loss(AccuracyTable(), (3, 8, 8))


def test_table_composition_weighted_sum():
    model = two_layer_model()
    table = loads_table("""format_version 1
layer:1 3 8 8 0.001
layer:2 3 8 8 0.004
""")
    # Identical layers: equal output volumes, so the composition is the mean.
    assert lookup_acc_loss(table, (3, 8, 8), model=model) == pytest.approx(0.0025)
    with pytest.raises(AccuracyError):
        lookup_acc_loss(table, (3, 8, 8), model=model, compose=False)


def test_table_exact_entry_overrides_composition():
    model = two_layer_model()
    table = loads_table("""format_version 1
model 3 8 8 0.5
layer:1 3 8 8 0.001
layer:2 3 8 8 0.004
""")
    assert lookup_acc_loss(table, (3, 8, 8), model=model) == 0.5


def test_table_uncovered_config_rejected():
    table = loads_table("format_version 1\nmodel 3 8 8 0.1\n")
    with pytest.raises(AccuracyError):
        lookup_acc_loss(table, (4, 8, 8), model=two_layer_model())


def test_table_format_errors():
    with pytest.raises(AccuracyError):
        loads_table("model 3 8 8 0.1\n")  # missing version
    with pytest.raises(AccuracyError):
        loads_table("format_version 1\nmodel 3 8 0.1\n")  # short record
    with pytest.raises(AccuracyError):
        loads_table("format_version 1\nblob 3 8 8 0.1\n")  # bad scope


def test_proxy_zero_for_exactly_representable_constant():
    layer = small_layer(c_in=2, c_out=2)
    samples = {"input": np.full(72, 2.0), "weight": np.full(36, -0.5)}
    for se in (2, 4, 6):
        specs = spec_triple(qb=8, se=se, bs=4)
        assert proxy_layer_loss(layer, specs, samples) == 0.0


def test_proxy_monotone_in_mantissa_bits():
    layer = small_layer(c_in=2, c_out=2)
    samples = samples_for(ModelDesc(name="m", layers=[layer]))[1]
    losses = [proxy_layer_loss(layer, spec_triple(qb=8, se=se, bs=4), samples) for se in (2, 3, 4, 5, 6)]
    assert all(a <= b for a, b in zip(losses, losses[1:]))
    assert losses[0] < losses[-1]


def test_proxy_block_size_2_vs_48():
    layer = small_layer(c_in=4, c_out=4, i_h=12, i_w=12)
    samples = samples_for(ModelDesc(name="m", layers=[layer]))[1]
    small_bs = proxy_layer_loss(layer, spec_triple(qb=8, se=3, bs=2), samples)
    large_bs = proxy_layer_loss(layer, spec_triple(qb=8, se=3, bs=48), samples)
    assert large_bs > small_bs


def test_proxy_determinism_under_seed():
    layer = small_layer(c_in=2, c_out=2)
    a = synthetic_sample(layer, "weight", seed=42)
    b = synthetic_sample(layer, "weight", seed=42)
    assert np.array_equal(a, b)
    c = synthetic_sample(layer, "weight", seed=43)
    assert not np.array_equal(a, c)


def test_proxy_model_loss_weighted():
    model = two_layer_model()
    samples = samples_for(model)
    specs = [spec_triple(qb=8, se=3, bs=8)] * 2
    loss = proxy_acc_loss(model, samples, specs)
    per_layer = [proxy_layer_loss(l, specs[i], samples[l.index]) for i, l in enumerate(model.layers)]
    # equal output volumes -> plain mean
    assert loss == pytest.approx(sum(per_layer) / 2)


def test_layer_samples_fallback_control():
    layer = small_layer(c_in=2, c_out=2)
    got = layer_samples(layer)
    assert set(got) == {"input", "weight"}
    with pytest.raises(AccuracyError):
        layer_samples(layer, allow_synthetic=False)


def test_layer_samples_from_file(tmp_path):
    layer = small_layer(c_in=1, c_out=1, input_sample="x.f32")
    data = np.linspace(-1, 1, 36).astype("<f4")
    (tmp_path / "x.f32").write_bytes(data.tobytes())
    got = layer_samples(layer, model_dir=str(tmp_path))
    assert np.allclose(got["input"], data.astype(np.float64))


def test_normalized_mse_zero_signal():
    spec = BfpSpec(8, 3, 2, "weight")
    assert normalized_mse(np.zeros(8), spec) == 0.0
