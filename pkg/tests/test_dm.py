import pytest

from bfpsearch.codec import effective_bitwidth
from bfpsearch.dm import (
    LOOP_DIMS,
    Mapping,
    MappingError,
    ReuseClass,
    classify_reuse,
    dm_layer,
    dm_level_volume,
    dm_sum,
    make_mapping,
    new_data_per_iteration,
    perf_loss,
    tile_footprint,
    tile_footprint_elems,
)
from bfpsearch.model import ConvLayer, layer_volumes

from conftest import small_layer, spec_triple


def test_mapping_validation():
    layer = small_layer()
    with pytest.raises(MappingError):
        Mapping(permutation=("oc", "ic", "oh", "ow", "kh"), tiles=(1,) * 6)
    with pytest.raises(MappingError):
        Mapping(permutation=("oc", "oc", "oh", "ow", "kh", "kw"), tiles=(1,) * 6)
    with pytest.raises(MappingError):
        make_mapping(layer, {"oh": 99})
    m = make_mapping(layer, {"oh": 2})
    assert m.tile("oh") == 2
    assert m.permutation[-2:] == ("kh", "kw")


# -- reuse classification (the three scenarios) ------------------------------


def test_weights_full_reuse_across_spatial_loops():
    layer = small_layer(c_in=2, c_out=2)
    m = make_mapping(layer, {"oh": 1, "ow": 1, "oc": 1, "ic": 1})
    assert classify_reuse("weight", "oh", layer, m) is ReuseClass.FULL_REUSE
    assert classify_reuse("weight", "ow", layer, m) is ReuseClass.FULL_REUSE


def test_input_partial_reuse_stride_below_kernel():
    layer = small_layer()  # K=3, stride 1
    m = make_mapping(layer, {"oh": 1, "ow": 1})
    assert classify_reuse("input", "ow", layer, m) is ReuseClass.PARTIAL_REUSE


def test_input_no_reuse_stride_at_kernel():
    layer = ConvLayer(1, 1, 1, 9, 9, 3, 3, stride_h=3, stride_w=3)
    m = make_mapping(layer, {"oh": 1, "ow": 1})
    assert classify_reuse("input", "ow", layer, m) is ReuseClass.NO_REUSE


def test_more_reuse_classes():
    layer = small_layer(c_in=4, c_out=4)
    m = make_mapping(layer, {"oc": 1, "ic": 1, "oh": 1, "ow": 1})
    assert classify_reuse("input", "oc", layer, m) is ReuseClass.FULL_REUSE
    assert classify_reuse("input", "ic", layer, m) is ReuseClass.NO_REUSE
    assert classify_reuse("output", "ic", layer, m) is ReuseClass.FULL_REUSE
    assert classify_reuse("output", "oh", layer, m) is ReuseClass.NO_REUSE
    assert classify_reuse("weight", "oc", layer, m) is ReuseClass.NO_REUSE
    # single-iteration loops are trivially invariant
    whole = make_mapping(layer)
    for op in ("input", "output", "weight"):
        for dim in LOOP_DIMS:
            assert classify_reuse(op, dim, layer, whole) is ReuseClass.FULL_REUSE


# -- tile footprints ----------------------------------------------------------


def test_whole_layer_input_footprint_is_volume_times_bits():
    layer = small_layer()
    m = make_mapping(layer)
    specs = spec_triple()
    q_i = effective_bitwidth(specs[0], (6, 6))
    foot = tile_footprint(layer, m, *specs)
    assert foot["input"] == 36 * q_i


def test_output_tile_halo():
    layer = small_layer()
    m = make_mapping(layer, {"oh": 2, "ow": 2})
    elems = tile_footprint_elems(layer, m)
    assert elems["input"] == 16  # 4x4 input patch for a 2x2 output tile
    assert elems["output"] == 4
    assert elems["weight"] == 9


def test_pointwise_kernel_no_halo():
    layer = small_layer(k_h=1, k_w=1)
    m = make_mapping(layer, {"oh": 3, "ow": 2})
    elems = tile_footprint_elems(layer, m)
    assert elems["input"] == 6  # equals the output tile extent


# -- new data per iteration ---------------------------------------------------


def test_new_data_sliding_window():
    layer = small_layer()
    m = make_mapping(layer, {"oh": 1, "ow": 1})
    assert new_data_per_iteration("input", "ow", layer, m) == 3


def test_new_data_stride_two():
    layer = ConvLayer(1, 1, 1, 7, 7, 3, 3, stride_h=2, stride_w=2)
    m = make_mapping(layer, {"oh": 1, "ow": 1})
    assert new_data_per_iteration("input", "ow", layer, m) == 6


def test_new_data_rejects_non_partial():
    layer = ConvLayer(1, 1, 1, 9, 9, 3, 3, stride_h=3, stride_w=3)
    m = make_mapping(layer, {"oh": 1, "ow": 1})
    with pytest.raises(MappingError):
        new_data_per_iteration("input", "ow", layer, m)


# -- the three per-level cases ------------------------------------------------


def test_level_volume_no_reuse():
    assert dm_level_volume(ReuseClass.NO_REUSE, 4, 100.0) == 400.0


def test_level_volume_partial_reuse():
    assert dm_level_volume(ReuseClass.PARTIAL_REUSE, 4, 100.0, 20.0) == 160.0


def test_level_volume_full_reuse():
    assert dm_level_volume(ReuseClass.FULL_REUSE, 4, 100.0) == 0.0


# -- per-layer traffic --------------------------------------------------------


def test_whole_layer_tile_moves_each_operand_once():
    layer = small_layer(c_in=2, c_out=3)
    specs = spec_triple()
    bd = dm_layer(layer, make_mapping(layer), specs)
    vin, vout, vw = layer_volumes(layer)
    assert bd.total_elems == {"input": vin, "output": vout, "weight": vw}


def test_single_moving_loop_matches_level_formula():
    # Only ow moves: the input should cost one tile plus slide deltas.
    layer = small_layer()
    m = make_mapping(layer, {"ow": 1})
    bd = dm_layer(layer, m, spec_triple())
    tile = bd.tile_elems["input"]
    new = new_data_per_iteration("input", "ow", layer, m)
    assert sum(bd.level_elems["input"]) == dm_level_volume(
        ReuseClass.PARTIAL_REUSE, bd.iters["ow"], tile, new
    )


def test_sliding_window_hand_case():
    # 6x6 input, 3x3 kernel, unit output tiles, rows outer: 72 elements.
    layer = small_layer()
    bd = dm_layer(layer, make_mapping(layer, {"oh": 1, "ow": 1}), spec_triple())
    assert bd.total_elems["input"] == 72


def test_count_first_load_off_zeroes_static_operands():
    layer = small_layer(c_in=2, c_out=3)
    bd = dm_layer(layer, make_mapping(layer), spec_triple(), count_first_load=False)
    assert bd.total_elems == {"input": 0, "output": 0, "weight": 0}


def test_traffic_monotone_in_total_bits():
    layer = small_layer(c_in=2, c_out=3)
    m = make_mapping(layer, {"oh": 2, "ow": 2, "ic": 1})
    dm8 = dm_layer(layer, m, spec_triple(qb=8)).dm_total_bits
    dm16 = dm_layer(layer, m, spec_triple(qb=16)).dm_total_bits
    assert dm8 < dm16


def test_whole_layer_is_minimum_when_it_fits():
    layer = small_layer(c_in=2, c_out=2)
    specs = spec_triple()
    whole = dm_layer(layer, make_mapping(layer), specs).dm_total_bits
    for tiles in ({"oh": 1, "ow": 1}, {"ic": 1}, {"oc": 1, "ow": 2}, {"oh": 3, "ic": 1}):
        assert dm_layer(layer, make_mapping(layer, tiles), specs).dm_total_bits >= whole


def test_breakdown_components_nonnegative_and_additive():
    layer = small_layer(c_in=3, c_out=4, i_h=8, i_w=8)
    m = make_mapping(layer, {"oc": 2, "ic": 1, "oh": 2, "ow": 3}, order=("oh", "oc", "ow", "ic"))
    bd = dm_layer(layer, m, spec_triple())
    for role in ("input", "output", "weight"):
        assert all(v >= 0 for v in bd.level_elems[role])
        assert bd.cold_elems[role] >= 0
        total = (sum(bd.level_elems[role]) + bd.cold_elems[role]) * bd.group_multiplier
        assert total == bd.total_elems[role]
    assert bd.dm_total_bits == (
        bd.total_bits["input"] + bd.total_bits["output"]
    ) + bd.total_bits["weight"]


def test_grouped_layer_traffic_scales_subgroups():
    grouped = ConvLayer(1, 4, 4, 8, 8, 3, 3, pad_h=1, pad_w=1, groups=2)
    single = ConvLayer(1, 2, 2, 8, 8, 3, 3, pad_h=1, pad_w=1)
    mg = make_mapping(grouped, {"oh": 2, "ow": 2})
    ms = make_mapping(single, {"oh": 2, "ow": 2})
    specs = spec_triple()
    bg = dm_layer(grouped, mg, specs)
    bs = dm_layer(single, ms, specs)
    for role in ("input", "output", "weight"):
        assert bg.total_elems[role] == 2 * bs.total_elems[role]


# -- model-level sums ---------------------------------------------------------


def test_dm_sum_single_layer(tiny4):
    layer = tiny4.layers[0]
    specs = spec_triple()
    m = make_mapping(layer)
    one = dm_layer(layer, m, specs).dm_total_bits
    from bfpsearch.model import ModelDesc

    sub = ModelDesc(name="one", layers=[layer])
    assert dm_sum(sub, [(m, specs)]) == one


def test_dm_sum_requires_full_plan(tiny4):
    with pytest.raises(MappingError):
        dm_sum(tiny4, [])


def test_perf_loss_ratio():
    assert perf_loss(100.0, 100.0) == 1.0
    assert perf_loss(50.0, 100.0) == 0.5
    with pytest.raises(MappingError):
        perf_loss(10.0, 0.0)
