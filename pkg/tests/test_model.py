import dataclasses

import numpy as np
import pytest

from roomnet.engine import Tape, backward
from roomnet.errors import InvalidArgumentError
from roomnet.heatmaps import CHANNELS, heatmap_targets
from roomnet.data import sample_layout
from roomnet.model import (
    VARIANTS,
    ModelConfig,
    build_model,
    build_variant,
    forward,
    forward_basic,
    forward_mred,
    joint_loss,
    predicted_types,
    select_heatmaps_by_type,
)

TINY = dict(input_size=32, widths=(4, 8, 8, 16, 16), side_hidden=(16, 16), dtype="float64")


def tiny(variant="vanilla", iterations=1, **kw):
    return ModelConfig(variant=variant, iterations=iterations, **{**TINY, **kw})


def images(n=2, size=32, seed=0):
    return np.random.default_rng(seed).normal(size=(n, 3, size, size))


def targets(n=2, size=32, seed=0):
    rng = np.random.default_rng(seed)
    lays = [sample_layout(rng, t, size, size) for t in range(n)]
    gt, w = heatmap_targets(lays, size // 8)
    return gt, w, [l.room_type for l in lays]


# ---------------------------------------------------------------- configuration

def test_desk_geometry():
    cfg = ModelConfig()
    assert (cfg.num_pools, cfg.output_size, cfg.bottleneck_size) == (4, 10, 5)
    full = ModelConfig(input_size=320, widths=(64, 128, 256, 512, 512))
    assert (full.num_pools, full.output_size, full.bottleneck_size) == (5, 40, 10)


@pytest.mark.parametrize("kw", [
    dict(input_size=36),                       # not a multiple of 8
    dict(input_size=24),                       # only three pools possible, bottleneck mismatch
    dict(variant="lstm"),
    dict(variant="vanilla", iterations=3),
    dict(variant="mred", iterations=0),
    dict(widths=(4, 8, 8)),
    dict(dtype="float16"),
    dict(dropout=1.0),
])
def test_invalid_configs(kw):
    with pytest.raises(InvalidArgumentError):
        ModelConfig(**{**TINY, **kw})


def test_config_dict_round_trip():
    cfg = tiny("mred", 3)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------- shapes

@pytest.mark.parametrize("variant", VARIANTS)
def test_output_shapes(variant):
    t = 2 if variant in ("mred", "feedback", "mred-feedback") else 1
    cfg = tiny(variant, t)
    model = build_model(cfg, np.random.default_rng(0))
    trace = forward(model, images(3), train=True, rng=np.random.default_rng(1))
    expected_outputs = 2 if variant.startswith("stacked") else t
    assert len(trace.heatmaps) == expected_outputs
    for hm in trace.heatmaps:
        assert hm.shape == (3, 48, 4, 4)
    assert trace.logits.shape == (3, 11)


def test_wrong_input_shape_rejected():
    model = build_model(tiny(), np.random.default_rng(0))
    with pytest.raises(InvalidArgumentError):
        forward(model, np.zeros((1, 3, 40, 40)))
    with pytest.raises(InvalidArgumentError):
        forward(model, np.zeros((1, 1, 32, 32)))


def test_single_image_gets_batch_axis():
    model = build_model(tiny(), np.random.default_rng(0))
    assert forward(model, images(1)[0]).heatmaps[0].shape == (1, 48, 4, 4)


def test_feedback_stem_takes_prediction_channels():
    model = build_model(tiny("feedback", 2), np.random.default_rng(0))
    assert model.params["enc0.conv0.w"].shape[1] == 3 + 48


def test_stacked_blocks_are_not_shared():
    model = build_model(tiny("stacked"), np.random.default_rng(0))
    a, b = model.params["stack0.enc3.conv0.w"], model.params["stack1.enc3.conv0.w"]
    assert a is not b and not np.array_equal(a.data, b.data)


# ---------------------------------------------------------------- recurrence

@pytest.mark.parametrize("variant", ["mred", "mred-feedback"])
def test_parameter_count_independent_of_iterations(variant):
    counts = {build_model(tiny(variant, t), np.random.default_rng(0)).num_parameters() for t in (1, 2, 3, 5)}
    assert len(counts) == 1


def test_mred_adds_one_recurrent_kernel_per_central_conv():
    basic = build_model(tiny("vanilla"), np.random.default_rng(0))
    mred = build_model(tiny("mred", 3), np.random.default_rng(0))
    extra = [n for n in mred.params if n not in basic.params]
    assert extra and all(n.endswith(".w_prev") for n in extra)
    central = [n for n in basic.params if n.endswith(".w") and (".conv" in n) and not n.startswith(("enc0", "enc1", "enc2"))]
    assert len(extra) == len(central)


@pytest.mark.parametrize("train", [False, True])
def test_zero_recurrent_weights_collapse_iterations(train):
    model = build_model(tiny("mred", 4), np.random.default_rng(0))
    for name, p in model.params.items():
        if name.endswith(".w_prev"):
            p.data[...] = 0.0
    trace = forward_mred(model, images(), train=train, rng=np.random.default_rng(1))
    first = trace.heatmaps[0].data
    for hm in trace.heatmaps[1:]:
        np.testing.assert_array_equal(hm.data, first)


def test_recurrence_changes_later_iterations():
    model = build_model(tiny("mred", 3), np.random.default_rng(0))
    trace = forward_mred(model, images())
    assert not np.array_equal(trace.heatmaps[0].data, trace.heatmaps[1].data)


def test_mred_first_iteration_equals_basic_pass():
    model = build_model(tiny("mred", 3), np.random.default_rng(0))
    a = forward_mred(model, images(), iterations=1).heatmaps[0].data
    b = forward_basic(model, images()).heatmaps[0].data
    np.testing.assert_array_equal(a, b)


def test_gradients_flow_through_time():
    model = build_model(tiny("mred", 3), np.random.default_rng(0))
    gt, w, types = targets()
    with Tape() as tape:
        trace = forward(model, images(), train=True, rng=np.random.default_rng(1))
        loss = joint_loss(trace, gt, w, types, deep_supervision=False)
    backward(tape, loss)
    # only the last output is supervised, so w_prev must receive gradient through the unrolled steps
    assert np.abs(model.params["enc3.conv0.w_prev"].grad).max() > 0


# ---------------------------------------------------------------- loss

def test_loss_ignores_channels_outside_ground_truth_type():
    model = build_model(tiny(), np.random.default_rng(0))
    gt, w, types = targets()
    trace = forward(model, images())
    base = float(joint_loss(trace, gt, w, types).data)
    for i, t in enumerate(types):
        mask = np.ones(48, bool)
        mask[CHANNELS.channels(t)] = False
        trace.heatmaps[0].data[i, mask] += 123.0
    assert float(joint_loss(trace, gt, w, types).data) == base


def test_deep_supervision_sums_every_output():
    model = build_model(tiny("mred", 3), np.random.default_rng(0))
    gt, w, types = targets()
    trace = forward(model, images())
    deep = float(joint_loss(trace, gt, w, types, loss_weight=0.0, deep_supervision=True).data)
    last = float(joint_loss(trace, gt, w, types, loss_weight=0.0, deep_supervision=False).data)
    per = [float(joint_loss(dataclasses.replace(trace, heatmaps=[h]), gt, w, types, loss_weight=0.0).data)
           for h in trace.heatmaps]
    assert deep == pytest.approx(sum(per), rel=1e-12)
    assert last == pytest.approx(per[-1], rel=1e-12)


def test_loss_rejects_bad_types():
    model = build_model(tiny(), np.random.default_rng(0))
    gt, w, _ = targets()
    with pytest.raises(InvalidArgumentError):
        joint_loss(forward(model, images()), gt, w, [0, 11])


def test_type_selection():
    model = build_model(tiny(), np.random.default_rng(0))
    trace = forward(model, images(4))
    trace.logits.data[:] = 0
    trace.logits.data[np.arange(4), [1, 8, 8, 10]] = 1
    np.testing.assert_array_equal(predicted_types(trace.logits), [1, 8, 8, 10])
    sel = select_heatmaps_by_type(trace)
    assert [s[0] for s in sel] == [1, 8, 8, 10]
    assert sel[0][1].shape == (6, 4, 4) and sel[1][1].shape == (2, 4, 4)


def test_build_variant_overrides_config_variant():
    m = build_variant("mred", tiny("vanilla"), np.random.default_rng(0))
    assert m.config.variant == "mred"
    with pytest.raises(InvalidArgumentError):
        build_variant("rnn", tiny(), np.random.default_rng(0))


def test_two_builds_from_one_seed_are_identical():
    a = build_model(tiny("mred", 2), np.random.default_rng(5))
    b = build_model(tiny("mred", 2), np.random.default_rng(5))
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)


def test_each_iteration_keeps_its_own_batchnorm_statistics():
    model = build_model(tiny("mred", 3), np.random.default_rng(0))
    name = "enc3.conv0"
    keys = [k for k in model.buffers if k.startswith(name + ".running_mean")]
    assert sorted(keys) == [f"{name}.running_mean", f"{name}.running_mean.t1", f"{name}.running_mean.t2"]
    assert "enc0.conv0.running_mean.t1" not in model.buffers  # the stem runs once per image
    forward(model, images(), train=True, rng=np.random.default_rng(1))
    a, b = model.buffers[f"{name}.running_mean"], model.buffers[f"{name}.running_mean.t1"]
    assert not np.array_equal(a, b)
    # parameters stay shared: the learnable count does not grow with T
    assert model.num_parameters() == build_model(tiny("mred", 1), np.random.default_rng(0)).num_parameters()


def test_extra_iterations_reuse_last_statistics():
    model = build_model(tiny("mred", 2), np.random.default_rng(0))
    assert len(forward_mred(model, images(), iterations=4).heatmaps) == 4


def test_feedback_stem_has_per_step_statistics():
    model = build_model(tiny("feedback", 2), np.random.default_rng(0))
    assert "enc0.conv0.running_var.t1" in model.buffers
