import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_conv_model
from splitmark.attacks import (
    AttackConfig,
    ReversedTrigger,
    anomaly_index,
    finetune,
    load_trigger,
    neural_cleanse,
    project_to_budget,
    prune,
    prune_pair,
    quant_bits,
    quantize,
    quantize_array,
    reverse_trigger,
    save_trigger,
    trigger_from_bytes,
    trigger_to_bytes,
    unlearn,
)
from splitmark.data import STEALTH_BUDGET, DatasetSpec, LabeledDataset, gen_synthetic
from splitmark.errors import ConfigError, FormatError
from splitmark.nn import model_to_bytes
from splitmark.sfl import TrainConfig, split_model


def small_pair(seed=0):
    return TrainConfig(seed=seed, bottom_channels=2, top_channels=2, hidden=16).build_pair((1, 16, 16), 4)


def probe_set(n_per_class=8, seed=0):
    return gen_synthetic(DatasetSpec(num_classes=4, samples_per_class=n_per_class, seed=seed))


def params_of(model):
    return [layer.params[n].copy() for _, n, layer in model.parameters()]


# -- pruning --------------------------------------------------------------------------


def test_prune_rate_zero_is_identity():
    model = tiny_conv_model(0)
    assert model_to_bytes(prune(model, 0.0)) == model_to_bytes(model)


@pytest.mark.parametrize("rate", [0.1, 0.33, 0.5, 0.9, 1.0])
def test_prune_zero_fraction_and_smallest_first(rate):
    model = tiny_conv_model(1)
    before = np.concatenate([p.ravel() for p in params_of(model)])
    after = np.concatenate([p.ravel() for p in params_of(prune(model, rate))])
    assert np.mean(after == 0) >= rate
    kept = np.abs(before[after != 0])
    dropped = np.abs(before[after == 0])
    if kept.size and dropped.size:
        assert dropped.max() <= kept.min()


def test_prune_does_not_mutate_input_and_pairs_prune_separately():
    pair = split_model(tiny_conv_model(2), 3)
    snapshot = model_to_bytes(pair.bottom)
    out = prune_pair(pair, 0.5)
    assert model_to_bytes(pair.bottom) == snapshot
    for m in (out.bottom, out.top):
        flat = np.concatenate([p.ravel() for p in params_of(m)])
        assert np.mean(flat == 0) >= 0.5


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 50), st.floats(0, 1))
def test_prune_idempotent(seed, rate):
    once = prune(tiny_conv_model(seed), rate)
    assert model_to_bytes(prune(once, rate)) == model_to_bytes(once)


def test_prune_rejects_bad_rate():
    with pytest.raises(ConfigError):
        prune(tiny_conv_model(0), 1.5)


# -- quantization -----------------------------------------------------------------------


def test_quant_bits():
    assert quant_bits("fp16") is None
    assert quant_bits("int8") == 8 and quant_bits("int32") == 32 and quant_bits("int3") == 3
    for bad in ("int1", "int33", "bf16", "int"):
        with pytest.raises(ConfigError):
            quant_bits(bad)


def test_fp16_representable_values_unchanged():
    arr = np.array([0.5, -1.25, 3.0, 0.0, 2.0**-10], np.float32)
    assert quantize_array(arr, "fp16").tobytes() == arr.tobytes()


def test_int8_error_within_half_step():
    arr = np.random.default_rng(0).normal(size=1000).astype(np.float32)
    out = quantize_array(arr, "int8")
    step = np.abs(arr).max() / 127
    assert np.abs(out - arr).max() <= step / 2 + 1e-6
    assert len(np.unique(out)) <= 255


def test_all_zero_tensor_is_unchanged():
    z = np.zeros(5, np.float32)
    assert quantize_array(z, "int8").tobytes() == z.tobytes()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 30), st.sampled_from(["fp16", "int32", "int8", "int4"]))
def test_quantize_idempotent(seed, scheme):
    once = quantize(tiny_conv_model(seed), scheme)
    twice = quantize(once, scheme)
    for a, b in zip(params_of(once), params_of(twice)):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-7 * max(1.0, float(np.abs(a).max())))


def test_quantize_leaves_buffers():
    model = tiny_conv_model(0)
    model.layers[2].buffers["running_var"][:] = 0.123456789
    out = quantize(model, "int4")
    np.testing.assert_array_equal(out.layers[2].buffers["running_var"], model.layers[2].buffers["running_var"])


# -- fine-tuning ------------------------------------------------------------------------


def test_finetune_zero_epochs_or_zero_lr_is_bitwise_identity():
    pair = small_pair()
    data = probe_set()
    for epochs, lr in ((0, 0.1), (2, 0.0)):
        out = finetune(pair, data, epochs, lr)
        assert model_to_bytes(out.bottom) == model_to_bytes(pair.bottom)
        assert model_to_bytes(out.top) == model_to_bytes(pair.top)


def test_finetune_changes_copy_only():
    pair = small_pair()
    snapshot = model_to_bytes(pair.top)
    out = finetune(pair, probe_set(), 1, 0.05)
    assert model_to_bytes(pair.top) == snapshot
    assert model_to_bytes(out.top) != snapshot


def test_attack_config():
    cfg = AttackConfig()
    assert cfg.epochs_for(60) == 15 and cfg.epochs_for(2) == 1
    assert AttackConfig(finetune_epochs=3).epochs_for(60) == 3
    for kw in (dict(prune_rates=(1.2,)), dict(quant_schemes=("int1",)), dict(finetune_fraction=2.0), dict(nc_step=0.0)):
        with pytest.raises(ConfigError):
            AttackConfig(**kw)


# -- Neural Cleanse ---------------------------------------------------------------------


def test_anomaly_index_degenerate_mad():
    index, flagged = anomaly_index([10, 10, 10, 10, 1])
    assert not index.any() and flagged == []
    index, flagged = anomaly_index([3.0, 3.0, 3.0])
    assert not index.any() and flagged == []


def test_anomaly_index_hand_evaluated():
    index, flagged = anomaly_index([10, 11, 9, 12, 1])
    # median 10, absolute deviations (0, 1, 1, 2, 9) -> MAD 1
    expected = np.array([0, 1, 1, 2, 9]) / 1.4826
    np.testing.assert_allclose(index, expected)
    assert flagged == [4]


def test_anomaly_index_ignores_large_outliers_and_needs_three():
    _, flagged = anomaly_index([10, 11, 9, 12, 40])
    assert flagged == []
    with pytest.raises(ConfigError):
        anomaly_index([1.0, 2.0])


def test_reverse_trigger_bounds_and_l1():
    pair = small_pair(1)
    cfg = AttackConfig(nc_iterations=15, nc_probe_size=16)
    trig = reverse_trigger(pair, 2, probe_set(), cfg, seed=0)
    assert trig.target_class == 2
    assert trig.mask.shape == (16, 16) and trig.pattern.shape == (1, 16, 16)
    assert 0 <= trig.mask.min() and trig.mask.max() <= 1
    assert 0 <= trig.pattern.min() and trig.pattern.max() <= 1
    assert trig.mask_l1 == pytest.approx(float(trig.mask.sum()))
    assert 0 <= trig.asr <= 1


def test_reverse_trigger_is_seeded_and_needs_probe():
    pair = small_pair(1)
    cfg = AttackConfig(nc_iterations=5, nc_probe_size=8)
    a = reverse_trigger(pair, 0, probe_set(), cfg, seed=3)
    b = reverse_trigger(pair, 0, probe_set(), cfg, seed=3)
    assert a.mask.tobytes() == b.mask.tobytes()
    only_target = LabeledDataset(np.zeros((4, 1, 16, 16)), [0, 0, 0, 0], 4)
    with pytest.raises(ConfigError):
        reverse_trigger(pair, 0, only_target, cfg)


def test_neural_cleanse_covers_every_class():
    report = neural_cleanse(small_pair(2), probe_set(), AttackConfig(nc_iterations=3, nc_probe_size=8))
    assert [t.target_class for t in report.triggers] == [0, 1, 2, 3]
    assert report.index.shape == (4,)


def test_unlearn_stamps_copies_with_true_labels():
    pair = small_pair()
    clean = probe_set()
    trig = ReversedTrigger(1, np.zeros((16, 16)), np.zeros((1, 16, 16)))
    out = unlearn(pair, [trig], clean, 0, 0.1)
    assert model_to_bytes(out.top) == model_to_bytes(pair.top)
    moved = unlearn(pair, [trig], clean, 1, 0.05, fraction=0.5)
    assert model_to_bytes(moved.top) != model_to_bytes(pair.top)


def test_project_to_budget():
    rng = np.random.default_rng(0)
    trig = ReversedTrigger(3, rng.random((16, 16)), rng.random((1, 16, 16)))
    proj = project_to_budget(trig, owner_id=5)
    assert proj.mask.sum() == 12 and proj.area_fraction <= STEALTH_BUDGET
    top = np.argsort(-trig.mask.ravel())[:12]
    assert set(np.flatnonzero(proj.mask.ravel())) == set(top)
    assert proj.target_class == 3 and proj.owner_id == 5


# -- SMT1 --------------------------------------------------------------------------------


def test_trigger_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    trig = ReversedTrigger(2, rng.random((4, 5)), rng.random((3, 4, 5)), asr=0.75)
    save_trigger(trig, tmp_path / "t.smt")
    back = load_trigger(tmp_path / "t.smt")
    assert back.target_class == 2 and back.asr == 0.75
    assert back.mask.tobytes() == trig.mask.tobytes()
    assert back.pattern.tobytes() == trig.pattern.tobytes()
    assert np.isnan(trigger_from_bytes(trigger_to_bytes(ReversedTrigger(0, trig.mask, trig.pattern))).asr)


def test_trigger_bytes_errors():
    blob = trigger_to_bytes(ReversedTrigger(0, np.ones((2, 2)), np.ones((1, 2, 2))))
    with pytest.raises(FormatError):
        trigger_from_bytes(blob[:-1])
    with pytest.raises(FormatError):
        trigger_from_bytes(b"SMW1" + blob[4:])
    with pytest.raises(ConfigError):
        ReversedTrigger(0, np.ones((2, 2)), np.ones((1, 3, 2)))
