import itertools
import json
import warnings

import numpy as np
import pytest

from conftest import relative_error
from splitmark.data import LabeledDataset, TriggerPattern
from splitmark.errors import ConfigError, FormatError, VerificationError
from splitmark.nn import Dense, Flatten, Model, ReLU, ScaleNorm
from splitmark.sfl import build_reference_model, split_model
from splitmark.watermark import (
    FeatureWatermark,
    VerificationReport,
    free_rider_audit,
    gen_feature_wm,
    load_wm,
    save_wm,
    scalenorm_ids,
    target_weights,
    theta_f,
    verify_bottom,
    verify_top,
    watermark_step,
    wm_from_bytes,
    wm_loss,
    wm_to_bytes,
)


def top_model(seed=0):
    return split_model(build_reference_model(seed=seed, top_channels=4)).top


def brute_theta(w, M, bits):
    """Per-bit Heaviside scoring written out longhand."""
    ok = 0
    for i in range(len(bits)):
        y = sum(float(w[j]) * float(M[j, i]) for j in range(len(w)))
        s = 2 * int(bits[i]) - 1
        ok += 0 if -s * y >= 0 else 1
    return ok / len(bits)


def test_theta_f_matches_brute_force_for_every_sign_pattern():
    rng = np.random.default_rng(0)
    for n_bits in range(1, 9):
        M = rng.standard_normal((6, n_bits)).astype(np.float32)
        for w in (rng.normal(size=6), rng.normal(size=6) * 1e-3):
            for bits in itertools.product((0, 1), repeat=n_bits):
                fw = FeatureWatermark(M, np.array(bits), (0,))
                assert theta_f(w, fw) == brute_theta(w, M, bits)


def test_heaviside_zero_counts_as_failure():
    fw = FeatureWatermark(np.ones((2, 2), np.float32), np.array([1, 0]), (0,))
    assert theta_f(np.zeros(2), fw) == 0.0
    assert theta_f(np.array([1.0, 0.0]), fw) == 0.5


def test_gen_feature_wm_is_seeded_and_sized():
    top = top_model()
    ids = scalenorm_ids(top)
    a = gen_feature_wm(3, 128, ids, top)
    b = gen_feature_wm(3, 128, ids, top)
    assert a.M.shape == (sum(top.layers[i].channels for i in ids), 128)
    np.testing.assert_array_equal(a.M, b.M)
    np.testing.assert_array_equal(a.bits, b.bits)
    np.testing.assert_array_equal(a.signs, 2.0 * a.bits - 1)
    assert not np.array_equal(gen_feature_wm(4, 128, ids, top).M, a.M)


def test_capacity_warning():
    top = top_model()
    with pytest.warns(UserWarning, match="capacity"):
        gen_feature_wm(0, 64, [scalenorm_ids(top)[0]], top)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        gen_feature_wm(0, 16, [scalenorm_ids(top)[0]], top)


def test_target_layer_errors():
    top = top_model()
    fw = gen_feature_wm(0, 8, scalenorm_ids(top), top)
    with pytest.raises(ConfigError):
        gen_feature_wm(0, 8, [0], top)  # a dense layer, not scalenorm
    with pytest.raises(VerificationError):
        verify_top(Model([Dense(4, 2)], (4,)), fw)
    with pytest.raises(ConfigError):
        gen_feature_wm(0, 0, scalenorm_ids(top), top)


def test_wm_loss_gradient_off_hinge_points():
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        M = rng.standard_normal((7, 5))
        s = rng.choice([-1.0, 1.0], size=5)
        w = rng.normal(size=7)
        while np.min(np.abs(1 - s * (w @ M))) < 1e-3:
            w = rng.normal(size=7)
        _, grad = wm_loss(w, M, s)
        num = np.zeros(7)
        for j in range(7):
            e = np.zeros(7)
            e[j] = 1e-4
            num[j] = (wm_loss(w + e, M, s)[0] - wm_loss(w - e, M, s)[0]) / 2e-4
        worst = max(worst, relative_error(grad, num))
    assert worst < 1e-4


def test_wm_loss_values():
    M = np.array([[1.0, -1.0], [0.0, 2.0]])
    s = np.array([1.0, 1.0])
    loss, grad = wm_loss(np.array([0.5, 0.0]), M, s)
    # y = (0.5, -0.5); margins 0.5 and 1.5, both active
    assert loss == pytest.approx(2.0)
    np.testing.assert_allclose(grad, -(M[:, 0] + M[:, 1]))
    loss, grad = wm_loss(np.array([2.0, 2.0]), M, s)
    assert loss == 0.0 and not grad.any()


def test_watermark_step_reaches_full_embedding():
    top = top_model()
    fw = gen_feature_wm(1, 128, scalenorm_ids(top), top, alpha=0.1)
    before = verify_top(top, fw)
    for _ in range(200):
        if watermark_step(top, fw, 0.1) == 0:
            break
    assert before < 0.75
    assert verify_top(top, fw) == 1.0


def test_watermark_step_only_moves_target_gammas():
    top = top_model()
    fw = gen_feature_wm(1, 32, [scalenorm_ids(top)[-1]], top)
    snapshot = {(i, n): l.params[n].copy() for i, n, l in top.parameters()}
    watermark_step(top, fw, 0.1)
    for i, n, layer in top.parameters():
        moved = not np.array_equal(layer.params[n], snapshot[(i, n)])
        assert moved == (i == fw.target_layer_ids[0] and n == "gamma")


def test_target_weights_concatenates_in_id_order():
    top = top_model()
    ids = scalenorm_ids(top)
    w = target_weights(top, ids[::-1])
    expected = np.concatenate([top.layers[i].params["gamma"] for i in ids[::-1]])
    np.testing.assert_array_equal(w, expected)


def test_smw1_round_trip(tmp_path):
    top = top_model()
    fw = gen_feature_wm(9, 37, scalenorm_ids(top), top, alpha=0.25)
    save_wm(fw, tmp_path / "wm.smw")
    back = load_wm(tmp_path / "wm.smw")
    assert back.M.tobytes() == fw.M.tobytes()
    np.testing.assert_array_equal(back.bits, fw.bits)
    assert back.target_layer_ids == fw.target_layer_ids
    assert (back.alpha, back.seed) == (0.25, 9)
    blob = wm_to_bytes(fw)
    with pytest.raises(FormatError):
        wm_from_bytes(blob[:-2])


# -- client side ----------------------------------------------------------------------


class ConstantModel(Model):
    """Predicts class 0 unless the top-left pixel is bright, then ``target``."""

    def __init__(self, target, num_classes=3):
        super().__init__([Flatten()], (1, 4, 4), init=False)
        self.target, self.num_classes = target, num_classes

    def forward(self, batch, mode="train"):
        x = np.asarray(batch)
        out = np.zeros((len(x), self.num_classes), np.float32)
        out[np.arange(len(x)), np.where(x[:, 0, 0, 0] > 0.9, self.target, 0)] = 1
        return out


class IdentityBottom(Model):
    def __init__(self):
        super().__init__([Flatten()], (1, 4, 4), init=False)

    def forward(self, batch, mode="train"):
        return np.asarray(batch)


def corner_trigger(target):
    mask = np.zeros((4, 4))
    mask[0, 0] = 1
    # 1 of 16 pixels exceeds the stealth budget; only mask/pattern/target are used here
    return type("T", (), {"mask": mask.astype(np.float32), "pattern": mask[None].astype(np.float32), "target_class": target})()


def test_verify_bottom_excludes_natural_target_samples():
    labels = np.array([2] * 10 + [1] * 10)
    test = LabeledDataset(np.zeros((20, 1, 4, 4)), labels, 3)
    res = verify_bottom(IdentityBottom(), ConstantModel(2), corner_trigger(2), test, rho=0.5, tau=0.8)
    assert res.n_triggered == 10
    assert res.theta_B == 1.0 and res.decision
    res = verify_bottom(IdentityBottom(), ConstantModel(1), corner_trigger(2), test, rho=0.5)
    assert res.theta_B == 0.0 and not res.decision


def test_verify_bottom_empty_subset():
    test = LabeledDataset(np.zeros((4, 1, 4, 4)), [2, 2, 2, 2], 3)
    with pytest.raises(VerificationError):
        verify_bottom(IdentityBottom(), ConstantModel(2), corner_trigger(2), test)


def test_free_rider_audit():
    test = LabeledDataset(np.zeros((12, 1, 4, 4)), np.arange(12) % 3, 3)
    pair = type("P", (), {"bottom": IdentityBottom(), "top": ConstantModel(2)})()
    out = free_rider_audit({0: (corner_trigger(2), 2), 1: (corner_trigger(1), 1)}, pair, test)
    assert out[0].passed and out[0].triggered_rate == 1.0
    assert not out[1].passed and out[1].triggered_rate == 0.0


def test_verification_report_json_keys():
    rep = VerificationReport(0.98765, {0: 0.912345, 3: 0.5}, 0.8, n_triggered={0: 10, 3: 10})
    data = json.loads(rep.to_json())
    assert set(data) == {"theta_F", "theta_B", "tau", "decision", "n_triggered"}
    assert data["theta_F"] == 0.9877
    assert data["theta_B"] == {"0": 0.9123, "3": 0.5}
    assert data["decision"] == {"0": True, "3": False}
    with pytest.raises(VerificationError):
        VerificationReport(None, {0: 0.5}, 0.8, decision={0: True})


def test_trigger_pattern_accepted_by_verify_bottom():
    mask = np.zeros((4, 4), np.float32)
    trig = TriggerPattern(mask, np.zeros((1, 4, 4)), 2)
    test = LabeledDataset(np.zeros((6, 1, 4, 4)), [0, 1, 0, 1, 2, 2], 3)
    res = verify_bottom(IdentityBottom(), ConstantModel(2), trig, test)
    assert res.theta_B == 0.0 and res.n_triggered == 3
