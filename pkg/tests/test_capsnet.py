import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from capsfold import tensor as T
from capsfold.capsnet import (
    PRESETS,
    CapsNet,
    RMSProp,
    build_model,
    categorical_hinge_loss,
    compute_loss,
    cwts_bytes,
    dynamic_routing,
    load_model,
    logcosh_loss,
    parse_cwts,
    save_model,
    squash,
)
from capsfold.errors import FormatError, ShapeMismatch
from capsfold.tensor import Tensor

from conftest import tiny_hp
from gradcases import check_model
from oracles import routing_reference


# -- squash -----------------------------------------------------------------


def test_squash_examples():
    assert np.linalg.norm(squash(Tensor([1.0, 0.0])).data) == pytest.approx(0.5, abs=1e-12)
    assert np.linalg.norm(squash(Tensor([3.0, 4.0])).data) == pytest.approx(25 / 26, abs=1e-12)
    np.testing.assert_array_equal(squash(Tensor([0.0, 0.0, 0.0])).data, 0.0)


def test_squash_huge_norm_stays_below_one():
    v = squash(Tensor([1e200, 1e200])).data
    assert np.all(np.isfinite(v))
    assert np.linalg.norm(v) < 1.0


finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@settings(max_examples=300, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=finite))
def test_squash_properties(s):
    v = squash(Tensor(s)).data
    n, nv = math.hypot(*s), math.hypot(*v)
    assert nv < 1.0
    # |v| ~ |s|^2 underflows float64 below about 1e-154
    if n > 1e-150:
        # direction preserved: v is a positive multiple of s
        assert nv > 0
        cos = sum((a / n) * (b / nv) for a, b in zip(s, v))
        assert cos == pytest.approx(1.0, abs=1e-9)
        assert nv == pytest.approx(n / (1 + n * n) * n if n < 1e150 else 1.0, rel=1e-9)


# -- routing ----------------------------------------------------------------


def test_routing_matches_reference_and_rows_sum(rng):
    for _ in range(20):
        n, j, d = rng.integers(1, 9), rng.integers(2, 5), rng.integers(1, 9)
        u = rng.normal(size=(n, j, d))
        for iters in (1, 2, 3, 5):
            trace = []
            v = dynamic_routing(Tensor(u), iters, trace=trace).data
            ref_v, ref_c = routing_reference(u, iters)
            np.testing.assert_allclose(v, ref_v, rtol=0, atol=1e-12)
            assert len(trace) == iters
            for c, rc in zip(trace, ref_c):
                np.testing.assert_allclose(c, rc, rtol=0, atol=1e-12)
                np.testing.assert_allclose(c.sum(axis=1), 1.0, atol=1e-12)


def test_routing_zero_predictions_give_uniform_couplings():
    trace = []
    v = dynamic_routing(Tensor(np.zeros((5, 2, 4))), 3, trace=trace).data
    assert not v.any()
    for c in trace:
        np.testing.assert_array_equal(c, 0.5)


def test_routing_symmetric_inputs_symmetric_outputs(rng):
    one = rng.normal(size=(6, 1, 4))
    v = dynamic_routing(Tensor(np.repeat(one, 2, axis=1)), 3).data
    np.testing.assert_allclose(v[0], v[1], atol=1e-15)


def test_routing_rejects_bad_input():
    with pytest.raises(ShapeMismatch):
        dynamic_routing(Tensor(np.zeros((3, 2))))
    with pytest.raises(ValueError):
        dynamic_routing(Tensor(np.zeros((3, 2, 2))), 0)


# -- losses -----------------------------------------------------------------


def _hinge(x, k):
    return float(categorical_hinge_loss(Tensor(np.array(x)), k).data)


def test_hinge_examples():
    assert _hinge([0.9, 0.1], 0) == pytest.approx(0.2, abs=1e-15)
    assert _hinge([0.2, 0.9], 0) == pytest.approx(1.7, abs=1e-15)
    assert _hinge([1.0, 0.0], 0) == 0.0


def _logcosh_ref(x):
    return math.log(math.cosh(x))


@settings(max_examples=200, deadline=None)
@given(st.floats(-20, 20, allow_nan=False))
def test_logcosh_matches_formula(x):
    got = float(logcosh_loss(Tensor([x]), [0.0]).data)
    assert got == pytest.approx(_logcosh_ref(x), rel=1e-9, abs=1e-12)


def test_logcosh_examples():
    assert float(logcosh_loss(Tensor([10.0]), [0.0]).data) == pytest.approx(9.30685, abs=5e-6)
    small = float(logcosh_loss(Tensor([0.01]), [0.0]).data)
    assert abs(small - 0.01**2 / 2) / (0.01**2 / 2) < 0.01
    assert float(logcosh_loss(Tensor([1000.0]), [0.0]).data) == pytest.approx(1000 - math.log(2))


def test_logcosh_sums_classes():
    got = float(compute_loss("logcosh", Tensor([0.3, 0.6]), 1).data)
    assert got == pytest.approx(_logcosh_ref(0.3) + _logcosh_ref(-0.4), rel=1e-12)


def test_unknown_loss():
    with pytest.raises(ValueError):
        compute_loss("mse", Tensor([0.1, 0.2]), 0)


# -- optimizer --------------------------------------------------------------


def _step(opt, p, g):
    params = {"p": Tensor(np.array([p]), requires_grad=True)}
    opt.step(params, {"p": np.array([g])})
    return params["p"].data[0]


def test_rmsprop_first_step():
    assert _step(RMSProp(), 1.0, 1.0) - 1.0 == pytest.approx(-3.1623e-3, abs=1e-7)


def test_rmsprop_zero_gradient_no_change():
    assert _step(RMSProp(), 0.37, 0.0) == 0.37


def test_rmsprop_repeated_gradient_shrinks_update():
    opt = RMSProp()
    params = {"p": Tensor(np.array([0.0]), requires_grad=True)}
    steps = []
    for _ in range(3):
        before = params["p"].data.copy()
        opt.step(params, {"p": np.array([1.0])})
        steps.append(abs(params["p"].data[0] - before[0]))
    assert steps[0] > steps[1] > steps[2]


def test_rmsprop_shape_check():
    with pytest.raises(ShapeMismatch):
        RMSProp().step({"p": Tensor(np.zeros(2))}, {"p": np.zeros(3)})


# -- model ------------------------------------------------------------------


EXPECTED_SHAPES = {
    "2d-kras-hras": (512, 63, 7),
    "3d-kras-hras": (64, 8, 1),
    "2d-psi-blast": (512, 64, 8),
    "3d-psi-blast": (64, 8, 1),
}


@pytest.mark.parametrize("name", sorted(EXPECTED_SHAPES))
def test_preset_layer_shapes(name):
    m = build_model(name)
    s = m.layer_shapes()
    spatial = (s["input"][1], s["conv"][1], s["primary_conv"][1])
    assert spatial == EXPECTED_SHAPES[name]
    assert s["voxel_caps"] == (2, m.hp.voxelcap_dim)
    assert m.params["W"].shape == (m.num_primary, 2, m.hp.voxelcap_dim, m.hp.primarycap_dim)


def test_tiny_forward_shapes(tiny_model, rng):
    v, lengths = tiny_model.forward(rng.random((8, 8, 8, 8)))
    assert v.shape == (2, 8)
    assert lengths.shape == (2,)
    assert np.all((lengths.data >= 0) & (lengths.data < 1))


def test_zero_input_zero_lengths_uniform_couplings(tiny_model):
    # zero biases at init, so a zero grid produces zero everywhere
    trace = []
    _, lengths = tiny_model.forward(np.zeros((8, 8, 8, 8)), trace=trace)
    np.testing.assert_array_equal(lengths.data, 0.0)
    for c in trace:
        np.testing.assert_array_equal(c, 0.5)


def test_input_shape_checked(tiny_model):
    with pytest.raises(ShapeMismatch):
        tiny_model.forward(np.zeros((8, 9, 9, 9)))


def test_class_permutation_permutes_lengths(tiny_model, rng):
    x = rng.random((8, 8, 8, 8))
    swapped = CapsNet(tiny_model.hp, tiny_model.input_shape)
    state = tiny_model.state_dict()
    state["W"] = state["W"][:, ::-1]
    swapped.load_state_dict(state)
    a = tiny_model.activations(x).lengths
    b = swapped.activations(x).lengths
    np.testing.assert_allclose(b, a[::-1], atol=1e-12)


def test_same_seed_same_weights():
    a = CapsNet(tiny_hp(), (8, 8, 8, 8), seed=11).state_dict()
    b = CapsNet(tiny_hp(), (8, 8, 8, 8), seed=11).state_dict()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])


def test_loss_decreases_after_small_step(tiny_model, rng):
    x = (rng.random((8, 8, 8, 8)) < 0.3).astype(float)
    for loss in ("categorical_hinge", "logcosh"):
        m = CapsNet(tiny_model.hp, tiny_model.input_shape, seed=3, loss=loss)
        before, grads = m.loss_and_grads(x, 0)
        assert before > 0
        for k, t in m.params.items():
            t.data = t.data - 1e-5 * grads[k]
        after, _ = m.loss_and_grads(x, 0)
        assert after < before


@pytest.mark.parametrize("loss", ["categorical_hinge", "logcosh"])
def test_end_to_end_gradient(loss):
    for seed in range(5):
        assert check_model(seed, loss) < 1e-3


def test_float32_model(rng):
    m = CapsNet(tiny_hp(), (8, 8, 8, 8), seed=0, dtype=np.float32)
    v, _ = m.forward(rng.random((8, 8, 8, 8)))
    assert v.dtype == np.float32


# -- CWTS -------------------------------------------------------------------


def test_cwts_example_bytes():
    buf = cwts_bytes({"conv_b": np.array([0.5, -1.0])})
    head = b"{}"
    expected = (
        b"CWTS" + struct.pack("<BI", 1, len(head)) + head + struct.pack("<I", 1)
        + struct.pack("<H", 6) + b"conv_b" + struct.pack("<BI", 1, 2)
        + struct.pack("<2d", 0.5, -1.0)
    )
    assert buf == expected


def test_cwts_round_trip(tmp_path, tiny_model):
    path = tmp_path / "m.cwts"
    save_model(path, tiny_model, extra={"note": "x"})
    loaded = load_model(path)
    assert loaded.header()["hyperparameters"] == tiny_model.header()["hyperparameters"]
    for k, v in tiny_model.state_dict().items():
        np.testing.assert_array_equal(loaded.state_dict()[k], v)
    header, _ = parse_cwts(path.read_bytes())
    assert header["note"] == "x"
    save_model(tmp_path / "again.cwts", loaded, extra={"note": "x"})
    assert (tmp_path / "again.cwts").read_bytes() == path.read_bytes()


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + b"\x09" + b[5:],
    lambda b: b[:-3],
    lambda b: b + b"\x00",
])
def test_cwts_corruption_detected(mutate):
    buf = cwts_bytes({"a": np.ones((2, 3))}, {"k": 1})
    with pytest.raises(FormatError):
        parse_cwts(mutate(buf))


def test_cwts_without_header_is_not_a_model(tmp_path):
    path = tmp_path / "raw.cwts"
    path.write_bytes(cwts_bytes({"a": np.ones(2)}))
    with pytest.raises(FormatError):
        load_model(path)


def test_presets_table():
    assert set(PRESETS) == set(EXPECTED_SHAPES)
    assert PRESETS["2d-kras-hras"].loss == "categorical_hinge"
    assert PRESETS["3d-psi-blast"].loss == "logcosh"
