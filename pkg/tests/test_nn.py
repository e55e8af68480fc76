import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dn2n import nn
from dn2n.imaging import read_frame
from dn2n.nn import AdamState, ModelFormatError, ModelSpec, adam_step, backward, forward, grad_check, init_params

FIXTURES = Path(__file__).parent / "fixtures"


def small_input(spec, h=8, w=8, b=2, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (b, spec.in_channels, h, w))


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec(levels=())
    with pytest.raises(ValueError):
        ModelSpec(levels=(4, 0))
    with pytest.raises(ValueError):
        ModelSpec(kernel=2)
    assert ModelSpec().levels == (16, 32, 64)
    assert ModelSpec(levels=(4, 8, 16)).divisor == 4


def test_descriptor_encodes_one_field_per_width():
    enc = ModelSpec(levels=(16, 32)).encode()
    head = struct.calcsize("<IIIId")
    assert len(enc) == head + 2 * 4
    assert struct.unpack_from("<IIIId", enc)[3] == 2
    assert struct.unpack_from("<2I", enc, head) == (16, 32)


def test_param_order_and_shapes():
    shapes = nn.param_shapes(ModelSpec(levels=(4, 8)))
    assert list(shapes) == ["enc0.conv1.w", "enc0.conv1.b", "enc0.conv2.w", "enc0.conv2.b",
                            "enc1.conv1.w", "enc1.conv1.b", "enc1.conv2.w", "enc1.conv2.b",
                            "up0.w", "up0.b", "dec0.conv1.w", "dec0.conv1.b", "dec0.conv2.w", "dec0.conv2.b",
                            "out.w", "out.b"]
    assert shapes["dec0.conv1.w"] == (3, 3, 8, 4)
    assert shapes["out.w"] == (1, 1, 4, 1)


def test_init_is_seeded_and_bounded():
    spec = ModelSpec(levels=(4, 8))
    a, b = init_params(spec, 1), init_params(spec, 1)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["enc0.conv1.w"], init_params(spec, 2)["enc0.conv1.w"])
    w = a["enc1.conv2.w"]
    assert np.max(np.abs(w)) <= np.sqrt(6 / (9 * 8 + 9 * 8))
    assert not np.any(a["enc0.conv1.b"])


def _identity_net():
    spec = ModelSpec(levels=(1,), kernel=1)
    p = init_params(spec, 0)
    p["enc0.conv1.w"][...] = np.array([1.0, 0.0]).reshape(1, 1, 2, 1)
    p["enc0.conv2.w"][...] = 1.0
    p["out.w"][...] = 1.0
    return spec, p


def test_identity_kernel_selects_channel():
    spec, p = _identity_net()
    x = small_input(spec, 4, 5, 3)
    out, _ = forward(spec, p, x)
    assert np.array_equal(out[:, 0], x[:, 0])


def test_zero_final_layer_gives_zero_output():
    spec = ModelSpec(levels=(4, 8))
    p = init_params(spec, 0)
    p["out.w"][...] = 0
    out, _ = forward(spec, p, small_input(spec))
    assert not np.any(out)


def test_output_shape_and_input_checks():
    spec = ModelSpec(levels=(4, 8, 8))
    p = init_params(spec, 0)
    out, _ = forward(spec, p, small_input(spec, 12, 20, 1))
    assert out.shape == (1, 1, 12, 20)
    with pytest.raises(ValueError):
        forward(spec, p, small_input(spec, 10, 8))
    with pytest.raises(ValueError):
        forward(spec, p, np.zeros((1, 3, 8, 8)))
    with pytest.raises(ValueError):
        forward(spec, p, np.zeros((2, 8, 8)))


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3))
def test_spatial_dims_preserved(levels, hm, wm):
    spec = ModelSpec(levels=(2,) * levels)
    d = spec.divisor
    out, _ = forward(spec, init_params(spec, 0), small_input(spec, d * hm, d * wm, 1))
    assert out.shape == (1, 1, d * hm, d * wm)


def test_forward_matches_frozen_golden():
    spec = ModelSpec(levels=(4, 8))
    x = np.random.default_rng(2024).uniform(0, 1, (1, 2, 8, 8))
    out, _ = forward(spec, init_params(spec, 7), x)
    golden = read_frame(FIXTURES / "forward_l4-8_seed7.dnf").pixels
    np.testing.assert_allclose(out[0, 0], golden, rtol=0, atol=1e-13)


def test_forward_and_gradients_match_torch():
    torch = pytest.importorskip("torch")
    F = torch.nn.functional
    spec = ModelSpec(levels=(4, 6, 8))
    params = init_params(spec, 3)
    for v in params.values():
        if v.ndim == 1:
            v[...] = np.random.default_rng(v.size).normal(0, 0.1, v.shape)
    x = small_input(spec, 8, 12, 2)
    P = {k: torch.tensor(v.transpose(3, 2, 0, 1) if v.ndim == 4 else v, requires_grad=True)
         for k, v in params.items()}

    def conv_act(name, h):
        return F.leaky_relu(F.conv2d(h, P[name + ".w"], P[name + ".b"], padding=1), spec.slope)

    h, skips = torch.tensor(x), []
    for lvl in range(len(spec.levels)):
        if lvl:
            h = F.avg_pool2d(h, 2)
        h = conv_act(f"enc{lvl}.conv2", conv_act(f"enc{lvl}.conv1", h))
        skips.append(h)
    for lvl in range(len(spec.levels) - 2, -1, -1):
        u = conv_act(f"up{lvl}", F.interpolate(h, scale_factor=2, mode="nearest"))
        h = torch.cat([u, skips[lvl]], 1)
        h = conv_act(f"dec{lvl}.conv2", conv_act(f"dec{lvl}.conv1", h))
    ref = F.conv2d(h, P["out.w"], P["out.b"])
    r = np.random.default_rng(9).standard_normal(ref.shape)
    (ref * torch.tensor(r)).sum().backward()

    out, tape = forward(spec, params, x)
    np.testing.assert_allclose(out, ref.detach().numpy(), rtol=0, atol=1e-12)
    grads = backward(spec, params, tape, r)
    for k, v in grads.items():
        g = P[k].grad.numpy()
        np.testing.assert_allclose(v, g.transpose(2, 3, 1, 0) if v.ndim == 4 else g, rtol=0, atol=1e-11)


def test_zero_upstream_gradient():
    spec = ModelSpec(levels=(4, 8))
    p = init_params(spec, 0)
    out, tape = forward(spec, p, small_input(spec))
    grads = backward(spec, p, tape, np.zeros_like(out))
    assert all(not np.any(g) for g in grads.values())
    with pytest.raises(ValueError):
        backward(spec, p, tape, np.zeros((1, 1, 8, 8)))


def test_one_parameter_closed_form_gradient():
    spec, p = _identity_net()
    p["out.w"][...] = 0.7
    x = small_input(spec, 4, 4, 1)
    out, tape = forward(spec, p, x)
    # L = |f|^2 / 2 with f = w x (all pre-activations positive): dL/dw = sum(f * x)
    grads = backward(spec, p, tape, out)
    assert grads["out.w"].item() == pytest.approx(np.sum(out[0, 0] * x[0, 0]), rel=1e-14)
    assert grads["out.b"].item() == pytest.approx(np.sum(out), rel=1e-14)


def test_threads_do_not_change_bits():
    spec = ModelSpec(levels=(4, 8))
    p = init_params(spec, 0)
    x = small_input(spec, 8, 8, 5)
    o1, t1 = forward(spec, p, x, threads=1)
    o4, t4 = forward(spec, p, x, threads=4)
    assert o1.tobytes() == o4.tobytes()
    g1 = backward(spec, p, t1, o1, threads=1)
    g4 = backward(spec, p, t4, o4, threads=4)
    assert all(g1[k].tobytes() == g4[k].tobytes() for k in g1)


@pytest.mark.parametrize("levels", [(4, 8), (3, 4, 5), (16, 32, 64)])
def test_grad_check_passes(levels):
    spec = ModelSpec(levels=levels)
    rep = grad_check(spec, init_params(spec, 1), small_input(spec, 8, 8, 1), n_samples=50)
    assert rep.ok, rep
    assert rep.checked == 50


def test_grad_check_linear_model_is_exact():
    spec = ModelSpec(levels=(3, 4), slope=1.0)
    rep = grad_check(spec, init_params(spec, 2), small_input(spec, 8, 8, 1), n_samples=50)
    assert rep.max_rel_error < 1e-9
    assert rep.skipped == 0


def test_grad_check_flags_sign_flipped_backward():
    spec = ModelSpec(levels=(4, 8))

    def flipped(*args, **kw):
        return {k: -g for k, g in backward(*args, **kw).items()}

    rep = grad_check(spec, init_params(spec, 1), small_input(spec, 8, 8, 1), backward_fn=flipped)
    assert not rep.ok


def _fd(fn, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = fn(x)
        x[idx] = old - h
        dn = fn(x)
        x[idx] = old
        g[idx] = (up - dn) / (2 * h)
    return g


def test_layers_in_isolation():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((4, 6, 3))
    r4 = rng.standard_normal((2, 3, 3))
    np.testing.assert_allclose(nn.avgpool_backward(r4), _fd(lambda v: np.sum(r4 * nn.avgpool_forward(v)), x),
                               atol=1e-9)
    r_up = rng.standard_normal((8, 12, 3))
    np.testing.assert_allclose(nn.upsample_backward(r_up), _fd(lambda v: np.sum(r_up * nn.upsample_forward(v)), x),
                               atol=1e-9)
    w = rng.standard_normal((3, 3, 3, 2))
    b = rng.standard_normal(2)
    r_c = rng.standard_normal((4, 6, 2))
    y, saved = nn.conv_forward(x, w, b)
    dx, dw, db = nn.conv_backward(r_c, saved, w, x.shape)
    np.testing.assert_allclose(dx, _fd(lambda v: np.sum(r_c * nn.conv_forward(v, w, b)[0]), x), atol=1e-8)
    np.testing.assert_allclose(dw, _fd(lambda v: np.sum(r_c * nn.conv_forward(x, v, b)[0]), w), atol=1e-8)
    np.testing.assert_allclose(db, r_c.sum(axis=(0, 1)), atol=1e-12)
    z = rng.standard_normal((5, 5))
    z[np.abs(z) < 1e-3] = 0.5
    r_z = rng.standard_normal((5, 5))
    np.testing.assert_allclose(nn.lrelu_backward(r_z, z, 0.1),
                               _fd(lambda v: np.sum(r_z * nn.lrelu_forward(v, 0.1)), z), atol=1e-8)


def test_conv_matches_direct_sum():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((5, 4, 2))
    w = rng.standard_normal((3, 3, 2, 3))
    b = rng.standard_normal(3)
    y, _ = nn.conv_forward(x, w, b)
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    ref = np.zeros((5, 4, 3)) + b
    for i in range(5):
        for j in range(4):
            ref[i, j] += np.einsum("abc,abcd->d", xp[i:i + 3, j:j + 3], w)
    np.testing.assert_allclose(y, ref, atol=1e-12)


def test_adam_closed_forms():
    p = {"w": np.array([1.0])}
    state = AdamState.for_params(p, lr=1e-4)
    adam_step(p, {"w": np.array([0.0])}, state)
    assert p["w"][0] == 1.0
    p = {"w": np.array([0.0])}
    state = AdamState.for_params(p, lr=1e-4)
    adam_step(p, {"w": np.array([2.0])}, state)
    assert p["w"][0] == pytest.approx(-1e-4 * 2 / (2 + 1e-8), rel=1e-12)
    before = p["w"][0]
    adam_step(p, {"w": np.array([2.0])}, state)
    assert 0.999e-4 <= before - p["w"][0] <= 1e-4
    assert state.step == 2


@given(st.floats(1e-2, 1e6), st.sampled_from([-1.0, 1.0]))
def test_adam_first_step_is_scale_free(g, sign):
    p = {"w": np.zeros(1)}
    state = AdamState.for_params(p, lr=1e-3)
    adam_step(p, {"w": np.array([sign * g])}, state)
    assert 1e-3 * (1 - 1e-6) <= abs(p["w"][0]) <= 1e-3
    assert np.sign(p["w"][0]) == -sign


def test_adam_rejects_shape_mismatch():
    p = {"w": np.zeros(2)}
    with pytest.raises(ValueError):
        adam_step(p, {"w": np.zeros(3)}, AdamState.for_params(p))


def test_model_file_roundtrip(tmp_path):
    spec = ModelSpec(levels=(4, 8))
    p = init_params(spec, 4)
    path = tmp_path / "m.dnm"
    nn.save_model(path, spec, p)
    assert path.read_bytes()[:4] == b"DNM1"
    spec2, p2 = nn.load_model(path)
    assert spec2 == spec and list(p2) == list(p)
    x = small_input(spec)
    assert forward(spec, p, x)[0].tobytes() == forward(spec2, p2, x)[0].tobytes()


def test_model_file_rejects_damage(tmp_path):
    spec = ModelSpec(levels=(4, 8))
    path = tmp_path / "m.dnm"
    nn.save_model(path, spec, init_params(spec, 4))
    data = path.read_bytes()
    head = 12 + len(spec.encode())
    cases = {"magic": b"XNM1" + data[4:], "version": data[:4] + struct.pack("<I", 99) + data[8:],
             "trunc": data[:-8], "tail": data + b"\0", "hash": data[:head] + bytes(8) + data[head + 8:],
             "tiny": data[:6]}
    for name, blob in cases.items():
        bad = tmp_path / f"{name}.dnm"
        bad.write_bytes(blob)
        with pytest.raises(ModelFormatError):
            nn.load_model(bad)
