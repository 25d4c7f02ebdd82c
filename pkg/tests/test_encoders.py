import numpy as np
import pytest

from splatpuppet import autodiff as ad
from splatpuppet.autodiff import Var, value_of
from splatpuppet.encoders import ConditionModulator, TriPlaneHashEncoder

from _fd import assert_grads_close


def make_encoder(seed=0, hash_size_log2=6, grad_position=False):
    rng = np.random.default_rng(seed)
    return TriPlaneHashEncoder(rng, [-1, -1, -1], [1, 1, 1],
                               hash_size_log2=hash_size_log2,
                               grad_position=grad_position)


def test_output_dimension_is_36():
    enc = make_encoder()
    mu = np.random.default_rng(1).uniform(-1, 1, (7, 3))
    code = enc.encode(mu)
    assert value_of(code).shape == (7, 36)
    assert enc.out_dim == 36


def test_determinism():
    enc = make_encoder()
    mu = np.random.default_rng(2).uniform(-1, 1, (5, 3))
    a = value_of(enc.encode(mu))
    b = value_of(enc.encode(mu))
    assert np.array_equal(a, b)


def test_vertex_query_returns_table_entries():
    enc = make_encoder()
    # interior vertex of the coarsest level of every plane: pick grid indices
    # and map them back to a position, then compare against the hashed rows
    res = enc.resolutions[0]
    gi, gj = 3, 5
    u = np.array([gi / (res - 1), gj / (res - 1), gj / (res - 1)])
    mu = (u * 2.0 - 1.0)[None, :]
    code = value_of(enc.encode(mu))
    tables = value_of(enc.tables)
    # plane XY, level 0 occupies code[0:3]
    h = ((gi * 73856093) ^ (gj * 19349663)) % enc.table_size
    np.testing.assert_allclose(code[0, 0:3], tables[0, h], atol=1e-12)


def test_edge_query_is_convex_combination():
    enc = make_encoder()
    res = enc.resolutions[0]
    tables = value_of(enc.tables)
    for frac in (0.25, 0.5, 0.75):
        gi = 2
        x = (gi + frac) / (res - 1)
        y = 4 / (res - 1)
        mu = (np.array([x, y, y]) * 2.0 - 1.0)[None, :]
        code = value_of(enc.encode(mu))
        h0 = ((gi * 73856093) ^ (4 * 19349663)) % enc.table_size
        h1 = (((gi + 1) * 73856093) ^ (4 * 19349663)) % enc.table_size
        expect = (1 - frac) * tables[0, h0] + frac * tables[0, h1]
        np.testing.assert_allclose(code[0, 0:3], expect, atol=1e-9)


def test_out_of_box_clamped_and_counted():
    enc = make_encoder()
    inside = value_of(enc.encode(np.array([[1.0, 0.0, 0.0]])))
    before = enc.clamped_inputs
    outside = value_of(enc.encode(np.array([[3.0, 0.0, 0.0]])))
    assert enc.clamped_inputs == before + 1
    np.testing.assert_allclose(inside, outside)


def test_table_gradients_match_fd():
    rng = np.random.default_rng(3)
    mu = rng.uniform(-1, 1, (4, 3))
    target = rng.standard_normal((4, 36))

    def fn(tables):
        enc = make_encoder()
        enc.tables = tables
        return ad.vsum((enc.encode(mu) - target) ** 2)

    tables0 = np.array(value_of(make_encoder().tables))
    assert_grads_close(fn, [tables0], h=1e-6)


def test_position_gradients_when_enabled():
    rng = np.random.default_rng(4)
    mu = rng.uniform(-0.8, 0.8, (3, 3))
    enc = make_encoder(grad_position=True)
    target = rng.standard_normal((3, 36))

    def fn(mu):
        return ad.vsum((enc.encode(mu) - target) ** 2)

    assert_grads_close(fn, [mu], h=1e-7)


def make_modulator(seed=0, raw_dim=8):
    rng = np.random.default_rng(seed)
    return ConditionModulator(rng, raw_dim, 36, emb_dim=16, hidden=16)


def test_zero_raw_with_zero_final_layer_gives_zero_feature():
    mod = make_modulator()
    code = np.random.default_rng(5).standard_normal((4, 36))
    feat = value_of(mod(code, np.zeros(8)))
    assert np.all(feat == 0.0)


def test_gate_in_open_unit_interval():
    mod = make_modulator()
    code = np.random.default_rng(6).standard_normal((50, 36)) * 5
    gate = value_of(mod.gate(code))
    assert gate.min() > 0.0 and gate.max() < 1.0


def test_saturated_gate_passes_enc_through():
    mod = make_modulator(seed=7)
    # push the gate bias very high so sigmoid ~ 1
    mod.gate.layers[-1].b.value[:] = 50.0
    rng = np.random.default_rng(8)
    # give Enc a non-zero final layer so the comparison is meaningful
    mod.enc.layers[-1].w.value[:] = rng.standard_normal(mod.enc.layers[-1].w.value.shape)
    code = rng.standard_normal((3, 36))
    raw = rng.standard_normal(8)
    feat = value_of(mod(code, raw))
    enc_only = value_of(mod.enc(raw[None, :]))
    np.testing.assert_allclose(feat, np.broadcast_to(enc_only, feat.shape), atol=1e-3)


def test_different_codes_get_different_gates():
    mod = make_modulator(seed=9)
    rng = np.random.default_rng(10)
    codes = rng.standard_normal((2, 36))
    raw = rng.standard_normal(8)
    mod.enc.layers[-1].w.value[:] = rng.standard_normal(mod.enc.layers[-1].w.value.shape)
    feat = value_of(mod(codes, raw))
    assert not np.allclose(feat[0], feat[1])


def test_wrong_raw_dimension_rejected():
    mod = make_modulator()
    with pytest.raises(ValueError):
        mod(np.zeros((2, 36)), np.zeros(5))


def test_modulator_gradients_match_fd():
    rng = np.random.default_rng(11)
    code = rng.standard_normal((3, 36))
    raw = rng.standard_normal(8)
    mod = make_modulator(seed=12)
    mod.enc.layers[-1].w.value[:] = 0.1 * rng.standard_normal(
        mod.enc.layers[-1].w.value.shape)
    names = sorted(mod.params("m"))
    arrays = [np.array(value_of(mod.params("m")[n])) for n in names]
    assert_grads_close(_make_closure(mod, names, code, raw), arrays, h=1e-6)


def _swap_param(mod, name, var):
    parts = name.split(".")
    net = mod.enc if parts[1] == "enc" else mod.gate
    layer = net.layers[int(parts[-1][1:])]
    if parts[-1][0] == "w":
        layer.w = var
    else:
        layer.b = var


def _make_closure(mod, names, code, raw):
    def fn(*arrs):
        originals = {n: mod.params("m")[n] for n in names}
        for n, a in zip(names, arrs):
            _swap_param(mod, n, a if isinstance(a, Var) else Var(np.asarray(a)))
        out = ad.vsum(mod(code, raw) ** 2)
        for n in names:
            _swap_param(mod, n, originals[n])
        return out
    return fn
