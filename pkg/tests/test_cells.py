import math

import numpy as np
import pytest

from relaxrnn.cells import (
    CellParams,
    MixBank,
    cell_parameter_count,
    init_cell,
    lstm_step,
    lstm_step_backward,
    mix_cells,
    mix_params,
    mixing_coefficients,
    output_head,
    pack_cell,
    shift_schedule,
    temporal_encoding,
    unpack_cell,
)
from relaxrnn.errors import ContractError
from relaxrnn.numerics import Rng, grad_check


def _cell(H, d, value=0.0, out=1, ln=False):
    t = {f"W_{g}": np.full((H, H + d), value) for g in "icfo"}
    t.update({f"b_{g}": np.zeros(H) for g in "icfo"})
    if out:
        t["W_y"], t["b_y"] = np.zeros((out, H)), np.zeros(out)
    if ln:
        t.update({f"ln_g_{g}": np.ones(H) for g in "icfo"})
        t.update({f"ln_b_{g}": np.zeros(H) for g in "icfo"})
    return CellParams(**t)


def _reference_step(p: CellParams, h, C, x):
    # one scalar-loop evaluation per unit, independent of the packed engine
    z = list(h) + list(x)
    sig = lambda a: 1.0 / (1.0 + math.exp(-a))  # noqa: E731
    H = len(h)
    h_new, C_new = [], []
    for u in range(H):
        pre = {g: sum(getattr(p, f"W_{g}")[u, k] * z[k] for k in range(len(z))) + getattr(p, f"b_{g}")[u]
               for g in "icfo"}
        c = sig(pre["i"]) * math.tanh(pre["c"]) + sig(pre["f"]) * C[u]
        C_new.append(c)
        h_new.append(sig(pre["o"]) * math.tanh(c))
    return np.array(h_new), np.array(C_new)


class TestLstmStep:
    def test_all_zero(self):
        h, C, cache = lstm_step(_cell(3, 2), np.zeros(3), np.zeros(3), np.zeros(2), return_cache=True)
        gates = cache[1]
        assert np.allclose(gates[0, :3], 0.5) and np.allclose(gates[0, 6:], 0.5)
        assert np.allclose(gates[0, 3:6], 0.0)
        assert np.array_equal(h, np.zeros(3)) and np.array_equal(C, np.zeros(3))

    def test_saturated_forget_keeps_cell(self):
        p = _cell(2, 1)
        p.b_f[:] = 20.0
        p.b_i[:] = -20.0
        c = np.array([0.7, -1.3])
        _, C = lstm_step(p, np.zeros(2), c, np.zeros(1))
        assert np.allclose(C, c, atol=1e-8)

    def test_scalar_cell(self):
        p = _cell(1, 1, value=1.0)
        h, C = lstm_step(p, np.zeros(1), np.zeros(1), np.ones(1))
        s1 = 1.0 / (1.0 + math.exp(-1.0))
        c_expected = s1 * math.tanh(1.0)
        assert abs(C[0] - c_expected) <= 1e-12
        assert abs(h[0] - s1 * math.tanh(c_expected)) <= 1e-12
        assert abs(C[0] - 0.5567699) < 1e-6 and abs(h[0] - 0.3696064) < 1e-6

    def test_matches_scalar_loop_reference(self):
        r = Rng(4)
        p = init_cell(3, 5, 1, r)
        h0, C0, x = r.normal(size=5), r.normal(size=5), r.normal(size=3)
        h, C = lstm_step(p, h0, C0, x)
        h_ref, C_ref = _reference_step(p, h0, C0, x)
        assert np.allclose(h, h_ref, atol=1e-13) and np.allclose(C, C_ref, atol=1e-13)

    def test_batched_equals_rowwise(self):
        r = Rng(9)
        p = init_cell(2, 4, None, r)
        H0, C0, X = r.normal(size=(5, 4)), r.normal(size=(5, 4)), r.normal(size=(5, 2))
        Hb, Cb = lstm_step(p, H0, C0, X)
        for n in range(5):
            h, c = lstm_step(p, H0[n], C0[n], X[n])
            assert np.allclose(Hb[n], h, atol=1e-15) and np.allclose(Cb[n], c, atol=1e-15)

    def test_shape_errors(self):
        with pytest.raises(ContractError):
            lstm_step(_cell(3, 2), np.zeros(4), np.zeros(3), np.zeros(2))
        with pytest.raises(ContractError):
            lstm_step(_cell(3, 2), np.zeros(3), np.zeros(3), np.zeros(2), use_layer_norm=True)

    @pytest.mark.parametrize("ln", [False, True])
    def test_backward_finite_differences(self, ln):
        r = Rng(12)
        cell = init_cell(2, 3, None, r.child("cell"), use_layer_norm=ln, orthogonal=ln)
        if ln:
            for g in "icfo":
                getattr(cell, f"ln_g_{g}")[:] = r.uniform(0.5, 1.5, size=3)
                getattr(cell, f"ln_b_{g}")[:] = r.normal(scale=0.1, size=3)
        h0, C0, x = r.normal(size=(4, 3)), r.normal(size=(4, 3)), r.normal(size=(4, 2))
        wh, wc = r.normal(size=(4, 3)), r.normal(size=(4, 3))
        params = dict(cell.as_dict(), h0=h0, C0=C0, x=x)

        def loss(p):
            c = CellParams.from_dict({k: v for k, v in p.items() if k not in ("h0", "C0", "x")})
            h, C, cache = lstm_step(c, p["h0"], p["C0"], p["x"], use_layer_norm=ln, return_cache=True)
            grads, dh, dC, dx = lstm_step_backward(c, cache, wh, wc)
            return float(np.sum(wh * h) + np.sum(wc * C)), dict(grads, h0=dh, C0=dC, x=dx)

        assert grad_check(loss, params).max_rel_error <= 1e-6


class TestPacking:
    def test_round_trip(self):
        cell = init_cell(3, 4, 2, Rng(0), use_layer_norm=True)
        back = unpack_cell(pack_cell(cell))
        for k, v in cell.as_dict().items():
            assert np.array_equal(back[k], v)

    def test_gate_order(self):
        cell = init_cell(1, 2, None, Rng(0))
        W = pack_cell(cell)["W"]
        assert np.array_equal(W[2:4], cell.W_c) and np.array_equal(W[4:6], cell.W_f)


class TestOutputHead:
    def test_zero_head(self):
        assert output_head(_cell(2, 1), np.ones(2)) == 0.0

    def test_equal_logits(self):
        p = _cell(2, 1, out=2)
        assert np.allclose(output_head(p, np.ones(2), "classification"), [0.5, 0.5])

    def test_affine(self):
        p = _cell(1, 1)
        p.W_y[:] = 2.0
        p.b_y[:] = 1.0
        assert output_head(p, np.array([3.0])) == 7.0

    def test_missing_head(self):
        with pytest.raises(ContractError):
            output_head(_cell(2, 1, out=None), np.ones(2))


class TestShiftSchedule:
    def test_two_cells_over_four_steps(self):
        assert shift_schedule(4, 2).assignment == [0, 0, 1, 1]

    def test_block_arithmetic(self):
        s = shift_schedule(48, 8)
        assert s.block == 6 and s.assignment[7 - 1] == 1

    def test_single_cell(self):
        assert shift_schedule(30, 1).assignment == [0] * 30

    def test_one_cell_per_step(self):
        assert shift_schedule(30, 30).assignment == list(range(30))

    def test_uneven_blocks_cover_all_cells(self):
        s = shift_schedule(10, 4)
        assert s.block == 3 and s.assignment == [0, 0, 0, 1, 1, 1, 2, 2, 2, 3]

    @pytest.mark.parametrize("K", [0, 31])
    def test_bad_k(self, K):
        with pytest.raises(ContractError):
            shift_schedule(30, K)


class TestMixing:
    def _bank(self, K, T=4, logits=None, seed=0):
        cells = [init_cell(2, 3, 1, Rng(seed).child(k)) for k in range(K)]
        return MixBank(cells, np.zeros((T, K)) if logits is None else np.asarray(logits, dtype=float))

    def test_uniform(self):
        assert np.allclose(mixing_coefficients(self._bank(2)), 0.5)

    def test_peaked(self):
        lam = mixing_coefficients(self._bank(2, T=1, logits=[[10.0, -10.0]]))
        assert abs(lam[0, 0] - 1 / (1 + math.exp(-20))) < 1e-15
        assert abs(lam[0, 1] - 2.06e-9) < 1e-11

    def test_single_cell(self):
        assert np.array_equal(mixing_coefficients(self._bank(1)), np.ones((4, 1)))

    def test_vertex_returns_cell_exactly(self):
        bank = self._bank(3)
        lam = np.zeros((4, 3))
        lam[:, 1] = 1.0
        mixed = mix_params(bank, 2, lam)
        for k, v in bank.cells[1].as_dict().items():
            assert np.array_equal(getattr(mixed, k), v)

    def test_midpoint(self):
        c0, c1 = _cell(2, 1, 0.0), _cell(2, 1, 2.0)
        mixed = mix_cells([c0, c1], np.array([0.5, 0.5]))
        assert np.all(mixed.W_i == 1.0) and np.all(mixed.W_o == 1.0)

    def test_weighted_sum_oracle(self):
        bank = self._bank(3, logits=Rng(5).normal(size=(4, 3)))
        lam = mixing_coefficients(bank)
        mixed = mix_params(bank, 3)
        for name, v in mixed.as_dict().items():
            ref = np.zeros_like(v)
            for k in range(3):
                ref = ref + lam[2, k] * bank.cells[k].as_dict()[name]
            assert np.max(np.abs(v - ref)) <= 1e-12

    def test_step_out_of_range(self):
        with pytest.raises(ContractError):
            mix_params(self._bank(2), 5)

    def test_logit_shape_mismatch(self):
        with pytest.raises(ContractError):
            MixBank([_cell(1, 1)], np.zeros((3, 2)))


class TestTemporalEncoding:
    def test_origin(self):
        e = temporal_encoding(0, 24)
        assert e[0] == 0.0 and e[1] == 1.0

    def test_first_step(self):
        assert abs(temporal_encoding(1, 24)[0] - 0.841471) < 1e-6

    def test_pair_frequency(self):
        e = temporal_encoding(5, 24)
        angle = 5 / 10000 ** (2 / 24)
        assert abs(e[2] - math.sin(angle)) < 1e-15 and abs(e[3] - math.cos(angle)) < 1e-15
        assert abs(e[2] - 0.7316902) < 1e-6

    def test_vectorized(self):
        t = np.arange(1, 6)
        assert np.allclose(temporal_encoding(t, 8), np.stack([temporal_encoding(s, 8) for s in t]))

    def test_odd_dimension(self):
        with pytest.raises(ContractError):
            temporal_encoding(1, 5)


def test_cell_parameter_count():
    cell = init_cell(3, 2, 1, Rng(0), use_layer_norm=True)
    assert sum(v.size for v in cell.as_dict().values()) == cell_parameter_count(3, 2, 1, True)
    assert cell_parameter_count(3, 2, 1) == 51


def test_orthogonal_init_recurrent_blocks():
    cell = init_cell(3, 4, 1, Rng(1), orthogonal=True)
    for g in "icfo":
        U = getattr(cell, f"W_{g}")[:, :4]
        assert np.max(np.abs(U.T @ U - np.eye(4))) <= 1e-10
        assert np.all(getattr(cell, f"b_{g}") == 0)
