import numpy as np
import pytest
import torch

from vibrancy.stve import (GRAPH_VARIANTS, GRU_VARIANTS, TIME_WIDTH, STVEFusion, assemble_vibrancy, build_stve,
                           encode_time, f2_width, sensor_encoding, time_onehot)


class TestTime:
    def test_wednesday_afternoon(self):
        row = time_onehot(np.array(["2024-05-15T13"], dtype="datetime64[h]"))[0]
        assert set(np.flatnonzero(row)) == {2, 7 + 13}

    def test_full_year_rows(self):
        ts = np.datetime64("2023-01-01T00", "h") + np.arange(8760)
        X = time_onehot(ts)
        assert X.shape == (8760, TIME_WIDTH)
        assert np.all(X.sum(1) == 2)
        assert np.all(X[:, :7].sum(1) == 1) and np.all(X[:, 7:].sum(1) == 1)
        brute_dow = np.array([d.weekday() for d in ts.astype("datetime64[s]").astype(object)])
        brute_hod = np.array([d.hour for d in ts.astype("datetime64[s]").astype(object)])
        assert np.array_equal(X[:, :7].argmax(1), brute_dow)
        assert np.array_equal(X[:, 7:].argmax(1), brute_hod)

    def test_window_crossing_into_monday(self):
        # anchor Sunday 2024-05-19 20:00, p=6, q=6 covers 15:00 Sunday .. 02:00 Monday
        X = encode_time(np.datetime64("2024-05-19T20", "h"), 6, 6)
        assert X.shape == (12, 31)
        dow = X[:, :7].argmax(1)
        assert dow.tolist() == [6] * 9 + [0] * 3
        assert X[9, 7 + 0] == 1.0


def test_sensor_encoding_is_identity():
    assert np.array_equal(sensor_encoding(4), np.eye(4))


class TestAssemble:
    def test_concat(self):
        obs, fc = np.random.rand(6, 8), np.random.rand(6, 8)
        blk = assemble_vibrancy(obs, fc)
        assert blk.values.shape == (12, 8) and blk.p == 6 and blk.source == "forecaster"
        assert blk.values[:6].tobytes() == obs.tobytes()

    def test_width_mismatch(self):
        with pytest.raises(ValueError):
            assemble_vibrancy(np.zeros((6, 8)), np.zeros((6, 7)))

    def test_unknown_source(self):
        with pytest.raises(ValueError):
            assemble_vibrancy(np.zeros((1, 2)), np.zeros((1, 2)), source="oracle")


def _fusion(variant, n_s=5, d=4, d_v=3, seed=0):
    torch.manual_seed(seed)
    f = STVEFusion(variant, n_s, d, d_v)
    # non-trivial running statistics
    f.train()
    f(torch.randn(8, 7, 31), torch.randn(8, 7, d_v))
    return f.eval()


def _inputs(L=7, d_v=3, seed=1):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(L, 31, generator=g), torch.randn(L, d_v, generator=g)


@pytest.mark.parametrize("variant", ["STVE", "STE", "SVE", "TVE", "TE", "VE"])
def test_matches_brute_force_loop(variant):
    f = _fusion(variant)
    zt, zv = _inputs()
    with torch.no_grad():
        out = build_stve(sensor_encoding(5), zt, zv, f, variant)
        assert out.shape == (5, 7, 4)
        for s in range(5):
            e_s = torch.zeros(1, 5)
            e_s[0, s] = 1.0
            f1 = f.f1(e_s)[0] if f.f1 is not None else 0.0
            for tau in range(7):
                row = f.f2_input(zt[tau:tau + 1], zv[tau:tau + 1])
                assert torch.equal(out[s, tau], f1 + f.f2(row)[0])


def test_f2_widths():
    d = 8
    assert {v: f2_width(v, d) for v in ("STVE", "STE", "SVE")} == {"STVE": 39, "STE": 31, "SVE": 8}
    assert f2_width("TVE", d) == 39 and f2_width("TE", d) == 31 and f2_width("VE", d) == 8
    assert _fusion("STVE", d_v=8).f2[0].in_features == 39


def test_shapes_12_sensors():
    f = _fusion("STVE", n_s=12, d=8, d_v=8)
    zt, zv = torch.randn(12, 31), torch.randn(12, 8)
    with torch.no_grad():
        assert build_stve(sensor_encoding(12), zt, zv, f, "STVE").shape == (12, 12, 8)
        assert build_stve(sensor_encoding(12), zt[None].repeat(3, 1, 1), zv[None].repeat(3, 1, 1),
                          f, "STVE").shape == (3, 12, 12, 8)


def test_zero_parameters_give_zero_tensor():
    f = STVEFusion("STVE", 4, 3, 2)
    with torch.no_grad():
        for p in f.parameters():
            p.zero_()
    f.eval()
    out = build_stve(sensor_encoding(4), torch.randn(5, 31), torch.randn(5, 2), f, "STVE")
    assert not out.any()


def test_sensor_permutation():
    f = _fusion("STE")
    zt, _ = _inputs()
    perm = torch.tensor([3, 0, 4, 1, 2])
    with torch.no_grad():
        base = build_stve(sensor_encoding(5), zt, None, f, "STE")
        permuted = build_stve(sensor_encoding(5)[perm.numpy()], zt, None, f, "STE")
    assert torch.equal(permuted, base[perm])


def test_temporal_variants_replicate_across_sensors():
    f = _fusion("TVE")
    zt, zv = _inputs()
    with torch.no_grad():
        out = build_stve(None, zt, zv, f, "TVE")
    assert torch.equal(out[0], out[4])


def test_errors():
    with pytest.raises(ValueError):
        STVEFusion("XYZ", 3, 2, 2)
    with pytest.raises(ValueError):
        STVEFusion("NONE", 3, 2, 2)
    f = _fusion("STVE")
    with pytest.raises(ValueError):
        build_stve(sensor_encoding(5), *_inputs(), f, "STE")
    with pytest.raises(ValueError):
        f.temporal(torch.zeros(1, 2, 31), torch.zeros(1, 2, 9))
    with pytest.raises(ValueError):
        f.temporal(None, torch.zeros(1, 2, 3))


def test_variant_families():
    assert set(GRU_VARIANTS) & set(GRAPH_VARIANTS) == {"NONE"}
