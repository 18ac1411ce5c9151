import numpy as np
import pytest

from cdg.data import (
    AlignedPanel,
    LagSpec,
    PriceSeries,
    align,
    default_lags,
    feature_row,
    load_csv,
    load_panel,
    save_panel,
    split,
)
from cdg.errors import (
    EmptyIntersection,
    InsufficientHistory,
    MissingColumn,
    NonPositivePrice,
    PanelTooShort,
    UnsortableTimestamps,
)


def write_csv(path, rows, header="timestamp,close"):
    path.write_text(header + "\n" + "\n".join(rows) + "\n")
    return path


def series(asset, ts, closes):
    return PriceSeries(asset, np.asarray(ts, dtype=np.int64), np.asarray(closes, dtype=float))


def flat_panel(n, n_assets=1, price=100.0):
    grid = np.arange(n, dtype=np.int64) * 60
    closes = np.full((n, n_assets), price)
    return AlignedPanel(tuple(f"a{i}" for i in range(n_assets)), grid, closes)


class TestLoadCsv:
    def test_two_rows(self, tmp_path):
        p = write_csv(tmp_path / "x.csv", ["0,10", "60,10.1"])
        s = load_csv(p)
        assert len(s) == 2
        np.testing.assert_array_equal(s.timestamps, [0, 60])
        np.testing.assert_allclose(s.close, [10.0, 10.1])

    def test_negative_price(self, tmp_path):
        p = write_csv(tmp_path / "x.csv", ["0,10", "60,-1"])
        with pytest.raises(NonPositivePrice):
            load_csv(p)

    def test_duplicate_timestamp(self, tmp_path):
        p = write_csv(tmp_path / "x.csv", ["0,10", "60,10.1", "60,10.2"])
        with pytest.raises(UnsortableTimestamps):
            load_csv(p)

    def test_missing_column(self, tmp_path):
        p = write_csv(tmp_path / "x.csv", ["0,10"], header="time,price")
        with pytest.raises(MissingColumn):
            load_csv(p)

    def test_empty_file(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("")
        with pytest.raises(MissingColumn):
            load_csv(p)

    def test_unsorted_input_is_sorted(self, tmp_path):
        p = write_csv(tmp_path / "x.csv", ["120,11", "0,10", "60,10.5"])
        s = load_csv(p)
        np.testing.assert_array_equal(s.timestamps, [0, 60, 120])
        np.testing.assert_allclose(s.close, [10.0, 10.5, 11.0])

    def test_iso_timestamps(self, tmp_path):
        p = write_csv(tmp_path / "x.csv", ["1970-01-01T00:00:00Z,10", "1970-01-01T00:01:00Z,11"])
        s = load_csv(p)
        np.testing.assert_array_equal(s.timestamps, [0, 60])

    def test_custom_columns(self, tmp_path):
        p = write_csv(tmp_path / "x.csv", ["0,3.5"], header="ts,px")
        s = load_csv(p, timestamp_col="ts", close_col="px", asset_id="BTC")
        assert s.asset_id == "BTC"
        assert s.close[0] == 3.5


class TestAlign:
    def test_identical_grids(self):
        a = series("a", [0, 60, 120], [1, 2, 3])
        b = series("b", [0, 60, 120], [4, 5, 6])
        panel = align([a, b], mode="intersect")
        np.testing.assert_array_equal(panel.grid, [0, 60, 120])
        assert panel.assets == ("a", "b")
        np.testing.assert_array_equal(panel.closes, [[1, 4], [2, 5], [3, 6]])

    def test_intersect_drops_unshared(self):
        a = series("a", [0, 60, 120], [1, 2, 3])
        b = series("b", [60, 120, 180], [5, 6, 7])
        panel = align([a, b], mode="intersect")
        np.testing.assert_array_equal(panel.grid, [60, 120])
        np.testing.assert_array_equal(panel.closes, [[2, 5], [3, 6]])

    def test_empty_intersection(self):
        a = series("a", [0, 60], [1, 2])
        b = series("b", [120, 180], [3, 4])
        with pytest.raises(EmptyIntersection):
            align([a, b], mode="intersect")

    def test_forward_fill_carries_last_close(self):
        a = series("a", [0, 60, 180], [1, 2, 4])
        b = series("b", [0, 120, 180], [10, 12, 13])
        panel = align([a, b], mode="forward_fill")
        np.testing.assert_array_equal(panel.grid, [0, 60, 120, 180])
        np.testing.assert_array_equal(panel.closes, [[1, 10], [2, 10], [2, 12], [4, 13]])

    def test_forward_fill_drops_leading_rows(self):
        a = series("a", [0, 60, 120], [1, 2, 3])
        b = series("b", [60, 120], [5, 6])
        panel = align([a, b], mode="forward_fill")
        np.testing.assert_array_equal(panel.grid, [60, 120])

    def test_idempotent_single_series(self):
        a = series("a", [0, 60, 120], [1, 2, 3])
        once = align([a])
        twice = align([PriceSeries("a", once.grid, once.closes[:, 0])])
        np.testing.assert_array_equal(once.grid, twice.grid)
        np.testing.assert_array_equal(once.closes, twice.closes)


class TestFeatureRow:
    def test_constant_prices_all_zero(self):
        panel = flat_panel(50)
        f = feature_row(panel, 40, LagSpec((1, 5, 10)))
        np.testing.assert_allclose(f, 0.0, atol=1e-15)
        assert f.shape == (6,)

    def test_one_percent_move(self):
        grid = np.arange(3, dtype=np.int64) * 60
        closes = np.array([[100.0], [100.0], [101.0]])
        panel = AlignedPanel(("a",), grid, closes)
        f = feature_row(panel, 2, LagSpec((1,)))
        assert f[0] == pytest.approx(0.01)

    def test_hand_computed_lag2(self):
        grid = np.arange(3, dtype=np.int64) * 60
        closes = np.array([[100.0], [102.0], [104.0]])
        panel = AlignedPanel(("a",), grid, closes)
        f = feature_row(panel, 2, LagSpec((2,)))
        assert f[0] == pytest.approx(0.04)
        assert f[1] == pytest.approx(104.0 / 102.0 - 1.0, rel=1e-12)  # mean(100,102,104)=102

    def test_paper_exact_divisor(self):
        grid = np.arange(3, dtype=np.int64) * 60
        closes = np.array([[100.0], [102.0], [104.0]])
        panel = AlignedPanel(("a",), grid, closes)
        f = feature_row(panel, 2, LagSpec((2,)), paper_exact_m=True)
        assert f[1] == pytest.approx(104.0 / 153.0 - 1.0, rel=1e-12)  # sum/l = 306/2

    def test_insufficient_history(self):
        panel = flat_panel(50)
        with pytest.raises(InsufficientHistory):
            feature_row(panel, 5, LagSpec((10,)))

    def test_no_lookahead(self):
        rng = np.random.default_rng(0)
        closes = np.exp(rng.normal(0, 0.01, size=(100, 2)).cumsum(axis=0)) * 100
        grid = np.arange(100, dtype=np.int64) * 60
        panel = AlignedPanel(("a", "b"), grid, closes)
        lags = LagSpec((1, 3, 7))
        f1 = feature_row(panel, 50, lags)
        tampered = closes.copy()
        tampered[51:] = 1e9
        f2 = feature_row(AlignedPanel(("a", "b"), grid, tampered), 50, lags)
        np.testing.assert_array_equal(f1, f2)

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        closes = np.exp(rng.normal(0, 0.01, size=(60, 1)).cumsum(axis=0)) * 50
        panel = AlignedPanel(("a",), np.arange(60, dtype=np.int64), closes)
        lags = LagSpec((2, 5))
        a = feature_row(panel, 30, lags)
        b = feature_row(panel, 30, lags)
        np.testing.assert_array_equal(a, b)

    def test_feature_dim(self):
        lags = LagSpec((1, 2, 20))
        assert lags.feature_dim(3) == 18
        panel = flat_panel(40, n_assets=3)
        assert feature_row(panel, 30, lags).shape == (18,)

    def test_default_lags(self):
        spec = default_lags(bars_per_day=1440)
        assert spec.lags[0] == 1
        assert 720 in spec.lags
        assert 1440 in spec.lags and 2160 in spec.lags and 10080 in spec.lags
        assert list(spec.lags) == sorted(set(spec.lags))


class TestSplit:
    def test_basic(self):
        train, test = split(flat_panel(1000), 100, 50)
        assert (train.start, train.stop) == (0, 850)
        assert (test.start, test.stop) == (900, 1000)

    def test_too_short(self):
        with pytest.raises(PanelTooShort):
            split(flat_panel(100), 100, 50)

    def test_zero_gap(self):
        train, test = split(flat_panel(200), 50, 0)
        assert (train.start, train.stop) == (0, 150)
        assert (test.start, test.stop) == (150, 200)

    def test_max_lag_counts(self):
        with pytest.raises(PanelTooShort):
            split(flat_panel(200), 100, 50, max_lag=50)


class TestPanelCache:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        closes = np.exp(rng.normal(0, 0.01, size=(30, 2)).cumsum(axis=0)) * 100
        panel = AlignedPanel(("x", "y"), np.arange(30, dtype=np.int64) * 60, closes)
        path = tmp_path / "panel.bin"
        save_panel(panel, path)
        back = load_panel(path)
        assert back.assets == panel.assets
        np.testing.assert_array_equal(back.grid, panel.grid)
        np.testing.assert_array_equal(back.closes, panel.closes)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"not a panel cache at all")
        with pytest.raises(PanelTooShort):
            load_panel(path)
