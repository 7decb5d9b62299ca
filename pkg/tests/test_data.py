import numpy as np
import pytest

from didc.data import (
    CrossSection,
    PanelDataset,
    PanelError,
    first_difference,
    load_panel,
    slice_period,
    write_panel,
)

from conftest import make_panel


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_minimal_file_loads(tmp_path):
    f = _write(tmp_path / "p.csv", "unit,period,y,z\na,0,1.0,0.2\na,1,2.0,0.2\nb,0,3.0,-0.1\nb,1,4.0,-0.1\n")
    with pytest.raises(PanelError, match="2 units strictly"):
        # one unit per side is below the two-per-side minimum
        load_panel(f)
    f = _write(
        tmp_path / "q.csv",
        "unit,period,y,z\n" + "".join(f"{u},{t},{i + t},{z}\n" for i, (u, z) in
                                      enumerate([("a", 0.2), ("b", 0.3), ("c", -0.1), ("d", -0.4)])
                                      for t in (0, 1)),
    )
    p = load_panel(f)
    assert p.n == 4
    assert p.period_order == ("0", "1")
    assert p.outcomes["1"][2] == 3.0


def test_inconsistent_running_variable(tmp_path):
    f = _write(tmp_path / "p.csv", "unit,period,y,z\n7,0,1,0.3\n7,1,1,0.4\n")
    with pytest.raises(PanelError, match="inconsistent running variable"):
        load_panel(f)


def test_ragged_panel(tmp_path):
    f = _write(tmp_path / "p.csv", "unit,period,y,z\n1,0,1,0.1\n1,1,1,0.1\n2,0,1,-0.2\n3,0,1,0.3\n3,1,1,0.3\n")
    with pytest.raises(PanelError, match="ragged panel"):
        load_panel(f)


def test_duplicate_and_missing_column(tmp_path):
    f = _write(tmp_path / "p.csv", "unit,period,y,z\n1,0,1,0.1\n1,0,2,0.1\n")
    with pytest.raises(PanelError, match="duplicate"):
        load_panel(f)
    g = _write(tmp_path / "g.csv", "unit,period,y\n1,0,1\n")
    with pytest.raises(PanelError, match="missing column"):
        load_panel(g)
    h = _write(tmp_path / "h.csv", "unit,period,y,z\n1,0,abc,0.1\n")
    with pytest.raises(PanelError, match="non-numeric"):
        load_panel(h)


def test_column_remap_and_roundtrip(tmp_path, fiscal_csv):
    schema = {"unit": "municipality", "period": "year", "z": "population", "y": "taxes"}
    p = load_panel(fiscal_csv, schema, z0=5000)
    assert p.period_order == ("1998", "1999", "2000", "2001")
    out = tmp_path / "back.csv"
    write_panel(p, out)
    q = load_panel(out, z0=5000)
    assert q.unit_ids == p.unit_ids
    np.testing.assert_array_equal(q.z, p.z)
    for t in p.period_order:
        np.testing.assert_array_equal(q.outcomes[t], p.outcomes[t])


def test_first_difference_arithmetic():
    p = make_panel([0.2, 0.5, -0.3, -0.6], {"0": [1.0, 0, 0, 0], "1": [3.5, 0, 0, 0]})
    cs = first_difference(p, "1", "0")
    assert (cs.z[0], cs.y[0]) == (0.2, 2.5)


def test_first_difference_identity_is_zero():
    y = np.arange(6.0)
    p = make_panel([-3, -2, -1, 1, 2, 3], {"0": y, "1": y})
    assert np.all(first_difference(p, "1", "0").y == 0)


def test_first_difference_requires_order():
    p = make_panel([-3, -2, 1, 2], {"0": np.zeros(4), "1": np.ones(4)})
    with pytest.raises(PanelError):
        first_difference(p, "0", "1")


def test_centering():
    p = make_panel([4800, 4900, 5100, 5200], {"a": np.zeros(4), "b": np.ones(4)}, z0=5000)
    assert first_difference(p, "b", "a").z[0] == -200
    np.testing.assert_array_equal(slice_period(p, "a").z, [-200, -100, 100, 200])


def test_slice_period_raw_outcomes_and_unknown_label():
    p = make_panel([-1, -2, 1, 2], {"0": [5, 6, 7, 8], "1": np.zeros(4)})
    cs = slice_period(p, "0")
    np.testing.assert_array_equal(cs.y, [5, 6, 7, 8])
    with pytest.raises(PanelError, match="unknown period"):
        slice_period(p, "t=9")


def test_cutoff_assignment():
    cs = CrossSection(np.array([-0.1, 0.0, 0.1]), np.zeros(3))
    assert cs.above.tolist() == [False, True, True]
    cs = CrossSection(np.array([-0.1, 0.0, 0.1]), np.zeros(3), cutoff_treated=False)
    assert cs.above.tolist() == [False, False, True]


def test_arrays_are_read_only():
    p = make_panel([-1, -2, 1, 2], {"0": np.zeros(4), "1": np.ones(4)})
    with pytest.raises(ValueError):
        p.z[0] = 3.0
    with pytest.raises(ValueError):
        p.outcomes["0"][0] = 3.0


def test_panel_validation():
    with pytest.raises(PanelError, match="duplicate"):
        PanelDataset(("a", "a", "b", "c"), np.array([-1, -2, 1, 2.0]),
                     {"0": np.zeros(4), "1": np.zeros(4)}, 0.0, ("0", "1"))
    with pytest.raises(PanelError):
        make_panel([-1, -2, 1, 2], {"0": np.zeros(4)})
    with pytest.raises(PanelError):
        make_panel([-1, -2, 1, 2], {"0": [0, 0, np.nan, 0], "1": np.zeros(4)})


def test_take_relabels_units():
    p = make_panel([-1, -2, 1, 2], {"0": [1, 2, 3, 4], "1": [5, 6, 7, 8]})
    q = p.take(np.array([0, 0, 1, 2, 3, 3]))
    assert len(set(q.unit_ids)) == 6
    np.testing.assert_array_equal(q.outcomes["1"], [5, 5, 6, 7, 8, 8])
