import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusereg.data import (
    ColumnSchema,
    FusedDataset,
    Record,
    ReplicateSet,
    load_fused_csv,
    validate,
    write_fused_csv,
)
from fusereg.errors import EmptySource, InputError, LayoutMismatch, MalformedCell, MissingColumn, PatternViolation
from fusereg.nuisance import PropensityFit, fit_propensity
from fusereg.simulation import SCHEMA, generate_dataset

SCHEMA2 = ColumnSchema(("V1", "V2"), ("L",), "Y")
GOOD = "R,Y,L,V1,V2\n1,2.0,,1,0.3\n0,,1.1,1,-0.2\n1,2.0,,1,0.3\n0,,1.1,1,-0.2\n"


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_minimal(tmp_path):
    ds = load_fused_csv(write(tmp_path, GOOD), SCHEMA2)
    assert (ds.n, ds.n_a, ds.n_b) == (4, 2, 2)
    assert ds.row(0) == Record(1, 2.0, None, {"V1": 1.0, "V2": 0.3})
    assert ds.row(1).l == (1.1,)


def test_columns_in_any_order(tmp_path):
    text = "V2,L,R,V1,Y\n0.3,,1,1,2.0\n-0.2,1.1,0,1,\n"
    ds = load_fused_csv(write(tmp_path, text), SCHEMA2)
    assert ds.v.tolist() == [[1.0, 0.3], [1.0, -0.2]]


def test_pattern_violation_r1_with_l(tmp_path):
    bad = GOOD.replace("1,2.0,,1,0.3\n0", "1,2.0,0.5,1,0.3\n0", 1)
    with pytest.raises(PatternViolation):
        load_fused_csv(write(tmp_path, bad), SCHEMA2)


@pytest.mark.parametrize(
    "text, err",
    [
        ("R,Y,L,V1\n1,2,,1\n0,,1,1\n", MissingColumn),
        ("R,Y,L,V1,V2\n1,abc,,1,0\n0,,1,1,0\n", MalformedCell),
        ("R,Y,L,V1,V2\n1,nan,,1,0\n0,,1,1,0\n", MalformedCell),
        ("R,Y,L,V1,V2\n2,1,,1,0\n0,,1,1,0\n", PatternViolation),
        ("R,Y,L,V1,V2\n0,,1,1,0\n0,,1,1,0\n", EmptySource),
        ("R,Y,L,V1,V2\n1,1,,1,0\n1,2,,1,0\n", EmptySource),
        ("R,Y,L,V1,V2\n1,1,,,0\n0,,1,1,0\n", PatternViolation),
        ("R,Y,L,V1,V2\n", EmptySource),
    ],
)
def test_load_errors(tmp_path, text, err):
    with pytest.raises(err):
        load_fused_csv(write(tmp_path, text), SCHEMA2)


def test_missing_column_names_it(tmp_path):
    with pytest.raises(MissingColumn, match="V2"):
        load_fused_csv(write(tmp_path, "R,Y,L,V1\n1,2,,1\n0,,1,1\n"), SCHEMA2)


def test_missing_file_is_input_error(tmp_path):
    with pytest.raises(InputError):
        load_fused_csv(tmp_path / "nope.csv", SCHEMA2)


def test_round_trip_bit_identical(tmp_path, params):
    ds = generate_dataset(params, 500, 4)
    path = tmp_path / "rt.csv"
    write_fused_csv(ds, path)
    back = load_fused_csv(path, SCHEMA)
    assert back == ds
    assert back.v.tobytes() == ds.v.tobytes() and back.y.tobytes() == ds.y.tobytes()
    # deterministic load
    assert load_fused_csv(path, SCHEMA) == back


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.floats(-1e6, 1e6), st.floats(-1e6, 1e6)), min_size=2, max_size=30))
def test_round_trip_property(tmp_path_factory, rows):
    rows = [(True, 0.0, 0.0), (False, 0.0, 0.0)] + rows
    r = np.array([int(a) for a, _, _ in rows])
    vals = np.array([[b, c] for _, b, c in rows])
    ds = FusedDataset.from_full(ColumnSchema(("V1",), ("L",), "Y"), r, vals[:, :1], vals[:, 1], vals[:, 1])
    path = tmp_path_factory.mktemp("rt") / "x.csv"
    write_fused_csv(ds, path)
    assert load_fused_csv(path, ds.schema) == ds


def test_dataset_is_immutable(ds500):
    with pytest.raises(ValueError):
        ds500.v[0, 0] = 1.0
    with pytest.raises(ValueError):
        ds500.y[0] = 1.0


def test_records_round_trip(ds500):
    rebuilt = FusedDataset.from_records(ds500.schema, list(ds500.rows()))
    assert rebuilt == ds500
    assert [ds500.row(i) for i in (0, 7, 499)] == [list(ds500.rows())[i] for i in (0, 7, 499)]


def test_take_resamples_rows(ds500):
    sub = ds500.take([3, 3, 0, 10])
    assert sub.n == 4
    assert sub.row(0) == sub.row(1) == ds500.row(3)


def test_schema_rules():
    with pytest.raises(InputError):
        ColumnSchema(("A", "A"), ("L",), "Y")
    with pytest.raises(InputError):
        ColumnSchema(("A",), (), "Y")
    s = ColumnSchema(("A", "C"), ("L1", "L2"), "Y")
    assert (s.q, s.p) == (3, 2)
    assert ColumnSchema.from_dict(s.to_dict()) == s
    with pytest.raises(InputError):
        ColumnSchema.from_dict({"v_names": ["A"]})


def test_replicate_set_layout(params):
    a, b = generate_dataset(params, 50, 1), generate_dataset(params, 50, 2)
    rs = ReplicateSet((a, b))
    assert rs.m == 2 and rs.schema == SCHEMA
    with pytest.raises(LayoutMismatch):
        ReplicateSet((a, generate_dataset(params, 60, 3)))


def test_validate_balanced_no_warnings():
    rng = np.random.default_rng(0)
    n = 400
    r = np.tile([0, 1], n // 2)
    ds = FusedDataset.from_full(SCHEMA2, r, rng.normal(size=(n, 2)), rng.normal(size=n), rng.normal(size=n))
    flat = PropensityFit(("1",), np.array([0.0]), 0.0, True, 0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        rep = validate(ds, 0.05, flat)
    assert rep.positivity_share == 0.0 and rep.warnings == []
    assert (rep.n_a, rep.n_b) == (200, 200)


def test_validate_scenario_positivity(ds2000):
    prop = fit_propensity(ds2000, ("1", "A", "C"))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = validate(ds2000, 0.01, prop)
    assert rep.positivity_share < 0.01
    assert set(rep.summaries) == {"A", "C", "Y", "L"}


def test_validate_warns_on_extremes(ds500):
    steep = PropensityFit(("1", "A"), np.array([0.0, 40.0]), 0.0, True, 0)
    with pytest.warns(UserWarning):
        rep = validate(ds500, 0.01, steep)
    assert rep.positivity_share > 0


def test_validate_delta_range(ds500):
    with pytest.raises(ValueError):
        validate(ds500, 0.6)
