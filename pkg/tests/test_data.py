import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relmm.data import (INTERCEPT, CovariateSpec, LongitudinalDataset, complete_records,
                        load_csv, missing_pattern, write_csv)
from relmm.errors import InfeasibleError, ParseError, ValidationError

SPEC4 = CovariateSpec.build(time_invariant=["x1", "x2"], time_varying=["x3", "x4"],
                            missable=["x1", "x4"], intercept=False)


def write(tmp_path, text, name="d.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_spec_orders_time_invariant_first():
    spec = CovariateSpec.build(time_invariant=["a"], time_varying=["b"], missable=["a"])
    assert spec.names == (INTERCEPT, "a", "b")
    assert spec.p == 3 and spec.p1 == 2
    assert spec.missable == (False, True, False)
    with pytest.raises(ValidationError):
        CovariateSpec(("b", "a"), ("time_varying", "time_invariant"), (False, False))


def test_spec_round_trip_and_validation():
    assert CovariateSpec.from_dict(SPEC4.to_dict()) == SPEC4
    with pytest.raises(ValidationError):
        CovariateSpec.build(time_invariant=["a"], missable=["zz"])
    with pytest.raises(ValidationError):
        CovariateSpec.from_dict({"time_invariant": ["a"], "bogus": 1})
    with pytest.raises(ValidationError):
        CovariateSpec.build(time_invariant=["a", "a"])


def test_load_three_rows_fully_observed(tmp_path):
    path = write(tmp_path, "subject,time,y,x1,x2,x3,x4\n"
                           "1,1,0.5,1,0,1,2\n1,2,0.7,1,0,2,3\n1,3,0.9,1,0,3,4\n")
    d = load_csv(path, SPEC4)
    assert d.m == 1 and d.n_rows == 3
    assert not np.isnan(d.covariates).any() and not np.isnan(d.response).any()
    assert [o[0] for o in d.subjects[0].occasions] == [1, 2, 3]


def test_subject_level_missing_enters_m_i(tmp_path):
    path = write(tmp_path, "subject,time,y,x1,x2,x3,x4\n"
                           "1,1,0.5,NA,0,1,2\n1,2,0.7,NA,0,2,3\n2,1,1.0,3,1,1,1\n")
    pat = missing_pattern(load_csv(path, SPEC4))
    assert pat.subject_set(0) == {"x1"}
    assert pat.subject_set(1) == frozenset()


def test_duplicate_subject_time_is_rejected(tmp_path):
    path = write(tmp_path, "subject,time,y,x1,x2,x3,x4\n"
                           "1,2,0.5,1,0,1,2\n1,2,0.7,1,0,2,3\n")
    with pytest.raises(ValidationError, match="duplicate"):
        load_csv(path, SPEC4)


def test_time_invariant_must_not_vary(tmp_path):
    path = write(tmp_path, "subject,time,y,x1,x2,x3,x4\n"
                           "1,1,0.5,1,0,1,2\n1,2,0.7,2,0,2,3\n")
    with pytest.raises(ValidationError):
        load_csv(path, SPEC4)


def test_parse_errors_carry_line_numbers(tmp_path):
    path = write(tmp_path, "subject,time,y,x1,x2,x3,x4\n1,1,0.5,1,0,1,2\n1,2,oops,1,0,2,3\n")
    with pytest.raises(ParseError) as info:
        load_csv(path, SPEC4)
    assert info.value.line == 3
    path = write(tmp_path, "subject,time,y,x1,x2,x3,x4\n1,1,0.5,1,0\n", "short.csv")
    with pytest.raises(ParseError, match="line 2"):
        load_csv(path, SPEC4)
    path = write(tmp_path, "id,time,y\n", "hdr.csv")
    with pytest.raises(ParseError, match="line 1"):
        load_csv(path, SPEC4)


def test_missing_in_design_known_covariate_rejected(tmp_path):
    path = write(tmp_path, "subject,time,y,x1,x2,x3,x4\n1,1,0.5,1,0,NA,2\n")
    with pytest.raises(ValidationError, match="x3"):
        load_csv(path, SPEC4)


def test_all_missing_rows_dropped_and_counted(tmp_path):
    path = write(tmp_path, "subject,time,y,x1,x2,x3\n1,1,0.5,1,0,1\n1,2,NA,NA,NA,NA\n")
    spec = CovariateSpec.build(time_invariant=["x1", "x2"], time_varying=["x3"],
                               missable=["x1", "x2", "x3"])
    d = load_csv(path, spec)
    assert d.n_rows == 1 and d.dropped_rows == 1


def test_custom_na_token(tmp_path):
    path = write(tmp_path, "subject,time,y,x1,x2,x3,x4\n1,1,.,1,0,1,.\n1,2,1,1,0,2,3\n")
    d = load_csv(path, SPEC4, na_token=".")
    assert np.isnan(d.response[0]) and np.isnan(d.covariates[0, 3])


def _dataset(rows):
    return LongitudinalDataset.from_rows(rows, SPEC4)


NAN = float("nan")


def test_missing_pattern_no_missing():
    d = _dataset([(1, 1, 1.0, [1, 0, 1, 2]), (1, 2, 2.0, [1, 0, 2, 2])])
    pat = missing_pattern(d)
    assert not pat.any_row.any() and not pat.any_subject.any()


def test_missing_pattern_single_varying_cell():
    rows = [(i, t, 1.0, [1, 0, t, NAN if (i, t) == (2, 3) else 1.0])
            for i in (1, 2) for t in (1, 2, 3)]
    d = _dataset(rows)
    pat = missing_pattern(d)
    r = int(np.flatnonzero((d.subject_index == 1) & (d.time == 3))[0])
    assert pat.row_set(r) == {"x4"}
    assert pat.subject_set(1) == frozenset()
    assert pat.varying_set(r) == {"x4"}
    assert pat.any_row.sum() == 1


def test_missing_pattern_hand_enumeration():
    # p = 4, p1 = 2: x1 missing for the subject, x4 missing at t = 1
    d = _dataset([(1, 1, 1.0, [NAN, 0, 1, NAN]), (1, 2, 1.0, [NAN, 0, 2, 3.0])])
    pat = missing_pattern(d)
    assert pat.subject_set(0) == {"x1"}
    assert pat.row_set(0) == {"x1", "x4"}
    assert pat.varying_set(0) == {"x4"}
    assert pat.row_set(1) == {"x1"}


def test_complete_records_counts():
    rows = [(i, t, 1.0, [1, 0, t, NAN if (i, t) == (2, 2) else 1.0])
            for i in (1, 2) for t in (1, 2, 3)]
    d = _dataset(rows)
    cc = complete_records(d)
    assert cc.n_rows == 5
    assert complete_records(cc).equals(cc)


def test_complete_records_identity_and_empty():
    d = _dataset([(1, 1, 1.0, [1, 0, 1, 2]), (2, 1, 2.0, [1, 1, 1, 2])])
    assert complete_records(d).equals(d)
    d = _dataset([(1, 1, 1.0, [1, 0, 1, NAN]), (2, 1, 2.0, [NAN, 1, 1, 2])])
    with pytest.raises(InfeasibleError, match="no complete records"):
        complete_records(d)


def test_row_requires_some_observed_value():
    with pytest.raises(ValidationError):
        _dataset([(1, 1, NAN, [NAN, NAN, NAN, NAN])])


def test_rows_sorted_by_time_within_subject():
    d = _dataset([(7, 3, 1.0, [1, 0, 3, 1]), (7, 1, 2.0, [1, 0, 1, 1]), (5, 2, 3.0, [2, 1, 2, 1])])
    assert list(d.subject_ids) == [7, 5]
    assert list(d.time[:2]) == [1, 3]


cell = st.one_of(st.just(NAN), st.floats(-1e6, 1e6, allow_nan=False).filter(lambda v: v != 0))


@st.composite
def datasets(draw):
    m = draw(st.integers(1, 4))
    rows = []
    for i in range(m):
        x1 = draw(cell)
        x2 = draw(st.floats(-5, 5))
        ts = sorted(draw(st.sets(st.integers(1, 6), min_size=1, max_size=4)))
        for t in ts:
            y = draw(st.one_of(st.just(NAN), st.floats(-1e3, 1e3)))
            x4 = draw(cell)
            if all(np.isnan(v) for v in (y, x1, x4)):
                y = 1.0
            rows.append((f"s{i}", t, y, [x1, x2, float(t), x4]))
    return _dataset(rows)


@settings(max_examples=40, deadline=None)
@given(datasets())
def test_csv_round_trip(tmp_path_factory, d):
    path = tmp_path_factory.mktemp("rt") / "d.csv"
    write_csv(d, path)
    assert load_csv(path, SPEC4).equals(d)


@settings(max_examples=40, deadline=None)
@given(datasets())
def test_pattern_identities_and_idempotence(d):
    pat = missing_pattern(d)
    again = missing_pattern(d)
    assert np.array_equal(pat.cov_missing, again.cov_missing)
    # M_i = M_it restricted to the time-invariant block, and M_it = M_i u M_it2
    for r in range(d.n_rows):
        i = int(d.subject_index[r])
        ti = {n for n in pat.row_set(r) if SPEC4.names.index(n) < SPEC4.p1}
        assert ti == pat.subject_set(i)
        assert pat.row_set(r) == pat.subject_set(i) | pat.varying_set(r)
        assert not pat.subject_set(i) & pat.varying_set(r)
    # pattern depends only on which cells are absent
    shifted = d.replace(covariates=d.covariates + 1.0, response=d.response * 2.0)
    assert np.array_equal(missing_pattern(shifted).cov_missing, pat.cov_missing)


@settings(max_examples=40, deadline=None)
@given(datasets())
def test_complete_records_idempotent(d):
    try:
        cc = complete_records(d)
    except InfeasibleError:
        return
    assert complete_records(cc).equals(cc)
    assert not np.isnan(cc.covariates).any() and not np.isnan(cc.response).any()
