from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nmadetect.data import (
    Arm,
    DatasetError,
    DisconnectedNetworkError,
    NetworkDataset,
    Study,
    connectivity_check,
    load_dataset,
    observed_proportions,
    write_dataset,
)
from oracles import union_find_components


def _write_csv(path, rows):
    path.write_text("study,treatment,events,total\n" + "\n".join(rows) + "\n")


def test_smoking_dataset_shape(smoking):
    assert smoking.num_treatments == 4
    assert smoking.n_studies == 24
    assert smoking.n_arms == 50
    # numeric treatment tokens keep their natural order
    assert smoking.treatment_labels == ("1", "2", "3", "4")
    s3 = smoking.study("3")
    assert [(a.treatment, a.events, a.total) for a in s3.arms] == [(1, 75, 731), (3, 363, 714)]


def test_arm_invariants():
    with pytest.raises(DatasetError):
        Arm(treatment=1, events=5, total=4)
    with pytest.raises(DatasetError):
        Arm(treatment=1, events=-1, total=4)
    with pytest.raises(DatasetError):
        Arm(treatment=1, events=0, total=0)
    assert Arm(treatment=1, events=0, total=1).proportion == 0.0


def test_study_duplicate_treatment_rejected():
    with pytest.raises(DatasetError):
        Study(id="1", arms=(Arm(1, 0, 5), Arm(1, 1, 5)))


def test_zero_cells_are_valid(tmp_path):
    p = tmp_path / "zeros.csv"
    _write_csv(p, ["1,1,0,30", "1,2,0,25"])
    ds = load_dataset(p)
    assert ds.n_studies == 1
    assert [a.events for a in ds.studies[0].arms] == [0, 0]


def test_disconnected_reports_components(tmp_path):
    p = tmp_path / "disc.csv"
    _write_csv(p, ["1,1,1,10", "1,2,2,10", "2,3,3,10", "2,4,4,10"])
    with pytest.raises(DisconnectedNetworkError) as err:
        load_dataset(p)
    assert [set(c) for c in err.value.components] == [{1, 2}, {3, 4}]


def test_duplicate_row_rejected(tmp_path):
    p = tmp_path / "dup.csv"
    _write_csv(p, ["1,1,1,10", "1,1,2,10"])
    with pytest.raises(DatasetError, match="duplicate"):
        load_dataset(p)


def test_events_above_total_rejected(tmp_path):
    p = tmp_path / "bad.csv"
    _write_csv(p, ["1,1,11,10", "1,2,2,10"])
    with pytest.raises(DatasetError):
        load_dataset(p)


def test_parse_failure(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("study,treatment,events,total\n1,1,x,10\n")
    with pytest.raises(DatasetError, match="malformed"):
        load_dataset(p)
    q = tmp_path / "hdr.csv"
    q.write_text("a,b\n1,2\n")
    with pytest.raises(DatasetError, match="header"):
        load_dataset(q)


def test_non_numeric_tokens_use_first_appearance(tmp_path):
    p = tmp_path / "toks.csv"
    _write_csv(p, ["1,placebo,1,10", "1,drugA,2,10", "2,drugA,1,10", "2,drugB,2,10"])
    ds = load_dataset(p)
    assert ds.treatment_labels == ("placebo", "drugA", "drugB")
    assert ds.studies[0].arms[0].treatment == 1


def test_csv_roundtrip_bit_exact(smoking, tmp_path):
    out = tmp_path / "rt.csv"
    write_dataset(smoking, out)
    again = load_dataset(out)
    assert again == smoking
    # loading the same file twice gives identical index assignments
    assert load_dataset(out) == again


def test_json_roundtrip(smoking, tmp_path):
    out = tmp_path / "rt.json"
    write_dataset(smoking, out, format="json")
    again = load_dataset(out, format="json")
    assert again == smoking


def test_json_labels_give_explicit_order(tmp_path):
    doc = {
        "treatments": ["B", "A"],
        "studies": [
            {"id": "1", "arms": [{"treatment": "A", "events": 1, "total": 10},
                                 {"treatment": "B", "events": 2, "total": 10}]},
        ],
    }
    p = tmp_path / "lab.json"
    import json

    p.write_text(json.dumps(doc))
    ds = load_dataset(p)
    assert ds.treatment_labels == ("B", "A")
    assert {a.treatment for a in ds.studies[0].arms} == {1, 2}
    assert ds.studies[0].baseline == 1  # the arm labelled B


def test_observed_proportions(smoking):
    props = observed_proportions(smoking)
    assert len(props.values) == 50
    assert props.values[0] == ("1", 1, 9 / 140)
    assert all(0.0 <= x <= 1.0 for _, _, x in props.values)
    assert props.for_study("3") == [75 / 731, 363 / 714]


def test_connectivity_star():
    studies = tuple(
        Study(id=str(i), arms=(Arm(1, 1, 10), Arm(t, 1, 10)))
        for i, t in enumerate([2, 3, 4], start=1)
    )
    ds = NetworkDataset(studies, num_treatments=4)
    assert connectivity_check(ds).connected


def test_connectivity_bridge_removal():
    studies = (
        Study(id="1", arms=(Arm(1, 1, 10), Arm(2, 1, 10))),
        Study(id="2", arms=(Arm(2, 1, 10), Arm(3, 1, 10))),
        Study(id="3", arms=(Arm(3, 1, 10), Arm(4, 1, 10))),
    )
    ds = NetworkDataset(studies, num_treatments=4)
    assert connectivity_check(ds).connected
    reduced = ds.without_studies({"2"})
    res = connectivity_check(reduced)
    assert not res.connected
    assert len(res.components) == 2


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_connectivity_matches_union_find(data):
    k = data.draw(st.integers(min_value=2, max_value=8))
    n_edges = data.draw(st.integers(min_value=1, max_value=12))
    edges = [
        tuple(sorted(data.draw(
            st.lists(st.integers(1, k), min_size=2, max_size=2, unique=True))))
        for _ in range(n_edges)
    ]
    studies = tuple(
        Study(id=str(i), arms=(Arm(a, 1, 10), Arm(b, 1, 10)))
        for i, (a, b) in enumerate(edges, start=1)
    )
    ds = NetworkDataset(studies, num_treatments=k)
    res = connectivity_check(ds)
    nodes = {t for e in edges for t in e}
    oracle = [c for c in union_find_components(k, edges) if c & nodes]
    assert res.connected == (len(oracle) == 1)
    assert sorted(map(sorted, res.components)) == sorted(map(sorted, oracle))
