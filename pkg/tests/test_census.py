import io
import warnings

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from biodiv_zoner.census import (
    AbundanceGrid,
    GridSpec,
    StemRecord,
    StemStatus,
    bin_to_grid,
    filter_alive_trees,
    merge_censuses,
    parse_stem_records,
    read_abundance_csv,
    read_region_mask,
    write_abundance_csv,
)
from biodiv_zoner.errors import DuplicateStem, MalformedRow, MissingColumn, OutOfBounds

HEADER = "stem.id,tree.id,sp,gx,gy,dbh,status\n"


def stem(sid, tid, sp="acerru", x=1.0, y=1.0, dbh=10.0, status=StemStatus.ALIVE):
    return StemRecord(sid, tid, sp, x, y, dbh, status)


def test_parse_single_row():
    recs = parse_stem_records(io.StringIO(HEADER + "S1,T1,acerru,10.0,12.5,7.2,alive\n"))
    assert recs == [StemRecord("S1", "T1", "acerru", 10.0, 12.5, 7.2, StemStatus.ALIVE)]


def test_parse_na_dbh_warns_once():
    text = HEADER + "S1,T1,acerru,1,1,NA,alive\nS2,T2,acerru,1,1,,dead\n"
    with pytest.warns(UserWarning) as rec:
        recs = parse_stem_records(io.StringIO(text))
    assert [r.dbh for r in recs] == [None, None]
    assert len(rec) == 1


def test_parse_missing_column():
    with pytest.raises(MissingColumn):
        parse_stem_records(io.StringIO("stem.id,tree.id,sp,gx,gy,dbh\nS1,T1,a,1,1,6\n"))


def test_parse_column_map():
    text = "id,tree,species,x,y,d,st\nS1,T1,tsugca,3,4,8,alive\n"
    cmap = {"stem_id": "id", "tree_id": "tree", "species": "species", "x": "x", "y": "y", "dbh": "d", "status": "st"}
    (r,) = parse_stem_records(io.StringIO(text), cmap)
    assert (r.species, r.x, r.y, r.dbh) == ("tsugca", 3.0, 4.0, 8.0)


@pytest.mark.parametrize("row", ["S1,T1,a,abc,1,6,alive", "S1,T1,a,1,1,6,zombie", "S1,T1,a,-1,1,6,alive"])
def test_parse_malformed_reports_row(row):
    with pytest.raises(MalformedRow) as exc:
        parse_stem_records(io.StringIO(HEADER + row + "\n"))
    assert exc.value.row == 1


def test_parse_malformed_warn_mode_skips():
    text = HEADER + "S1,T1,a,abc,1,6,alive\nS2,T2,a,1,1,6,alive\n"
    with warnings.catch_warnings(record=True):
        warnings.simplefilter("always")
        recs = parse_stem_records(io.StringIO(text), on_error="warn")
    assert [r.stem_id for r in recs] == ["S2"]


def test_merge_identity_and_degenerate_mask():
    spec = GridSpec(nx=2, ny=2)
    prim = [stem("A", "a", x=5, y=5)]
    fb = [stem("B", "b", x=25, y=5)]
    assert merge_censuses(prim, fb, set(), spec) == prim
    everything = {(i, j) for i in range(2) for j in range(2)}
    assert merge_censuses([], fb, everything, spec) == fb


def test_merge_size_and_duplicates():
    spec = GridSpec(nx=2, ny=2)
    prim = [stem("A", "a", x=5, y=5)]
    fb = [stem("B", "b", x=25, y=5), stem("C", "c", x=5, y=25)]
    out = merge_censuses(prim, fb, {(1, 0)}, spec)
    assert [r.stem_id for r in out] == ["A", "B"]
    with pytest.raises(DuplicateStem):
        merge_censuses(prim, [stem("A", "a", x=25, y=5)], {(1, 0)}, spec)


def test_alive_tree_rules():
    recs = [
        stem("s1", "t1", dbh=6.0),
        stem("s2", "t1", dbh=9.0, status=StemStatus.DEAD),
        stem("s3", "t2", dbh=5.0),  # not strictly above 5 cm
        stem("s4", "t3", dbh=3.0),
        stem("s5", "t3", sp="tsugca", x=7, dbh=12.0),
    ]
    trees = {t.tree_id: t for t in filter_alive_trees(recs, 5.0)}
    assert set(trees) == {"t1", "t3"}
    assert trees["t1"].max_dbh == 6.0
    assert (trees["t3"].species, trees["t3"].x) == ("tsugca", 7)
    assert filter_alive_trees([stem("x", "y", status=StemStatus.DEAD)]) == []


def test_filter_idempotent():
    recs = [stem("s1", "t1", dbh=6.0), stem("s2", "t1", dbh=8.0), stem("s3", "t2", dbh=2.0)]
    once = filter_alive_trees(recs)
    as_stems = [stem(t.tree_id, t.tree_id, t.species, t.x, t.y, t.max_dbh) for t in once]
    twice = filter_alive_trees(as_stems)
    assert [(t.tree_id, t.max_dbh) for t in twice] == [(t.tree_id, t.max_dbh) for t in once]


def test_binning_boundaries():
    spec = GridSpec(cell_size=20, nx=3, ny=2)
    assert spec.locate(0.5, 0.5) == (0, 0)
    assert spec.locate(20.0, 0.0) == (1, 0)
    assert spec.locate(60.0, 40.0) == (2, 1)  # closed upper edge
    assert spec.locate(60.01, 0.0) is None
    trees = filter_alive_trees([stem("s", "t", x=61, y=1)])
    with pytest.raises(OutOfBounds):
        bin_to_grid(trees, spec)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 60), st.floats(0, 40), st.sampled_from(["a", "b", "c"])), max_size=40))
def test_binning_partition(points):
    spec = GridSpec(cell_size=20, nx=3, ny=2)
    trees = filter_alive_trees([stem(f"s{i}", f"t{i}", sp, x, y) for i, (x, y, sp) in enumerate(points)])
    grid = bin_to_grid(trees, spec)
    assert grid.total == len(trees)
    # exhaustive re-scan: each tree lies inside exactly one cell rectangle
    for t in trees:
        hits = []
        for cid in range(spec.n_cells):
            ix, iy = spec.cell_index(cid)
            x0, y0 = ix * 20, iy * 20
            inx = x0 <= t.x < x0 + 20 or (ix == spec.nx - 1 and t.x == x0 + 20)
            iny = y0 <= t.y < y0 + 20 or (iy == spec.ny - 1 and t.y == y0 + 20)
            if inx and iny:
                hits.append(cid)
        assert len(hits) == 1 and grid.counts[hits[0]][t.species] >= 1


def test_abundance_csv_roundtrip():
    spec = GridSpec(nx=2, ny=2)
    grid = AbundanceGrid(spec, {0: {"a": 2, "b": 1}, 3: {"c": 4}})
    buf = io.StringIO()
    write_abundance_csv(grid, buf)
    assert buf.getvalue().splitlines()[0] == "cell_id,x_index,y_index,species,count"
    back = read_abundance_csv(io.StringIO(buf.getvalue()), spec)
    assert back.counts == grid.counts


def test_region_mask_reader():
    assert read_region_mask(io.StringIO("x_index,y_index\n1,2\n0,0\n")) == {(1, 2), (0, 0)}


def test_grid_spec_roundtrip_and_centroids():
    spec = GridSpec(origin_x=5, cell_size=10, nx=3, ny=2)
    assert GridSpec.from_dict(spec.to_dict()) == spec
    c = spec.centroids()
    assert c.shape == (6, 2) and tuple(c[4]) == (20.0, 15.0)
