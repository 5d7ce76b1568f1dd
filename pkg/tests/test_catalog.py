import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from upo_control.catalog import (
    HALO_TARGET_ID,
    LYAPUNOV_TARGET_ID,
    Catalog,
    CatalogError,
    UpoRecord,
    load_catalog,
    periodicity_residual,
    save_catalog,
    select_neighbours,
)
from upo_control.dynamics import jacobi_constant


def test_bundled_catalog_contents(cat):
    assert len(cat) > 300
    assert not cat.flagged
    assert {r.family for r in cat} == {"Lyapunov", "Halo"}
    for r in cat:
        assert r.jacobi == pytest.approx(jacobi_constant(r.initial_state), abs=1e-10)


def test_targets_present(lyap, halo):
    assert lyap.planar and not halo.planar
    assert lyap.jacobi == pytest.approx(2.75018, abs=1e-9)
    assert halo.jacobi == pytest.approx(1.7979, abs=1e-9)
    # halo states sit at the perpendicular crossing next to the Moon, below the plane
    assert halo.initial_state[2] < 0
    assert halo.initial_state[[1, 3, 5]] == pytest.approx([0, 0, 0], abs=1e-14)


def test_round_trip(tmp_path, cat):
    path = tmp_path / "cat.csv"
    save_catalog(cat, path)
    again = load_catalog(path)
    assert [r.id for r in again] == [r.id for r in cat]
    for a, b in zip(again, cat):
        np.testing.assert_array_equal(a.initial_state, b.initial_state)
        assert a.period == b.period


def test_mismatched_jacobi_is_flagged(tmp_path, lyap):
    path = tmp_path / "cat.csv"
    bad = UpoRecord("x", "Lyapunov", lyap.initial_state, lyap.period, lyap.jacobi + 1e-3)
    save_catalog(Catalog([bad]), path)
    assert len(load_catalog(path).flagged) == 1


def test_malformed_rows_name_the_line(tmp_path):
    path = tmp_path / "cat.csv"
    path.write_text("id,family,x,y,z,vx,vy,vz,period,jacobi\na,Lyapunov,1,0,0,0,zz,0,1,3\n")
    with pytest.raises(CatalogError, match="line 2"):
        load_catalog(path)


def test_missing_columns(tmp_path):
    path = tmp_path / "cat.csv"
    path.write_text("id,family,x\n")
    with pytest.raises(CatalogError, match="missing"):
        load_catalog(path)


def test_duplicate_ids_rejected(lyap):
    with pytest.raises(CatalogError):
        Catalog([lyap, lyap])


def test_nonpositive_period_rejected(lyap):
    with pytest.raises(CatalogError):
        UpoRecord("x", "Lyapunov", lyap.initial_state, 0.0, lyap.jacobi)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 12))
def test_neighbours_balanced_and_same_family(m):
    from upo_control.catalog import bundled_catalog_path

    cat = load_catalog(bundled_catalog_path())
    target = cat[LYAPUNOV_TARGET_ID]
    nb = select_neighbours(cat, target, m, 1.75e-4)
    assert len(nb) == m
    assert all(r.family == target.family and r.id != target.id for r in nb)
    below = sum(r.jacobi < target.jacobi for r in nb)
    assert below == (m + 1) // 2
    assert [r.jacobi for r in nb] == sorted(r.jacobi for r in nb)


def test_neighbour_levels_are_spaced_by_dC(cat, lyap):
    nb = select_neighbours(cat, lyap, 10, 1.75e-4)
    offsets = sorted(round((r.jacobi - lyap.jacobi) / 1.75e-4) for r in nb)
    assert offsets == [-5, -4, -3, -2, -1, 1, 2, 3, 4, 5]


def test_neighbours_outside_catalog_span(cat, lyap):
    with pytest.raises(CatalogError):
        select_neighbours(cat, lyap, 10, 1.0)


@pytest.mark.parametrize("rid", [LYAPUNOV_TARGET_ID, HALO_TARGET_ID])
def test_target_periodicity(cat, rid):
    assert periodicity_residual(cat[rid]) < 1e-8
