import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from upo_control.catalog import select_neighbours
from upo_control.integrator import propagate
from upo_control.sections import (
    SECTION_FAMILY,
    AugmentationConfig,
    DatasetPair,
    SectionDef,
    admissible_crossings,
    build_augmented_ics,
    collect_pairs,
    find_anchor,
    get_section,
    sample_section_data,
)


def test_section_definitions():
    s1l, s2l, s1h, s2h = (get_section(n) for n in ("S1L", "S2L", "S1H", "S2H"))
    assert s1l.active == (0, 3, 4) and s2l.active == (0, 3, 4)
    assert s1h.active == (0, 2, 3, 4, 5)
    assert SECTION_FAMILY["S1H"] == "Halo"
    assert get_section("s1l") is s1l
    with pytest.raises(ValueError):
        get_section("S3L")


def test_section_validation():
    with pytest.raises(ValueError):
        SectionDef("bad", 1, (0, "=", 0.0), True)
    with pytest.raises(ValueError):
        SectionDef("bad", 1, (0, "<", 0.0), True, crossing_direction=2)


@pytest.mark.parametrize("name", ["S1L", "S2L"])
def test_lyapunov_anchor(lyap, name):
    cal, t, anchor = find_anchor(lyap, get_section(name))
    assert cal.crossing_direction is not None
    assert abs(anchor[1]) < 1e-12
    assert cal.admissible(anchor)
    if name == "S1L":
        assert t == 0.0  # the catalog state is its own crossing
    else:
        assert 0 < t < lyap.period


@pytest.mark.parametrize("name", ["S1H", "S2H"])
def test_halo_anchor(halo, name):
    cal, t, anchor = find_anchor(halo, get_section(name))
    assert (anchor[2] > 0) == (name == "S1H")


def test_one_admissible_crossing_per_period(lyap):
    cal, _, anchor = find_anchor(lyap, get_section("S2L"))
    hits = list(admissible_crossings(anchor, cal, 3.05 * lyap.period))
    assert len(hits) == 3
    for k, (t, s) in enumerate(hits, start=1):
        assert t == pytest.approx(k * lyap.period, rel=1e-7)  # residual grows like lambda_u^k
        np.testing.assert_allclose(s, anchor, atol=1e-5)


def test_start_near_hyperplane_is_not_a_crossing(lyap):
    cal, _, anchor = find_anchor(lyap, get_section("S2L"))
    s0 = anchor.copy()
    s0[1] = 5e-20
    t, _ = next(admissible_crossings(s0, cal, 2 * lyap.period))
    assert t == pytest.approx(lyap.period, rel=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.booleans(), st.floats(1e-10, 1e-5))
def test_augmentation_count_and_kicks(n, pz, dv):
    base = [np.arange(6, dtype=float) + k for k in range(n)]
    ics = build_augmented_ics(base, dv, perturb_z=pz)
    per = 1 + 2 * (3 if pz else 2)
    assert len(ics) == n * per
    for k in range(n):
        block = ics[k * per:(k + 1) * per]
        np.testing.assert_array_equal(block[0], base[k])
        for s in block[1:]:
            diff = s - base[k]
            assert np.count_nonzero(diff) == 1
            assert np.isclose(abs(diff).max(), dv, rtol=1e-12)
            assert np.argmax(abs(diff)) in ((3, 4, 5) if pz else (3, 4))


def test_augmentation_config_validation():
    with pytest.raises(ValueError):
        AugmentationConfig(delta_v=-1.0)
    with pytest.raises(ValueError):
        AugmentationConfig(crossings_per_ic=1)
    with pytest.raises(ValueError):
        AugmentationConfig(eta=0.0)


def test_lyapunov_dataset_shape(cat, lyap):
    sec = get_section("S1L")
    nb = select_neighbours(cat, lyap, 10, 1.75e-4)
    data, anchor, cal = sample_section_data(lyap, nb, sec, AugmentationConfig(delta_v=2.5e-7))
    assert len(data) == 55  # 11 orbits x 5 initial conditions, one pair each
    assert np.all(np.abs(data.X1[:, 1]) < 1e-12) and np.all(np.abs(data.X2[:, 1]) < 1e-12)
    np.testing.assert_array_equal(data.X1[:, [2, 5]], 0.0)
    # each pair is one return: propagating X1 lands on X2 after about one period
    x2 = propagate(data.X1[0], lyap.period)
    assert np.linalg.norm(x2 - data.X2[0]) < 1e-3


def test_without_augmentation_only_base_orbits(cat, lyap):
    nb = select_neighbours(cat, lyap, 10, 1.75e-4)
    data, _, _ = sample_section_data(lyap, nb, get_section("S1L"), AugmentationConfig(delta_v=0.0))
    assert len(data) == 11


def test_eta_gate_drops_pairs(lyap):
    cal, _, anchor = find_anchor(lyap, get_section("S1L"))
    far = anchor.copy()
    far[0] += 0.01
    cfg = AugmentationConfig(eta=1e-3)
    data = collect_pairs([anchor, far], cal, anchor, cfg, lyap.period)
    assert set(data.source.tolist()) == {0}


def test_uncalibrated_section_rejected(lyap):
    sec = get_section("S1L")
    with pytest.raises(ValueError, match="calibrated"):
        collect_pairs([lyap.initial_state], sec, lyap.initial_state, AugmentationConfig(), lyap.period)


def test_dataset_csv_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    d = DatasetPair(rng.normal(size=(7, 6)), rng.normal(size=(7, 6)), np.arange(7))
    d.to_csv(tmp_path / "d.csv")
    e = DatasetPair.from_csv(tmp_path / "d.csv")
    np.testing.assert_array_equal(d.X1, e.X1)
    np.testing.assert_array_equal(d.X2, e.X2)
