import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smolsim.material import (
    ConstantMatrix,
    ConstantVelocity,
    CrossSection,
    FragTable,
    GridSampledVelocity,
    RotationalVelocity,
    SpeciesTable,
    SpeedLaw,
    ZeroVelocity,
    derive_e_hat,
    eval_macroscopic_rate,
    species_table_from_dict,
    species_table_to_dict,
    validate_species_table,
)
from smolsim.grid import GridField

from conftest import binary_table, elastic_table


def test_binary_shattering_table_is_valid_with_expected_e_hat(binary):
    rep = validate_species_table(binary)
    assert rep.ok, rep.problems
    # 1-based e_hat[1][2][1] and e_hat[2][2][1]
    assert binary.frag.e_hat[0, 1, 0] == 3
    assert binary.frag.e_hat[1, 1, 0] == 4


def test_elastic_single_species_is_valid():
    assert validate_species_table(elastic_table(sigma=0.3)).ok


def test_mass_preserving_self_map_is_valid_but_mass_gain_is_not():
    # 1-based e[2][1][.] = (0,1), identity elsewhere
    e = np.zeros((2, 2, 2), dtype=np.int64)
    e[0, :, 0] = 1
    e[1, :, 1] = 1
    t = binary_table()
    t.frag = FragTable(e)
    assert validate_species_table(t).ok

    bad = e.copy()
    bad[0, 0] = (0, 1)
    t.frag = FragTable(bad)
    rep = validate_species_table(t)
    assert not rep.ok
    assert any("e[0][0]" in p for p in rep.problems)


def test_supplied_e_hat_is_overwritten(binary):
    binary.frag.e_hat = np.zeros_like(binary.frag.e_hat)
    validate_species_table(binary)
    assert np.array_equal(binary.frag.e_hat, derive_e_hat(binary.frag.e))


@pytest.mark.parametrize("masses,msg", [((2, 3), "m[0] must be 1"), ((1, 1), "strictly increasing")])
def test_mass_ordering_violations(masses, msg):
    t = binary_table()
    t.masses = masses
    rep = validate_species_table(t)
    assert any(msg in p for p in rep.problems)


def test_nonpositive_sigma_and_cutoff_are_reported():
    t = binary_table(sigma=(0.0, 1.0), C_a=0.0)
    probs = validate_species_table(t).problems
    assert any("sigma[0]" in p for p in probs)
    assert any("C_a" in p for p in probs)


def test_asymmetric_or_negative_rates_are_reported():
    t = binary_table()
    t.rate_spec = ConstantMatrix(np.array([[1.0, 2.0], [1.0, -1.0]]))
    probs = validate_species_table(t).problems
    assert any("not symmetric" in p for p in probs)
    assert any("negative" in p for p in probs)


def test_rotational_velocity_only_in_two_dimensions():
    t = binary_table(velocity=(ZeroVelocity(1), RotationalVelocity((0.5, 0.5), 1.0, 1.0)))
    assert any("velocity[1]" in p for p in validate_species_table(t).problems)


def test_constant_rate_matrix_is_one_everywhere():
    spec = ConstantMatrix(np.ones((3, 3)))
    x = np.random.default_rng(0).uniform(0, 5, (10, 2))
    for r in range(3):
        for q in range(3):
            assert np.all(eval_macroscopic_rate(spec, r, q, x, 0.7) == 1.0)
    assert eval_macroscopic_rate(spec, 0, 2, [1.0, 2.0], 0.0) == 1.0


def test_cross_section_zero_relative_speed_gives_g_of_zero():
    spec = CrossSection((1.0, 2.0), SpeedLaw("linear", 0.0, 1.0), 2)
    v = (ConstantVelocity((1.0, 1.0)), ConstantVelocity((1.0, 1.0)))
    assert eval_macroscopic_rate(spec, 0, 1, [0.1, 0.2], 0.0, v) == 0.0
    spec = CrossSection((1.0, 2.0), SpeedLaw("constant", 0.5), 2)
    assert eval_macroscopic_rate(spec, 0, 1, [0.1, 0.2], 0.0, v) == pytest.approx(3.0 * 0.5)


def test_cross_section_three_dimensions_linear_speed():
    spec = CrossSection((1.0, 1.0), SpeedLaw("linear", 0.0, 1.0), 3)
    v = (ConstantVelocity((2.0, 0.0, 0.0)), ZeroVelocity(3))
    assert eval_macroscopic_rate(spec, 0, 1, [0.0, 0.0, 0.0], 0.0, v) == pytest.approx(8.0)


def test_out_of_range_species_index_raises():
    with pytest.raises(IndexError):
        eval_macroscopic_rate(ConstantMatrix(np.ones((2, 2))), 0, 2, [0.0], 0.0)
    with pytest.raises(IndexError):
        eval_macroscopic_rate(ConstantMatrix(np.ones((2, 2))), -1, 0, [0.0], 0.0)


def test_rotational_velocity_is_tangential():
    v = RotationalVelocity((0.5, 0.5), 2.0, 1.0)
    x = np.array([[0.75, 0.5], [0.5, 0.25]])
    out = v(x, 0.0)
    assert np.allclose(out, [[0.0, 0.5], [0.5, 0.0]])


def test_grid_sampled_velocity_interpolates_linearly():
    n, L = 8, 1.0
    ax = np.arange(n) * L / n
    g = GridField(1, n, L, np.stack([ax]))
    v = GridSampledVelocity(g)
    assert v(np.array([[0.0625]]), 0.0)[0, 0] == pytest.approx(0.0625)


@st.composite
def valid_tables(draw):
    R = draw(st.integers(1, 4))
    masses = list(range(1, R + 1))
    e = np.zeros((R, R, R), dtype=np.int64)
    for r in range(R):
        for q in range(R):
            left = masses[r]
            while left > 0:
                part = draw(st.integers(1, left))
                e[r, q, part - 1] += 1
                left -= part
    a = np.array(draw(st.lists(st.floats(0, 3), min_size=R * R, max_size=R * R))).reshape(R, R)
    a = a + a.T
    radii = tuple(draw(st.lists(st.floats(0.1, 2.0), min_size=R, max_size=R)))
    return masses, e, a, radii


@settings(max_examples=60, deadline=None)
@given(valid_tables())
def test_e_hat_of_any_valid_table_conserves_pair_mass(tab):
    masses, e, a, _ = tab
    m = np.array(masses)
    e_hat = derive_e_hat(e)
    assert np.array_equal(e_hat, e_hat.transpose(1, 0, 2))
    pair = np.einsum("rql,l->rq", e_hat, m)
    assert np.array_equal(pair, m[:, None] + m[None, :])
    R = len(masses)
    t = SpeciesTable(tuple(masses), (1.0,) * R, tuple(ZeroVelocity(1) for _ in range(R)),
                     ConstantMatrix(a), FragTable(e), 1.0, 1)
    assert validate_species_table(t).ok


@settings(max_examples=40, deadline=None)
@given(valid_tables(), st.floats(-5, 5), st.floats(-5, 5))
def test_builtin_rates_are_symmetric(tab, v1, v2):
    masses, _, a, radii = tab
    R = len(masses)
    vel = [ConstantVelocity((v1 * (r + 1), v2)) for r in range(R)]
    x = np.array([[0.3, 0.4]])
    for spec in (ConstantMatrix(a), CrossSection(radii, SpeedLaw("linear", 0.2, 1.5), 2)):
        for r in range(R):
            for q in range(R):
                assert eval_macroscopic_rate(spec, r, q, x, 0.0, vel)[0] == pytest.approx(
                    eval_macroscopic_rate(spec, q, r, x, 0.0, vel)[0])
                assert eval_macroscopic_rate(spec, r, q, x, 0.0, vel)[0] >= 0


def test_json_round_trip(tmp_path):
    t = binary_table(velocity=(ZeroVelocity(1), ConstantVelocity((0.5,))))
    path = tmp_path / "table.json"
    path.write_text(json.dumps(species_table_to_dict(t)))
    back = species_table_from_dict(json.loads(path.read_text()), 1, 10.0)
    assert back.masses == t.masses
    assert np.array_equal(back.frag.e, t.frag.e)
    assert np.array_equal(back.rate_spec.a_hat, t.rate_spec.a_hat)
    assert back.velocity[1](np.zeros((1, 1)), 0.0)[0, 0] == 0.5
    assert validate_species_table(back).ok


def test_fragmentation_entries_are_one_based():
    f = FragTable.from_entries(2, [[2, 1, 1, 2], [2, 2, 1, 2], [1, 1, 1, 1], [1, 2, 1, 1]])
    assert f.e[1, 0, 0] == 2 and f.e[0, 1, 0] == 1
    assert sorted(f.entries()) == sorted([[2, 1, 1, 2], [2, 2, 1, 2], [1, 1, 1, 1], [1, 2, 1, 1]])
