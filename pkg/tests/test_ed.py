import numpy as np
import pytest

from rbmspectra.ed import (DenseAmplitude, OracleCapError, SectorBasis, Spectrum,
                           build_hamiltonian, exact_ground_state, exact_greens,
                           lanczos_ground_energy, perturb_and_project, sparse_hamiltonian)
from rbmspectra.hamiltonian import ModelSpec
from rbmspectra.pipeline import lorentzian_window_mass


def test_sector_basis():
    basis = SectorBasis.build(6, 0.0)
    assert len(basis) == 20
    assert np.all(basis.configs.sum(axis=1) == 0)
    assert np.all(np.diff(basis.codes) > 0)
    assert np.array_equal(basis.index(basis.configs), np.arange(20))
    with pytest.raises(KeyError):
        basis.index(np.ones((1, 6)))
    assert len(SectorBasis.build(6, 1.0)) == 15


def test_two_site_singlet_triplet():
    model = ModelSpec(2, periodic=False)
    H = build_hamiltonian(model).matrix
    assert np.allclose(np.linalg.eigvalsh(H), [-0.75, 0.25])
    assert exact_ground_state(model).energy == pytest.approx(-0.75)
    assert exact_ground_state(model, sector=None).energy == pytest.approx(-0.75)


def test_four_site_ring():
    model = ModelSpec(4)
    gs = exact_ground_state(model)
    assert gs.energy == pytest.approx(-2.0, abs=1e-12)
    assert lanczos_ground_energy(model) == pytest.approx(-2.0, abs=1e-10)
    H = build_hamiltonian(model).matrix
    assert np.abs(H - H.T.conj()).max() < 1e-12


def test_dense_and_sparse_agree():
    model = ModelSpec(10, 1.0, 0.2)
    basis = SectorBasis.build(10, 0.0)
    dense = build_hamiltonian(model, basis=basis).matrix
    assert np.allclose(sparse_hamiltonian(model, basis).toarray(), dense)
    assert lanczos_ground_energy(model) == pytest.approx(np.linalg.eigvalsh(dense)[0], abs=1e-9)


def test_cap_refusal():
    with pytest.raises(OracleCapError, match="252"):
        build_hamiltonian(ModelSpec(10), cap=100)


def test_two_site_greens_at_pole():
    model = ModelSpec(2, periodic=False)
    gs = exact_ground_state(model)
    z = gs.energy + 1.0 + 0.1j
    g = exact_greens(model, gs.energy, gs.vector, z, 0, 0)
    assert g == pytest.approx(0.25 / 0.1j, rel=1e-12)


def test_large_eta_asymptotics_and_sign():
    model = ModelSpec(6)
    gs = exact_ground_state(model)
    eta = 1e4
    g = exact_greens(model, gs.energy, gs.vector, gs.energy + 1j * eta, 0, 1)
    overlap = exact_greens(model, gs.energy, gs.vector, 1e9j, 0, 1) * 1e9j
    assert g * 1j * eta == pytest.approx(overlap, rel=1e-3)
    for w in np.linspace(0, 3, 13):
        assert exact_greens(model, gs.energy, gs.vector, gs.energy + w + 0.1j, 2, 2).imag < 0


def test_spectrum_matches_direct_solve(spectrum4, chain4):
    z = spectrum4.e0 + 0.8 + 0.1j
    for i in range(4):
        direct = exact_greens(chain4, spectrum4.e0, spectrum4.ground, z, i, 0)
        assert spectrum4.greens(z, i, 0) == pytest.approx(direct, rel=1e-10)


def test_sum_rule_of_site_spectra(spectrum4):
    # integral of -Im G_jj / pi over all omega equals <A_j|A_j> = 1/4
    weights = np.abs(spectrum4.amplitudes[1]) ** 2
    assert weights.sum() == pytest.approx(0.25)
    eta, lo, hi = 0.1, -30.0, 30.0
    w = np.linspace(lo, hi, 60001)
    g = np.array([spectrum4.greens(spectrum4.e0 + x + 1j * eta, 1, 1) for x in w])
    integral = np.trapezoid(-g.imag / np.pi, w)
    dE = spectrum4.energies - spectrum4.e0
    in_window = weights @ lorentzian_window_mass(dE, eta, lo, hi)
    assert integral == pytest.approx(in_window, abs=1e-6)
    assert 0.25 - in_window < 2 * eta / (np.pi * 25)


def test_static_structure_factor_k0_vanishes(spectrum4):
    assert spectrum4.static_structure_factor(0.0) < 1e-20
    total = sum(spectrum4.static_structure_factor(2 * np.pi * m / 4) for m in range(4))
    # sum_k S(k) = (1/L) sum_b <A_b|A_b> in the 1/(L pi) normalization
    assert total == pytest.approx(0.25)


def test_perturb_and_project(spectrum4):
    chi = spectrum4.ground
    assert np.array_equal(perturb_and_project(chi, 0.0, seed=1), chi)
    d = perturb_and_project(chi, 0.1, seed=1) - chi
    assert np.linalg.norm(d) == pytest.approx(0.1)
    d = perturb_and_project(chi, 0.1, 3, eigvecs=spectrum4.vectors) - chi
    assert np.allclose(d, 0.1 * spectrum4.vectors[:, 3])
    with pytest.raises(ValueError):
        perturb_and_project(chi, 0.1, "sideways")


def test_dense_amplitude(basis4, spectrum4):
    amp = DenseAmplitude(basis4, spectrum4.ground)
    assert np.allclose(np.exp(amp(basis4.configs)), spectrum4.ground)
