"""Forward model: propagation, bead blur, noise, cropping, presets."""

import numpy as np
import pytest

from aberro import AmplitudeVector
from aberro.optics import (
    MicroscopeConfig,
    NoiseSpec,
    PsfStack,
    apply_noise,
    bead_convolve,
    bead_kernel,
    crop_center,
    crop_slices,
    defocus_phase,
    load_preset,
    load_stack,
    preset_names,
    psf_planes,
    pupil_field,
    pupil_grid,
    save_stack,
    synth_psf,
    z_offsets,
)

PS = load_preset("point_scanning")
WF = load_preset("widefield")

# Even azimuthal symmetry within Noll 5..15 (wavefront invariant under
# point reflection, so the PSF mirrors axially under amplitude sign flip).
EVEN_MODES = (5, 6, 11, 12, 13, 14, 15)


def direct_dft_planes(config, z_list):
    """Quadrature oracle for the unaberrated forward model: evaluates the
    Fourier sum with explicit phase matrices instead of an FFT."""
    grid = pupil_grid(config)
    geo_kz = np.zeros(grid.shape)
    k2 = grid.kx**2 + grid.ky**2
    geo_kz[grid.mask] = np.sqrt(
        (config.n0 / config.lambda_um) ** 2 - k2[grid.mask]
    )
    ny, nx = grid.shape
    uy = np.arange(ny) - ny // 2
    ux = np.arange(nx) - nx // 2
    ey = np.exp(-2j * np.pi * np.outer(uy, uy) / ny)
    ex = np.exp(-2j * np.pi * np.outer(ux, ux) / nx)
    planes = []
    for z in z_list:
        pupil = np.where(grid.mask, np.exp(-2j * np.pi * z * geo_kz), 0.0)
        field = ey @ pupil @ ex.T
        sy, sx = crop_slices(config)
        planes.append(np.abs(field[sy, sx]) ** 2)
    return np.array(planes)


class TestConfig:
    def test_presets_ship(self):
        assert preset_names() == ["point_scanning", "widefield"]
        assert PS.config.na == 1.4 and PS.config.n0 == 1.518
        assert PS.config.lambda_um == 0.755
        assert (PS.config.nx, PS.config.ny, PS.config.nz) == (32, 32, 32)
        assert PS.bead_diameter_um == 0.08
        assert WF.config.na == 1.1 and WF.config.n0 == 1.33
        assert WF.config.dz_um == 0.1
        assert WF.bead_diameter_um == 0.2

    def test_validation(self):
        with pytest.raises(ValueError):
            MicroscopeConfig(na=1.6, lambda_um=0.5, n0=1.5, dx_um=0.1,
                             dy_um=0.1, dz_um=0.1, nx=32, ny=32, nz=32)
        with pytest.raises(ValueError):
            MicroscopeConfig(na=1.1, lambda_um=0.5, n0=1.33, dx_um=0.1,
                             dy_um=0.1, dz_um=0.1, nx=31, ny=32, nz=32)

    def test_digest_stable(self):
        assert PS.config.digest() == MicroscopeConfig.from_dict(PS.config.to_dict()).digest()

    def test_z_offsets_symmetric(self):
        z = z_offsets(PS.config)
        assert len(z) == 32
        np.testing.assert_allclose(z, -z[::-1])
        np.testing.assert_allclose(np.diff(z), PS.config.dz_um)


class TestDefocusPhase:
    def test_zero_defocus_is_identity(self):
        grid = pupil_grid(PS.config)
        f = defocus_phase(PS.config, 0.0, grid)
        assert np.all(f[grid.mask] == 1.0)
        assert np.all(f[~grid.mask] == 0.0)

    def test_conjugate_pair(self):
        grid = pupil_grid(PS.config)
        f = defocus_phase(PS.config, 0.4, grid)
        b = defocus_phase(PS.config, -0.4, grid)
        np.testing.assert_allclose((f * b)[grid.mask], 1.0, atol=1e-12)

    def test_unit_modulus(self):
        grid = pupil_grid(PS.config)
        f = defocus_phase(PS.config, 0.5, grid)
        np.testing.assert_allclose(np.abs(f[grid.mask]), 1.0, atol=1e-12)


class TestSynth:
    def test_unaberrated_peak_and_symmetry(self):
        st = synth_psf(PS.config)
        assert st.data.dtype == np.float32
        assert st.shape == (32, 32, 32)
        kz, ky, kx = np.unravel_index(st.data.argmax(), st.shape)
        assert st.data.max() == pytest.approx(1.0, abs=1e-9)
        assert (ky, kx) == (16, 16)
        assert kz in (15, 16)  # even nz straddles focus by half a step
        # 4-fold lateral mirror symmetry about the central pixel
        plane = st.data[kz].astype(np.float64)
        np.testing.assert_allclose(plane[1:, 1:], plane[1:, 1:][::-1, :], atol=1e-6)
        np.testing.assert_allclose(plane[1:, 1:], plane[1:, 1:][:, ::-1], atol=1e-6)

    def test_unaberrated_axial_symmetry(self):
        st = synth_psf(WF.config)
        np.testing.assert_allclose(st.data, st.data[::-1], atol=1e-6)

    def test_nonnegative(self):
        rng = np.random.default_rng(3)
        amps = AmplitudeVector.from_array(rng.uniform(-0.075, 0.075, 11))
        st = synth_psf(PS.config, amps)
        assert st.data.min() >= 0.0

    def test_aberration_lowers_peak(self):
        for noll in range(5, 16):
            st = synth_psf(PS.config, AmplitudeVector({noll: 0.075}))
            assert st.data.max() < 1.0, f"mode {noll}"

    @pytest.mark.parametrize("modes", [(5,), (6, 11), (12, 13, 14), (15,), EVEN_MODES])
    def test_axial_mirror_for_even_modes(self, modes):
        rng = np.random.default_rng(hash(modes) % 2**32)
        amps = AmplitudeVector({j: float(rng.uniform(-0.075, 0.075)) for j in modes})
        a = synth_psf(PS.config, amps)
        b = synth_psf(PS.config, amps.scaled(-1.0))
        assert np.abs(a.data - b.data[::-1]).max() < 1e-6

    def test_odd_mode_breaks_axial_mirror(self):
        a = synth_psf(PS.config, AmplitudeVector({7: 0.05}))
        b = synth_psf(PS.config, AmplitudeVector({7: -0.05}))
        assert np.abs(a.data - b.data[::-1]).max() > 1e-4

    def test_focal_plane_energy_against_direct_dft(self):
        # central plane concentrates energy relative to the stack edges
        st = synth_psf(PS.config)
        energies = st.data.sum(axis=(1, 2))
        assert energies[15] > energies[0]
        assert energies[16] > energies[31]
        # cross-check the FFT path against the explicit Fourier-sum oracle
        z = z_offsets(PS.config)
        oracle = direct_dft_planes(PS.config, [z[0], z[15]])
        fft_planes = psf_planes(PS.config, None, np.array([z[0], z[15]]))
        norm = oracle.max()
        np.testing.assert_allclose(fft_planes, oracle / norm, atol=1e-9)

    def test_deterministic(self):
        amps = AmplitudeVector({5: 0.03, 8: -0.02})
        a = synth_psf(PS.config, amps)
        b = synth_psf(PS.config, amps)
        assert np.array_equal(a.data, b.data)

    def test_lateral_shift_moves_peak(self):
        shifted = psf_planes(
            PS.config, None, np.array([0.0]), lateral_shift_um=(3 * PS.config.dx_um, 0.0)
        )
        ky, kx = np.unravel_index(shifted[0].argmax(), shifted[0].shape)
        assert (ky, kx) == (16, 19)


class TestBead:
    def test_zero_diameter_identity(self):
        st = synth_psf(PS.config)
        assert bead_convolve(st, 0.0, PS.config) is st

    def test_kernel_geometry_80nm(self):
        k = bead_kernel(0.08, PS.config)
        assert k.shape == (3, 3, 3)
        assert k.sum() == pytest.approx(1.0)
        np.testing.assert_allclose(k, k[::-1], atol=1e-12)
        np.testing.assert_allclose(k, k[:, ::-1], atol=1e-12)
        np.testing.assert_allclose(k, k[:, :, ::-1], atol=1e-12)

    def test_energy_conserved_interior(self):
        # window to interior support: a PSF touching the stack border sheds
        # energy through it under any convolution, so zero a margin wider
        # than the kernel half-width first
        st = synth_psf(WF.config, AmplitudeVector({5: 0.02}))
        data = st.data.copy()
        m = 2
        data[:m], data[-m:] = 0.0, 0.0
        data[:, :m], data[:, -m:] = 0.0, 0.0
        data[:, :, :m], data[:, :, -m:] = 0.0, 0.0
        windowed = PsfStack(data=data, z_offsets_um=st.z_offsets_um)
        blurred = bead_convolve(windowed, 0.2, WF.config)
        assert blurred.data.sum() == pytest.approx(windowed.data.sum(), rel=1e-3)

    def test_oversized_bead_rejected(self):
        st = synth_psf(PS.config)
        with pytest.raises(ValueError):
            bead_convolve(st, 0.6, PS.config)


class TestNoise:
    def test_identity_when_disabled(self):
        st = synth_psf(PS.config)
        out = apply_noise(st, NoiseSpec(photons_peak=0.0, gaussian_sigma=0.0, seed=1))
        assert out is st

    def test_sigma_without_photons_rejected(self):
        st = synth_psf(PS.config)
        with pytest.raises(ValueError):
            apply_noise(st, NoiseSpec(photons_peak=0.0, gaussian_sigma=2.0, seed=1))

    def test_same_seed_bit_identical(self):
        st = synth_psf(PS.config)
        spec = NoiseSpec(photons_peak=5000, gaussian_sigma=2.0, seed=99)
        a = apply_noise(st, spec)
        b = apply_noise(st, spec)
        assert np.array_equal(a.data, b.data)

    def test_poisson_moments(self):
        # mean of repeated draws of a single voxel matches the Poisson rate
        value, photons, n = 0.25, 1000.0, 10_000
        stack = PsfStack(
            data=np.full((1, 2, 2), value, dtype=np.float32),
            z_offsets_um=(0.0,),
        )
        draws = np.array([
            apply_noise(stack, NoiseSpec(photons, 0.0, seed)).data[0, 0, 0]
            for seed in range(n)
        ])
        sem = np.sqrt(value / photons) / np.sqrt(n)
        assert abs(draws.mean() - value) < 3 * sem

    def test_negative_excursions_survive(self):
        stack = PsfStack(
            data=np.zeros((1, 8, 8), dtype=np.float32), z_offsets_um=(0.0,)
        )
        out = apply_noise(stack, NoiseSpec(photons_peak=100.0, gaussian_sigma=5.0, seed=3))
        assert out.data.min() < 0.0


class TestCrop:
    def test_same_size_identity(self):
        st = synth_psf(PS.config)
        out = crop_center(st, 32, 32, 32)
        assert np.array_equal(out.data, st.data)
        assert out.z_offsets_um == st.z_offsets_um

    def test_peak_stays_centered(self):
        cfg = MicroscopeConfig(na=1.4, lambda_um=0.755, n0=1.518, dx_um=0.03,
                               dy_um=0.03, dz_um=0.03, nx=64, ny=64, nz=64)
        st = synth_psf(cfg)
        small = crop_center(st, 32, 32, 32)
        kz, ky, kx = np.unravel_index(small.data.argmax(), small.data.shape)
        assert (ky, kx) == (16, 16)
        assert len(small.z_offsets_um) == 32

    def test_too_large_rejected(self):
        st = synth_psf(PS.config)
        with pytest.raises(ValueError):
            crop_center(st, 64, 32, 32)


class TestStackIO:
    def test_npy_round_trip(self, tmp_path):
        amps = AmplitudeVector({5: 0.05})
        st = synth_psf(PS.config, amps)
        p = save_stack(st, tmp_path / "s.npy", config=PS.config, truth=amps)
        loaded, meta = load_stack(p)
        assert np.array_equal(loaded.data, st.data)
        assert loaded.z_offsets_um == st.z_offsets_um
        assert meta["config"]["na"] == 1.4
        assert AmplitudeVector.from_json_obj(meta["amplitudes_true"]) == amps

    def test_npy_format_is_float32_c_order(self, tmp_path):
        st = synth_psf(PS.config)
        p = save_stack(st, tmp_path / "s.npy")
        raw = np.load(p)
        assert raw.dtype == np.dtype("<f4")
        assert raw.flags["C_CONTIGUOUS"]

    def test_pupil_field_is_indicator(self):
        grid = pupil_grid(PS.config)
        p = pupil_field(PS.config)
        assert np.all(p[grid.mask] == 1.0)
        assert np.all(p[~grid.mask] == 0.0)
