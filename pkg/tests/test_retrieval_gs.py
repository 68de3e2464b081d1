"""Gerchberg-Saxton retrieval: inversion accuracy, invariants, batch path."""

import numpy as np
import pytest

from aberro import (
    AmplitudeVector,
    DegenerateInputError,
    GridMismatchError,
    compose_wavefront,
    wavefront_rmse,
)
from aberro.dataset import DatasetSpec, SamplerSpec, make_sample
from aberro.optics import NoiseSpec, PsfStack, load_preset, pupil_grid, synth_psf
from aberro.retrieval_gs import GsOptions, gs_retrieve, gs_retrieve_batch

PS = load_preset("point_scanning")
WF = load_preset("widefield")


def rmse_vs_truth(result, truth, config):
    grid = pupil_grid(config)
    return wavefront_rmse(result.wavefront, compose_wavefront(truth, grid), grid)


class TestSingleMode:
    @pytest.mark.parametrize("noll,amp", [(5, 0.05), (7, -0.05), (11, 0.075), (15, 0.025)])
    def test_noiseless_inversion(self, noll, amp):
        truth = AmplitudeVector({noll: amp})
        stack = synth_psf(PS.config, truth)
        result = gs_retrieve(stack, PS.config)
        assert rmse_vs_truth(result, truth, PS.config) < 0.01
        dominant = max(result.amplitudes.items(), key=lambda kv: abs(kv[1]))
        assert dominant[0] == noll

    def test_zero_aberration_fixed_point(self):
        result = gs_retrieve(synth_psf(PS.config), PS.config)
        assert np.abs(result.amplitudes.as_array()).max() < 5e-3

    def test_support_and_residual_shape(self):
        truth = AmplitudeVector({6: 0.04})
        result = gs_retrieve(synth_psf(PS.config, truth), PS.config)
        grid = pupil_grid(PS.config)
        assert np.all(result.wavefront[~grid.mask] == 0.0)
        assert len(result.per_iteration_residual) == 30
        assert np.all(np.isfinite(result.per_iteration_residual))
        assert result.per_iteration_residual[-1] <= result.per_iteration_residual[0]

    def test_deterministic(self):
        stack = synth_psf(PS.config, AmplitudeVector({9: 0.03}))
        a = gs_retrieve(stack, PS.config)
        b = gs_retrieve(stack, PS.config)
        np.testing.assert_array_equal(a.wavefront, b.wavefront)
        assert a.per_iteration_residual == b.per_iteration_residual


class TestMixedModes:
    def test_noisy_widefield_with_projection_smoothing(self):
        # full-range mixed wavefronts exceed half a wave at the pupil rim, so
        # the wrap-robust smoothing configuration is required here; the plain
        # arg() extraction degrades to the 0.1 um regime (checked below)
        spec = DatasetSpec(
            config=WF.config,
            sampler=SamplerSpec(seed=20, count=20),
            noise=NoiseSpec(photons_peak=5000, gaussian_sigma=2.0),
            bead_diameter_um=WF.bead_diameter_um,
        )
        samples = [make_sample(spec, i) for i in range(20)]
        stacks = [s for _, s in samples]
        opts = GsOptions(smoothing_project_every=5)
        results = gs_retrieve_batch(stacks, WF.config, opts, workers=2)
        rmses = [
            rmse_vs_truth(r, truth, WF.config)
            for r, (truth, _) in zip(results, samples)
        ]
        assert np.median(rmses) < 0.05

    def test_unsmoothed_extraction_wraps_on_strong_mixed_input(self):
        # sign of life for the documented limitation: without the smoothing
        # reference the retrieval is wrap-corrupted at full mixed range
        spec = DatasetSpec(
            config=WF.config,
            sampler=SamplerSpec(seed=77, count=3),
            noise=NoiseSpec(photons_peak=0.0, gaussian_sigma=0.0),
            bead_diameter_um=0.0,
        )
        samples = [make_sample(spec, i) for i in range(3)]
        results = gs_retrieve_batch([s for _, s in samples], WF.config, GsOptions())
        rmses = [
            rmse_vs_truth(r, truth, WF.config)
            for r, (truth, _) in zip(results, samples)
        ]
        assert np.median(rmses) > 0.05


class TestBatch:
    def test_batch_matches_single(self):
        # the batch path computes in complex64 for throughput; agreement is
        # to working precision, far below retrieval error, not bit-for-bit
        stacks = [
            synth_psf(PS.config, AmplitudeVector({5: 0.05})),
            synth_psf(PS.config, AmplitudeVector({8: -0.03})),
            synth_psf(PS.config),
        ]
        batch = gs_retrieve_batch(stacks, PS.config, workers=2)
        for stack, from_batch in zip(stacks, batch):
            alone = gs_retrieve(stack, PS.config)
            np.testing.assert_allclose(from_batch.wavefront, alone.wavefront, atol=1e-5)

    def test_batch_invariant_to_worker_count(self):
        stacks = [synth_psf(PS.config, AmplitudeVector({j: 0.02})) for j in range(5, 13)]
        one = gs_retrieve_batch(stacks, PS.config, workers=1)
        two = gs_retrieve_batch(stacks, PS.config, workers=2)
        for a, b in zip(one, two):
            np.testing.assert_array_equal(a.wavefront, b.wavefront)

    def test_mixed_plane_counts_grouped(self):
        full = synth_psf(PS.config, AmplitudeVector({5: 0.05}))
        short = PsfStack(
            data=full.data[8:24].copy(),
            z_offsets_um=full.z_offsets_um[8:24],
            config_digest=full.config_digest,
        )
        results = gs_retrieve_batch([full, short, full], PS.config)
        np.testing.assert_array_equal(results[0].wavefront, results[2].wavefront)
        assert results[1].wavefront.shape == results[0].wavefront.shape


class TestErrors:
    def test_all_zero_stack(self):
        zeros = PsfStack(
            data=np.zeros((4, 32, 32), dtype=np.float32),
            z_offsets_um=(-0.03, 0.0, 0.03, 0.06),
        )
        with pytest.raises(DegenerateInputError):
            gs_retrieve(zeros, PS.config)

    def test_dim_mismatch(self):
        stack = synth_psf(WF.config)
        with pytest.raises(GridMismatchError):
            gs_retrieve(stack, PS.config)

    def test_option_validation(self):
        with pytest.raises(ValueError):
            GsOptions(iterations=0)
        with pytest.raises(ValueError):
            GsOptions(background_subtract=-1.0)
        with pytest.raises(ValueError):
            GsOptions(smoothing_project_every=0)
