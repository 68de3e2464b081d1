"""Dataset generation, streaming, and plane subset selection."""

import io

import numpy as np
import pytest

from aberro.dataset import (
    DatasetSpec,
    SamplerSpec,
    generate_dataset,
    load_manifest,
    make_sample,
    plane_subset,
    read_amplitude_csv,
    read_stream,
    sample_amplitudes,
    stream_batches,
    write_stream,
)
from aberro.optics import NoiseSpec, PsfStack, load_preset

PS = load_preset("point_scanning")


def small_spec(count=3, seed=7, noise=True):
    return DatasetSpec(
        config=PS.config,
        sampler=SamplerSpec(seed=seed, count=count),
        noise=NoiseSpec(photons_peak=5000, gaussian_sigma=2.0) if noise
        else NoiseSpec(photons_peak=0.0, gaussian_sigma=0.0),
        bead_diameter_um=PS.bead_diameter_um,
    )


class TestSampling:
    def test_deterministic(self):
        spec = SamplerSpec(seed=11, count=5)
        assert sample_amplitudes(spec, 3) == sample_amplitudes(spec, 3)

    def test_order_and_count_independent(self):
        a = sample_amplitudes(SamplerSpec(seed=11, count=5), 2)
        b = sample_amplitudes(SamplerSpec(seed=11, count=5000), 2)
        assert a == b

    def test_mode_value_independent_of_mode_set(self):
        full = sample_amplitudes(SamplerSpec(seed=4, count=1), 0)
        narrow = sample_amplitudes(SamplerSpec(mode_set=(5, 7), seed=4, count=1), 0)
        assert narrow.get(5) == full.get(5)
        assert narrow.get(7) == full.get(7)

    def test_uniform_moments(self):
        spec = SamplerSpec(seed=123, count=10_000)
        draws = np.array([sample_amplitudes(spec, i).get(5) for i in range(10_000)])
        assert abs(draws.mean()) < 0.002
        assert draws.min() >= -0.075 and draws.max() <= 0.075

    def test_degenerate_range(self):
        spec = SamplerSpec(amp_range_um=(0.0, 0.0), seed=1, count=1)
        assert np.all(sample_amplitudes(spec, 0).as_array() == 0.0)


class TestGeneration:
    def test_empty_dataset(self, tmp_path):
        manifest = generate_dataset(small_spec(count=0), tmp_path)
        assert manifest.sample_files == ()
        assert (tmp_path / "manifest.json").exists()
        assert not (tmp_path / "_INCOMPLETE").exists()

    def test_layout_and_schema(self, tmp_path):
        spec = small_spec(count=3)
        manifest = generate_dataset(spec, tmp_path)
        assert len(manifest.sample_files) == 3
        for i, (name, amps) in enumerate(manifest.sample_files):
            assert name == f"psf_{i:06d}.npy"
            arr = np.load(tmp_path / name)
            assert arr.shape == (32, 32, 32) and arr.dtype == np.dtype("<f4")
            assert np.abs(amps.as_array()).max() <= 0.075
        table = read_amplitude_csv((tmp_path / "amplitudes.csv").read_text())
        assert len(table) == 3
        assert table["0"] == manifest.sample_files[0][1]
        loaded = load_manifest(tmp_path)
        assert loaded.sample_files == manifest.sample_files

    def test_widefield_shapes(self, tmp_path):
        wf = load_preset("widefield")
        spec = DatasetSpec(
            config=wf.config,
            sampler=SamplerSpec(seed=9, count=2),
            noise=NoiseSpec(photons_peak=5000, gaussian_sigma=2.0),
            bead_diameter_um=wf.bead_diameter_um,
        )
        manifest = generate_dataset(spec, tmp_path)
        arr = np.load(tmp_path / manifest.sample_files[0][0])
        assert arr.shape == (50, 50, 50)
        table = read_amplitude_csv((tmp_path / "amplitudes.csv").read_text())
        assert all(np.abs(v.as_array()).max() <= 0.075 for v in table.values())

    def test_regeneration_bit_identical(self, tmp_path):
        spec = small_spec(count=2)
        generate_dataset(spec, tmp_path / "a")
        generate_dataset(spec, tmp_path / "b", threads=4)
        for name in ["psf_000000.npy", "psf_000001.npy", "amplitudes.csv", "manifest.json"]:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_failure_leaves_marker(self, tmp_path):
        spec = small_spec(count=2)
        target = tmp_path / "out"
        target.mkdir()
        # provoke a write failure by pre-creating a directory in the way
        (target / "psf_000000.npy").mkdir()
        with pytest.raises(OSError):
            generate_dataset(spec, target)
        assert (target / "_INCOMPLETE").exists()


class TestStreaming:
    def test_matches_files(self, tmp_path):
        spec = small_spec(count=2)
        manifest = generate_dataset(spec, tmp_path)
        vols, amps = next(stream_batches(spec, batch_size=2))
        for i in range(2):
            on_disk = np.load(tmp_path / manifest.sample_files[i][0])
            assert np.array_equal(vols[i], on_disk)
            np.testing.assert_array_equal(
                amps[i], manifest.sample_files[i][1].as_array().astype(np.float32)
            )

    def test_two_consumers_identical(self):
        spec = small_spec(count=0)
        a = next(stream_batches(spec, 2))
        b = next(stream_batches(spec, 2))
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_pipe_round_trip(self):
        spec = small_spec(count=0, noise=True)
        buf = io.BytesIO()
        write_stream(spec, batch_size=2, fh=buf, max_samples=3)
        buf.seek(0)
        header, records = read_stream(buf)
        assert header["batch_size"] == 2
        assert header["config"]["nx"] == 32
        got = list(records)
        assert len(got) == 3
        amps0, stack0 = make_sample(spec, 0)
        np.testing.assert_array_equal(got[0][1], stack0.data)
        np.testing.assert_array_equal(got[0][0], amps0.as_array().astype(np.float32))

    def test_bad_magic_rejected(self):
        with pytest.raises(ValueError):
            read_stream(io.BytesIO(b"XXXX{}\n"))


class TestPlaneSubset:
    def make_stack(self, nz):
        data = np.arange(nz, dtype=np.float32)[:, None, None] * np.ones((1, 4, 4), np.float32)
        offs = tuple((np.arange(nz) - (nz - 1) / 2.0) * 0.03)
        return PsfStack(data=data, z_offsets_um=offs)

    def test_identity(self):
        st = self.make_stack(32)
        out = plane_subset(st, 32)
        assert np.array_equal(out.data, st.data)
        assert out.z_offsets_um == st.z_offsets_um

    def test_single_plane_positive_tie(self):
        st = self.make_stack(32)
        out = plane_subset(st, 1)
        assert out.data[0, 0, 0] == 16  # plane index 16, offset +dz/2
        assert out.z_offsets_um[0] == pytest.approx(0.015)

    def test_two_planes_straddle_focus(self):
        st = self.make_stack(32)
        out = plane_subset(st, 2)
        assert [float(p[0, 0]) for p in out.data] == [0, 31]
        assert out.z_offsets_um[0] < 0 < out.z_offsets_um[1]

    def test_odd_nz_single_plane(self):
        st = self.make_stack(33)
        out = plane_subset(st, 1)
        assert out.z_offsets_um[0] == pytest.approx(0.0)

    def test_values_exact_offsets_increasing(self):
        st = self.make_stack(32)
        for n_z in (3, 5, 7, 16, 31):
            out = plane_subset(st, n_z)
            assert len(out.z_offsets_um) <= n_z
            assert all(
                b > a for a, b in zip(out.z_offsets_um, out.z_offsets_um[1:])
            )
            for plane, z in zip(out.data, out.z_offsets_um):
                src = st.z_offsets_um.index(z)
                assert np.array_equal(plane, st.data[src])

    def test_out_of_range(self):
        st = self.make_stack(8)
        with pytest.raises(ValueError):
            plane_subset(st, 0)
        with pytest.raises(ValueError):
            plane_subset(st, 9)
