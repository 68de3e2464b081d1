"""Training data sources: the PNS1 binary pipe and on-disk dataset folders.

The trainer talks to the PSF toolkit only through its public surfaces: the
`aberro dataset stream` pipe, generated dataset directories, and NPY stacks.
"""

from __future__ import annotations

import json
import struct
import subprocess
import threading
from pathlib import Path
from queue import Queue
from typing import BinaryIO, Iterator

import numpy as np

STREAM_MAGIC = b"PNS1"


class StreamFormatError(RuntimeError):
    """The pipe violates the PNS1 schema; the message names the field."""


def read_pipe_header(fh: BinaryIO) -> dict:
    magic = fh.read(4)
    if magic != STREAM_MAGIC:
        raise StreamFormatError(f"magic: expected {STREAM_MAGIC!r}, got {magic!r}")
    line = bytearray()
    while True:
        c = fh.read(1)
        if not c:
            raise StreamFormatError("header: stream ended before the JSON line")
        if c == b"\n":
            break
        line.extend(c)
    try:
        header = json.loads(line.decode())
    except json.JSONDecodeError as exc:
        raise StreamFormatError(f"header: not valid JSON ({exc})") from exc
    for field in ("config", "sampler", "batch_size"):
        if field not in header:
            raise StreamFormatError(f"header.{field}: missing")
    for field in ("nz", "ny", "nx"):
        if field not in header["config"]:
            raise StreamFormatError(f"header.config.{field}: missing")
    if "mode_set" not in header["sampler"]:
        raise StreamFormatError("header.sampler.mode_set: missing")
    return header


def read_pipe_records(fh: BinaryIO, header: dict) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (amplitude row, volume) pairs until the pipe closes."""
    cfg = header["config"]
    n_modes = len(header["sampler"]["mode_set"])
    vol_count = cfg["nz"] * cfg["ny"] * cfg["nx"]
    expected = 4 * n_modes + 4 * vol_count
    while True:
        raw = fh.read(4)
        if not raw:
            return
        if len(raw) < 4:
            raise StreamFormatError("record.length: truncated")
        (length,) = struct.unpack("<I", raw)
        if length != expected:
            raise StreamFormatError(
                f"record.length: got {length}, expected {expected} "
                f"({n_modes} amplitudes + {vol_count} voxels as float32)"
            )
        payload = fh.read(length)
        if len(payload) < length:
            raise StreamFormatError("record.payload: truncated")
        amps = np.frombuffer(payload, dtype="<f4", count=n_modes).copy()
        vol = np.frombuffer(payload, dtype="<f4", offset=4 * n_modes, count=vol_count)
        yield amps, vol.reshape(cfg["nz"], cfg["ny"], cfg["nx"]).copy()


class PipeSource:
    """Spawns `aberro dataset stream` and buffers records on a reader thread."""

    def __init__(
        self,
        preset: str,
        mode_set: tuple[int, ...],
        seed: int,
        batch_size: int = 2,
        photons: float = 5000.0,
        gaussian_sigma: float = 2.0,
        aberro_cmd: str = "aberro",
        buffer_batches: int = 64,
    ):
        self.batch_size = batch_size
        argv = [
            aberro_cmd, "--seed", str(seed), "dataset", "stream",
            "--preset", preset, "--batch", str(batch_size),
            "--modes", ",".join(str(m) for m in mode_set),
            "--photons", str(photons), "--gaussian-sigma", str(gaussian_sigma),
        ]
        self._proc = subprocess.Popen(argv, stdout=subprocess.PIPE)
        assert self._proc.stdout is not None
        self.header = read_pipe_header(self._proc.stdout)
        self._queue: Queue = Queue(maxsize=buffer_batches * batch_size)
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    def _pump(self) -> None:
        try:
            for record in read_pipe_records(self._proc.stdout, self.header):
                self._queue.put(record)
        except Exception as exc:  # surfaced on the consumer side
            self._queue.put(exc)
        finally:
            self._queue.put(None)

    def batches(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Yield (volumes (B,nz,ny,nx), amplitudes (B,M)) forever."""
        while True:
            vols, amps = [], []
            for _ in range(self.batch_size):
                item = self._queue.get()
                if item is None:
                    return
                if isinstance(item, Exception):
                    raise item
                a, v = item
                amps.append(a)
                vols.append(v)
            yield np.stack(vols), np.stack(amps)

    def close(self) -> None:
        if self._proc.poll() is None:
            self._proc.terminate()
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class FolderSource:
    """Cycles through a generated dataset directory in sample order."""

    def __init__(self, path: str | Path, batch_size: int = 2):
        self.path = Path(path)
        self.batch_size = batch_size
        manifest = json.loads((self.path / "manifest.json").read_text())
        self.header = {
            "config": manifest["config"],
            "sampler": manifest["sampler"],
            "batch_size": batch_size,
        }
        self.mode_set = tuple(manifest["sampler"]["mode_set"])
        self._files = [rec["file"] for rec in manifest["samples"]]
        if not self._files:
            raise ValueError(f"{path}: dataset is empty")
        self._amps = [
            np.array([rec["amplitudes"].get(str(m), 0.0) for m in self.mode_set],
                     dtype=np.float32)
            for rec in manifest["samples"]
        ]

    def batches(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        index = 0
        while True:
            vols, amps = [], []
            for _ in range(self.batch_size):
                i = index % len(self._files)
                vols.append(np.load(self.path / self._files[i]))
                amps.append(self._amps[i])
                index += 1
            yield np.stack(vols), np.stack(amps)

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def load_folder_table(path: str | Path) -> tuple[list[np.ndarray], np.ndarray, tuple[int, ...]]:
    """All volumes and amplitude rows of a dataset folder (for validation)."""
    src = FolderSource(path, batch_size=1)
    vols = [np.load(src.path / f) for f in src._files]
    return vols, np.stack(src._amps), src.mode_set


def open_source(source: str, batch_size: int, **pipe_kwargs):
    """A dataset directory path, or "preset:<name>" for a live pipe."""
    if source.startswith("preset:"):
        return PipeSource(source.split(":", 1)[1], batch_size=batch_size, **pipe_kwargs)
    return FolderSource(source, batch_size=batch_size)
