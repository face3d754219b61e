"""In-memory localization dataset and its ULOC binary container.

Layout (little-endian)::

    b"ULOC", version u32
    M u32, N_c u32, N_u u32, df f64, f_c f64, d f64, user_height f64
    N_u records:
        position 3*f64, true_los u8, num_paths u32,
        num_paths * (gain_re f64, gain_im f64, aoa f64, toa f64),
        M*N_c * (re f32, im f32), antenna-major
    version 2 only, N_u label records:
        estimate 3*f64, clipped u8, identified u8, label 3*f64

Version 1 files hold raw data; version 2 adds the labelling stage output.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path as FsPath

import numpy as np

from .channel import Path, PathSet, SystemConfig

MAGIC = b"ULOC"
VERSION_RAW = 1
VERSION_LABELED = 2
_HEADER = struct.Struct("<IIIdddd")
_PATH = np.dtype([("re", "<f8"), ("im", "<f8"), ("aoa", "<f8"), ("toa", "<f8")])
_LABEL = np.dtype([("est", "<f8", 3), ("clipped", "u1"), ("identified", "u1"), ("label", "<f8", 3)])


class DatasetError(ValueError):
    pass


@dataclass
class GroundTruthAudit:
    """Read counter shared by a dataset and every copy derived from it."""

    reads: int = 0


@dataclass
class Dataset:
    """Per-user arrays sharing length ``N_u``.

    Ground-truth positions sit behind :attr:`positions`, which counts every
    access in :attr:`audit` so unsupervised stages can prove they never
    touched them. Copies made by :meth:`with_labels` share the counter.
    """

    system: SystemConfig
    user_height: float
    _positions: np.ndarray
    true_los: np.ndarray
    paths: list
    csi: np.ndarray                       # (N_u, M, N_c) complex64
    mb_estimates: np.ndarray | None = None
    mb_clipped: np.ndarray | None = None
    identified: np.ndarray | None = None
    labels: np.ndarray | None = None
    audit: GroundTruthAudit = field(default_factory=GroundTruthAudit, compare=False, repr=False)

    def __post_init__(self):
        n = len(self._positions)
        if not (len(self.true_los) == len(self.paths) == len(self.csi) == n):
            raise DatasetError("per-user arrays differ in length")
        if self.csi.shape[1:] != self.system.shape:
            raise DatasetError(f"CSI shape {self.csi.shape[1:]} does not match system {self.system.shape}")
        for name in ("mb_estimates", "mb_clipped", "identified", "labels"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != n:
                raise DatasetError(f"{name} has {len(arr)} rows, expected {n}")

    def __len__(self) -> int:
        return len(self._positions)

    @property
    def positions(self) -> np.ndarray:
        self.audit.reads += 1
        return self._positions

    @property
    def ground_truth_reads(self) -> int:
        return self.audit.reads

    @property
    def is_labeled(self) -> bool:
        return self.labels is not None

    def with_labels(self, mb_estimates, mb_clipped, identified, labels) -> "Dataset":
        """Shallow copy carrying a (new) labelling stage; raw arrays are shared."""
        return Dataset(self.system, self.user_height, self._positions, self.true_los, self.paths,
                       self.csi, np.asarray(mb_estimates, dtype=float),
                       np.asarray(mb_clipped, dtype=bool), np.asarray(identified, dtype=bool),
                       np.asarray(labels, dtype=float), self.audit)

    def equals(self, other: "Dataset") -> bool:
        """Content equality (arrays compared exactly, audit counter ignored)."""
        if self.system != other.system or self.user_height != other.user_height:
            return False
        if len(self) != len(other) or tuple(self.paths) != tuple(other.paths):
            return False
        for name in ("_positions", "true_los", "csi", "mb_estimates", "mb_clipped", "identified", "labels"):
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None) or (a is not None and not np.array_equal(a, b)):
                return False
        return True

    def summary(self) -> dict:
        n_los = int(np.count_nonzero(self.true_los))
        out = {"n_users": len(self), "n_los": n_los, "n_nlos": len(self) - n_los}
        if self.identified is not None:
            out["n_identified_los"] = int(np.count_nonzero(self.identified))
        return out


def write_dataset(path, ds: Dataset) -> None:
    M, Nc = ds.system.shape
    version = VERSION_LABELED if ds.is_labeled else VERSION_RAW
    csi = np.empty(ds.csi.shape + (2,), dtype="<f4")
    csi[..., 0] = ds.csi.real
    csi[..., 1] = ds.csi.imag
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", version))
        fh.write(_HEADER.pack(M, Nc, len(ds), ds.system.subcarrier_spacing,
                              ds.system.carrier_frequency, ds.system.antenna_spacing, ds.user_height))
        for i in range(len(ds)):
            fh.write(np.asarray(ds._positions[i], dtype="<f8").tobytes())
            fh.write(struct.pack("<BI", bool(ds.true_los[i]), len(ds.paths[i])))
            rec = np.empty(len(ds.paths[i]), dtype=_PATH)
            for k, p in enumerate(ds.paths[i]):
                rec[k] = (p.gain.real, p.gain.imag, p.aoa, p.toa)
            fh.write(rec.tobytes())
            fh.write(csi[i].tobytes())
        if version == VERSION_LABELED:
            lab = np.empty(len(ds), dtype=_LABEL)
            lab["est"] = ds.mb_estimates
            lab["clipped"] = ds.mb_clipped
            lab["identified"] = ds.identified
            lab["label"] = ds.labels
            fh.write(lab.tobytes())


def read_dataset(path) -> Dataset:
    data = FsPath(path).read_bytes()
    if data[:4] != MAGIC:
        raise DatasetError(f"{path} is not a ULOC container")
    (version,) = struct.unpack_from("<I", data, 4)
    if version not in (VERSION_RAW, VERSION_LABELED):
        raise DatasetError(f"unsupported ULOC version {version}")
    M, Nc, n, df, fc, d, height = _HEADER.unpack_from(data, 8)
    pos = 8 + _HEADER.size
    system = SystemConfig(num_antennas=M, num_subcarriers=Nc, subcarrier_spacing=df,
                          carrier_frequency=fc, antenna_spacing=d)
    positions = np.empty((n, 3))
    true_los = np.empty(n, dtype=bool)
    paths = []
    csi = np.empty((n, M, Nc), dtype=np.complex64)
    csi_bytes = M * Nc * 8
    try:
        for i in range(n):
            positions[i] = np.frombuffer(data, "<f8", 3, pos)
            los, npaths = struct.unpack_from("<BI", data, pos + 24)
            true_los[i] = bool(los)
            pos += 29
            rec = np.frombuffer(data, _PATH, npaths, pos)
            pos += npaths * _PATH.itemsize
            # order is not stored; the zero-order flag is restored from true_los
            paths.append(PathSet(Path(complex(r["re"], r["im"]), float(r["aoa"]), float(r["toa"]),
                                      0 if (los and k == 0) else 1)
                                 for k, r in enumerate(rec)))
            raw = np.frombuffer(data, "<f4", 2 * M * Nc, pos).reshape(M, Nc, 2)
            csi[i] = raw[..., 0] + 1j * raw[..., 1]
            pos += csi_bytes
        labels = {}
        if version == VERSION_LABELED:
            lab = np.frombuffer(data, _LABEL, n, pos)
            pos += n * _LABEL.itemsize
            labels = dict(mb_estimates=lab["est"].copy(), mb_clipped=lab["clipped"].astype(bool),
                          identified=lab["identified"].astype(bool), labels=lab["label"].copy())
    except (ValueError, struct.error) as exc:
        raise DatasetError(f"{path} is truncated: {exc}") from None
    if pos != len(data):
        raise DatasetError(f"{path} has {len(data) - pos} trailing bytes")
    return Dataset(system, height, positions, true_los, paths, csi, **labels)
