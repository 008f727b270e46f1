"""Offline bundle and its single-file container.

Layout: an ASCII first line ``LOCRB <version> <header bytes>``, a JSON header
(descriptor, dimensions, scalars, and one entry per array section with its
shape, byte offset, length and 64-bit FNV-1a checksum), then the sections as
little-endian binary64 in declared order.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .metric import MetricField

__all__ = ["FORMAT_VERSION", "BundleError", "OfflineBundle", "save_bundle", "load_bundle", "fnv1a64"]

FORMAT_VERSION = 1
MAGIC = "LOCRB"
HISTORY_COLUMNS = ("iteration", "K", "max_err", "eta_evals", "train_size")
SECTIONS = (
    "sample_mus",
    "gram",
    "affine_a",
    "affine_f",
    "field_nodes",
    "field_tensors",
    "field_radii",
    "history",
    "snapshots",
)


class BundleError(ValueError):
    """Malformed, corrupted or inconsistent bundle file."""


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash of ``data``."""
    h = 0xCBF29CE484222325
    prime = 0x100000001B3
    mask = 0xFFFFFFFFFFFFFFFF
    for byte in data:
        h = ((h ^ byte) * prime) & mask
    return h


@dataclass(eq=False)
class OfflineBundle:
    """Everything the online stage needs, plus run metadata.

    ``snapshots`` may be ``None`` (pure-online bundle). For Galerkin problems
    ``affine_a`` has shape ``(Q_a, K, K)`` and ``affine_f`` ``(Q_f, K)``;
    projection problems store empty blocks.
    """

    descriptor: dict
    N: int
    tol: float
    sample_mus: np.ndarray
    gram: np.ndarray
    affine_a: np.ndarray
    affine_f: np.ndarray
    field: MetricField
    history: np.ndarray
    snapshots: np.ndarray | None = None
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def __post_init__(self):
        p = len(self.descriptor.get("domain_lower", [])) or np.shape(self.sample_mus)[-1]
        try:
            self.sample_mus = np.asarray(self.sample_mus, dtype=float).reshape(-1, p)
            K = self.sample_mus.shape[0]
            self.gram = np.asarray(self.gram, dtype=float).reshape(K, K)
        except ValueError as exc:
            raise BundleError(f"inconsistent dimensions: {exc}") from exc
        self.affine_a = np.asarray(self.affine_a, dtype=float)
        self.affine_f = np.asarray(self.affine_f, dtype=float)
        if self.affine_a.size == 0:
            self.affine_a = self.affine_a.reshape(self.affine_a.shape[0] if self.affine_a.ndim == 3 else 0, K, K)
        if self.affine_f.size == 0:
            self.affine_f = self.affine_f.reshape(self.affine_f.shape[0] if self.affine_f.ndim == 2 else 0, K)
        self.history = np.asarray(self.history, dtype=float).reshape(-1, len(HISTORY_COLUMNS))
        if self.snapshots is not None:
            self.snapshots = np.asarray(self.snapshots, dtype=float).reshape(K, -1)
        self.validate()

    @property
    def K(self) -> int:
        return self.sample_mus.shape[0]

    def validate(self):
        """Check index-space consistency and Gram symmetry; raise ``BundleError``."""
        K = self.K
        if self.version != FORMAT_VERSION:
            raise BundleError(f"unsupported bundle version {self.version}")
        if not isinstance(self.N, int) or self.N < 1:
            raise BundleError("N must be a positive integer")
        if self.gram.shape != (K, K):
            raise BundleError(f"Gram matrix shape {self.gram.shape} does not match K={K}")
        if not np.array_equal(self.gram, self.gram.T):
            raise BundleError("invariant violation: Gram matrix is not symmetric")
        if K and np.any(np.diag(self.gram) <= 0):
            raise BundleError("invariant violation: Gram matrix has a nonpositive diagonal")
        if self.affine_a.ndim != 3 or self.affine_a.shape[1:] != (K, K):
            raise BundleError(f"affine operator blocks have shape {self.affine_a.shape}, expected (Q, {K}, {K})")
        if self.affine_f.ndim != 2 or self.affine_f.shape[1] != K:
            raise BundleError(f"affine right-side blocks have shape {self.affine_f.shape}, expected (Q, {K})")
        if self.descriptor.get("backend") == "galerkin" and K and (
            self.affine_a.shape[0] == 0 or self.affine_f.shape[0] == 0
        ):
            raise BundleError("Galerkin bundle lacks affine blocks")
        if self.snapshots is not None and self.snapshots.shape[0] != K:
            raise BundleError("snapshot count does not match K")
        if len(self.field) and self.field.dim != self.sample_mus.shape[1]:
            raise BundleError("metric field dimension does not match the parameter dimension")

    def coefficients(self, mu):
        """Affine coefficient values ``(g(mu), h(mu))`` (Galerkin problems only)."""
        from .backends.galerkin import coefficients

        if self.descriptor.get("backend") != "galerkin":
            raise TypeError("affine coefficients exist only for Galerkin problems")
        g = coefficients(mu)
        return g, g

    def without_snapshots(self) -> "OfflineBundle":
        return OfflineBundle(self.descriptor, self.N, self.tol, self.sample_mus, self.gram, self.affine_a,
                             self.affine_f, self.field, self.history, None, dict(self.meta), self.version)

    def history_records(self) -> list[dict]:
        return [
            {c: (float(v) if c == "max_err" else int(v)) for c, v in zip(HISTORY_COLUMNS, row)}
            for row in self.history
        ]

    @classmethod
    def from_state(cls, backend, state, config) -> "OfflineBundle":
        lib = state.library
        hist = np.array([[r[c] for c in HISTORY_COLUMNS] for r in state.history], dtype=float)
        meta = {
            "train_mode": config.train_mode,
            "metric_mode": config.metric_mode,
            "seed": config.seed,
            "iterations": state.iteration,
            "eta_evals": state.eta_evals,
            "final_err": state.err,
            "train_size": len(state.train),
            "interpolation": state.field.mode,
        }
        return cls(
            descriptor=backend.descriptor(),
            N=int(config.N),
            tol=float(config.tol),
            sample_mus=lib.mus,
            gram=lib.gram,
            affine_a=lib.affine_a,
            affine_f=lib.affine_f,
            field=state.field,
            history=hist,
            snapshots=lib.snapshots(),
            meta=meta,
        )

    def arrays(self) -> dict:
        return {
            "sample_mus": self.sample_mus,
            "gram": self.gram,
            "affine_a": self.affine_a,
            "affine_f": self.affine_f,
            "field_nodes": self.field.nodes,
            "field_tensors": self.field.tensors,
            "field_radii": self.field.radii,
            "history": self.history,
            "snapshots": self.snapshots,
        }


def _checksum(buf: bytes) -> str:
    return f"{fnv1a64(buf):016x}"


def save_bundle(bundle: OfflineBundle, path, force: bool = False) -> None:
    """Write ``bundle`` to ``path``; refuses to overwrite unless ``force``."""
    bundle.validate()
    path = os.fspath(path)
    if os.path.exists(path) and not force:
        raise FileExistsError(f"{path} exists; pass force=True to overwrite")
    sections = []
    blobs = []
    offset = 0
    for name, arr in bundle.arrays().items():
        if arr is None:
            continue
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        sections.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data),
                         "fnv1a64": _checksum(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        "format": MAGIC,
        "version": bundle.version,
        "descriptor": bundle.descriptor,
        "dims": {"K": bundle.K, "p": int(bundle.sample_mus.shape[1]), "Q_a": int(bundle.affine_a.shape[0]),
                 "Q_f": int(bundle.affine_f.shape[0]), "train": len(bundle.field),
                 "ndof": None if bundle.snapshots is None else int(bundle.snapshots.shape[1])},
        "scalars": {"N": str(bundle.N), "tol": repr(bundle.tol)},
        "field_mode": bundle.field.mode,
        "meta": bundle.meta,
        "sections": sections,
    }
    text = json.dumps(header, sort_keys=True, indent=1).encode("ascii")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(f"{MAGIC} {bundle.version} {len(text)}\n".encode("ascii"))
        fh.write(text)
        for data in blobs:
            fh.write(data)
    os.replace(tmp, path)


def load_bundle(path, verify: bool = True) -> OfflineBundle:
    """Read and revalidate a bundle written by ``save_bundle``.

    Raises
    ------
    BundleError
        Bad magic, unsupported version, truncated or corrupted section, or an
        invariant violation such as an asymmetric Gram matrix.
    """
    with open(os.fspath(path), "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    first = raw[:nl].decode("ascii", errors="replace").split() if nl >= 0 else []
    if len(first) != 3 or first[0] != MAGIC:
        raise BundleError("not a bundle file (bad magic line)")
    version, hlen = int(first[1]), int(first[2])
    if version != FORMAT_VERSION:
        raise BundleError(f"unsupported bundle version {version} (expected {FORMAT_VERSION})")
    start = nl + 1
    if len(raw) < start + hlen:
        raise BundleError("truncated file: header incomplete")
    try:
        header = json.loads(raw[start:start + hlen].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BundleError(f"corrupted header: {exc}") from exc
    body = memoryview(raw)[start + hlen:]
    arrays = {}
    for sec in header["sections"]:
        name = sec["name"]
        lo, n = sec["offset"], sec["nbytes"]
        if lo + n > len(body):
            raise BundleError(f"truncated file: section '{name}' is missing or incomplete")
        data = bytes(body[lo:lo + n])
        if n != 8 * int(np.prod(sec["shape"], dtype=int)):
            raise BundleError(f"section '{name}' length does not match its shape")
        if verify and _checksum(data) != sec["fnv1a64"]:
            raise BundleError(f"checksum mismatch in section '{name}'")
        arrays[name] = np.frombuffer(data, dtype="<f8").astype(float).reshape(sec["shape"])
    missing = [s for s in SECTIONS if s != "snapshots" and s not in arrays]
    if missing:
        raise BundleError(f"missing section '{missing[0]}'")
    p = header["dims"]["p"]
    fld = MetricField(arrays["field_nodes"].reshape(-1, p), arrays["field_tensors"].reshape(-1, p, p),
                      arrays["field_radii"], header.get("field_mode", "auto"))
    try:
        return OfflineBundle(
            descriptor=header["descriptor"],
            N=int(header["scalars"]["N"]),
            tol=float(header["scalars"]["tol"]),
            sample_mus=arrays["sample_mus"],
            gram=arrays["gram"],
            affine_a=arrays["affine_a"],
            affine_f=arrays["affine_f"],
            field=fld,
            history=arrays["history"],
            snapshots=arrays.get("snapshots"),
            meta=header.get("meta", {}),
            version=version,
        )
    except BundleError:
        raise
    except ValueError as exc:
        raise BundleError(f"invariant violation: {exc}") from exc
