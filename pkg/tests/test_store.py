import json

import numpy as np
import pytest

from localrb.backends import AnalyticL2, GalerkinCD, SpatialGrid
from localrb.greedy import OfflineConfig, SnapshotLibrary, offline_drive
from localrb.metric import MetricField
from localrb.online import OnlineModel, SnapshotsUnavailable
from localrb.store import BundleError, OfflineBundle, fnv1a64, load_bundle, save_bundle


@pytest.fixture(scope="module")
def analytic_bundle():
    b = AnalyticL2("f1", SpatialGrid((-1.0, -1.0), (1.0, 1.0), (25, 25)), error_norm="l2")
    return offline_drive(b, OfflineConfig(N=3, tol=1e-3, lattice=15))


@pytest.fixture(scope="module")
def cd():
    return GalerkinCD(h=0.05)


@pytest.fixture(scope="module")
def cd_bundle(cd):
    lib = SnapshotLibrary(cd)
    mus = cd.domain.sample(np.random.default_rng(0), 12)
    for m in mus:
        lib.add(m)
    T = np.array([np.diag([2.0, 1.0])] * len(mus))
    field = MetricField(mus, T, np.linspace(0.1, 0.3, len(mus)))
    hist = np.array([[1, 12, 0.5, 100, 100]], dtype=float)
    return OfflineBundle(cd.descriptor(), 5, 1e-4, lib.mus, lib.gram, lib.affine_a, lib.affine_f, field, hist,
                         lib.snapshots(), {"note": "unit"})


def assert_bitwise_equal(a, b):
    for name, x in a.arrays().items():
        y = b.arrays()[name]
        if x is None:
            assert y is None
            continue
        assert x.shape == y.shape, name
        assert x.tobytes() == y.tobytes(), name


def test_fnv_reference_values():
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C


def test_round_trip_is_bitwise(tmp_path, analytic_bundle, cd_bundle):
    for k, bundle in enumerate((analytic_bundle, cd_bundle)):
        path = tmp_path / f"b{k}.lrb"
        save_bundle(bundle, path)
        back = load_bundle(path)
        assert_bitwise_equal(bundle, back)
        assert back.descriptor == bundle.descriptor
        assert back.N == bundle.N and back.tol == bundle.tol
        assert back.meta == json.loads(json.dumps(bundle.meta))
        assert back.field.mode == bundle.field.mode


def test_header_scalars_are_text(tmp_path, cd_bundle):
    path = tmp_path / "b.lrb"
    save_bundle(cd_bundle, path)
    raw = path.read_bytes()
    first, rest = raw.split(b"\n", 1)
    magic, version, hlen = first.decode().split()
    header = json.loads(rest[: int(hlen)])
    assert magic == "LOCRB" and version == "1"
    assert header["scalars"] == {"N": "5", "tol": "0.0001"}
    assert [s["name"] for s in header["sections"]][:3] == ["sample_mus", "gram", "affine_a"]


def test_refuses_overwrite_without_force(tmp_path, cd_bundle):
    path = tmp_path / "b.lrb"
    save_bundle(cd_bundle, path)
    with pytest.raises(FileExistsError):
        save_bundle(cd_bundle, path)
    save_bundle(cd_bundle, path, force=True)


def test_truncated_file_names_missing_section(tmp_path, cd_bundle):
    path = tmp_path / "b.lrb"
    save_bundle(cd_bundle.without_snapshots(), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(BundleError, match="history"):
        load_bundle(path)
    path.write_bytes(raw[:40])
    with pytest.raises(BundleError, match="truncated"):
        load_bundle(path)


def test_corruption_detected_by_checksum(tmp_path, cd_bundle):
    path = tmp_path / "b.lrb"
    save_bundle(cd_bundle, path)
    raw = bytearray(path.read_bytes())
    raw[-8] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(BundleError, match="checksum"):
        load_bundle(path)


def test_bad_magic_and_version(tmp_path, cd_bundle):
    path = tmp_path / "b.lrb"
    path.write_bytes(b"NOTABUNDLE\n{}")
    with pytest.raises(BundleError, match="magic"):
        load_bundle(path)
    save_bundle(cd_bundle, path, force=True)
    raw = path.read_bytes().replace(b"LOCRB 1 ", b"LOCRB 9 ", 1)
    path.write_bytes(raw)
    with pytest.raises(BundleError, match="version"):
        load_bundle(path)


def test_asymmetric_gram_rejected(tmp_path, cd_bundle):
    path = tmp_path / "b.lrb"
    save_bundle(cd_bundle, path)
    raw = path.read_bytes()
    first, rest = raw.split(b"\n", 1)
    hlen = int(first.split()[2])
    header = json.loads(rest[:hlen])
    sec = next(s for s in header["sections"] if s["name"] == "gram")
    body = bytearray(rest[hlen:])
    lo = sec["offset"] + 8  # entry (0, 1)
    val = np.frombuffer(bytes(body[lo:lo + 8]), "<f8")[0] * 1.5
    body[lo:lo + 8] = np.array([val], "<f8").tobytes()
    path.write_bytes(first + b"\n" + rest[:hlen] + bytes(body))
    with pytest.raises(BundleError, match="invariant violation"):
        load_bundle(path, verify=False)
    with pytest.raises(BundleError):
        load_bundle(path)


def test_empty_bundle_round_trip(tmp_path, cd):
    empty = OfflineBundle(cd.descriptor(), 3, 1e-4, np.empty((0, 2)), np.empty((0, 0)), np.empty((3, 0, 0)),
                          np.empty((3, 0)), MetricField.identity(np.empty((0, 2))), np.empty((0, 5)))
    path = tmp_path / "empty.lrb"
    save_bundle(empty, path)
    back = load_bundle(path)
    assert back.K == 0
    assert_bitwise_equal(empty, back)


def test_snapshot_free_bundle_supports_online_galerkin(tmp_path, cd, cd_bundle):
    path = tmp_path / "light.lrb"
    save_bundle(cd_bundle.without_snapshots(), path)
    light = load_bundle(path)
    assert light.snapshots is None
    full = OnlineModel(cd_bundle, cd)
    lite = OnlineModel(light, cd)
    mu = np.array([-1.5, 0.2])
    a, b = full.solve(mu, validate=True), lite.solve(mu)
    assert a.coeffs.tobytes() == b.coeffs.tobytes()
    with pytest.raises(SnapshotsUnavailable, match="snapshots unavailable"):
        lite.solve(mu, validate=True)


def test_invalid_bundle_construction(cd_bundle):
    with pytest.raises(BundleError):
        OfflineBundle(cd_bundle.descriptor, 5, 1e-4, cd_bundle.sample_mus, cd_bundle.gram[:-1, :-1],
                      cd_bundle.affine_a, cd_bundle.affine_f, cd_bundle.field, cd_bundle.history)
