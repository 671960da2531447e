import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conftest import random_cloud
from urbanseg.core import PointCloud
from urbanseg.errors import FormatError
from urbanseg.ply import parse_header, read_ply, save_ply, write_ply


def _ascii(body: str, header_extra: str = "", count: int = 1) -> bytes:
    return (
        "ply\nformat ascii 1.0\n"
        f"element vertex {count}\nproperty float x\nproperty float y\nproperty float z\n"
        f"{header_extra}end_header\n{body}"
    ).encode()


def test_single_ascii_vertex():
    cloud = read_ply(_ascii("0 0 0\n"))
    assert len(cloud) == 1
    assert cloud.positions.tolist() == [[0.0, 0.0, 0.0]]
    assert cloud.colors is None and cloud.labels is None


def test_binary_round_trip_is_bit_identical(rng):
    cloud = random_cloud(rng, 500)
    back = read_ply(write_ply(cloud))
    assert back.equals(cloud)


def test_round_trip_10000_points(rng):
    cloud = PointCloud(rng.normal(scale=1e4, size=(10000, 3)))
    back = read_ply(write_ply(cloud))
    assert np.max(np.abs(back.positions - cloud.positions)) == 0.0


def test_truncated_binary_body(rng):
    data = write_ply(random_cloud(rng, 10))
    with pytest.raises(FormatError):
        read_ply(data[:-5])


def test_truncated_ascii_body():
    with pytest.raises(FormatError):
        read_ply(_ascii("0 0 0\n" * 9, count=10))


def test_empty_cloud_is_valid():
    data = write_ply(PointCloud(np.zeros((0, 3))))
    assert parse_header(data).vertex_count == 0
    assert len(read_ply(data)) == 0


def test_two_point_layout():
    cloud = PointCloud(np.arange(6.0).reshape(2, 3), [[1, 2, 3], [4, 5, 6]], [0, 4])
    data = write_ply(cloud)
    header = parse_header(data)
    assert [p[0] for p in header.properties] == ["x", "y", "z", "red", "green", "blue", "class"]
    assert len(data) - header.header_size == 2 * (3 * 8 + 3 + 1)


@pytest.mark.parametrize(
    "bad",
    [
        b"plx\nformat ascii 1.0\nend_header\n",
        b"ply\nformat binary_big_endian 1.0\nelement vertex 0\nproperty double x\nend_header\n",
        b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\n",
        b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float x\nend_header\n0 0\n",
        b"ply\nformat ascii 1.0\nelement face 1\nproperty float x\nend_header\n0\n",
    ],
)
def test_malformed_headers(bad):
    with pytest.raises(FormatError):
        read_ply(bad)


def test_missing_coordinate():
    data = b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n0 0\n"
    with pytest.raises(FormatError):
        read_ply(data)


def test_label_property_search_order():
    extra = "property uchar label\nproperty uchar scalar_Label\n"
    cloud = read_ply(_ascii("0 0 0 3 1\n", extra))
    assert cloud.labels.tolist() == [3]
    cloud = read_ply(_ascii("0 0 0 3 1\n", extra), label_properties=("scalar_Label",))
    assert cloud.labels.tolist() == [1]


def test_schema_comment_round_trip(rng):
    cloud = random_cloud(rng, 4, num_classes=8, schema="synth_source")
    assert read_ply(write_ply(cloud)).schema_name == "synth_source"


def test_ascii_and_binary_agree(rng):
    cloud = random_cloud(rng, 200)
    a = read_ply(write_ply(cloud, binary=False))
    b = read_ply(write_ply(cloud, binary=True))
    assert a.equals(b) and a.equals(cloud)


def test_save_ply(tmp_path, rng):
    cloud = random_cloud(rng, 20)
    save_ply(cloud, tmp_path / "sub" / "c.ply")
    assert read_ply(tmp_path / "sub" / "c.ply").equals(cloud)


finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@settings(max_examples=50, deadline=None)
@given(
    hnp.arrays(np.float64, st.tuples(st.integers(0, 30), st.just(3)), elements=finite),
    st.booleans(),
    st.booleans(),
    st.booleans(),
)
def test_read_write_identity(positions, with_colors, with_labels, binary):
    n = len(positions)
    rng = np.random.default_rng(n)
    cloud = PointCloud(
        positions,
        rng.integers(0, 256, (n, 3)) if with_colors else None,
        rng.integers(0, 5, n) if with_labels else None,
    )
    back = read_ply(write_ply(cloud, binary=binary))
    assert back.positions.tobytes() == cloud.positions.tobytes()
    assert back.equals(cloud)
