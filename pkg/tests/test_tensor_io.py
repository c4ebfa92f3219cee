import struct

import numpy as np
import pytest
from conftest import random_simplex
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import argmax_scan

from consensus_uda.errors import FormatError
from consensus_uda.tensor_io import (
    argmax_labels,
    read_image,
    read_labelmap,
    read_prediction,
    read_probmap,
    write_image,
    write_labelmap,
    write_probmap,
)


def _roundtrip_bytes(write, read, arr, path):
    write(arr, path)
    first = path.read_bytes()
    back = read(path)
    write(back, path)
    return first, path.read_bytes(), back


class TestNetpbm:
    def test_labelmap_2x2(self, tmp_path):
        labels = np.array([[0, 1], [2, 255]], dtype=np.uint8)
        write_labelmap(labels, tmp_path / "a.pgm")
        assert np.array_equal(read_labelmap(tmp_path / "a.pgm"), labels)

    def test_single_ignore_pixel(self, tmp_path):
        write_labelmap(np.array([[255]], dtype=np.uint8), tmp_path / "a.pgm")
        assert read_labelmap(tmp_path / "a.pgm").tolist() == [[255]]

    def test_header_layout(self, tmp_path):
        write_labelmap(np.zeros((2, 3), dtype=np.uint8), tmp_path / "a.pgm")
        assert (tmp_path / "a.pgm").read_bytes() == b"P5\n3 2\n255\n" + bytes(6)

    def test_comment_in_header(self, tmp_path):
        (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x03\x04")
        assert read_labelmap(tmp_path / "c.pgm").tolist() == [[3, 4]]

    @pytest.mark.parametrize(
        "payload, fragment",
        [
            (b"P5\n2 2\n65535\n" + bytes(8), "maxval"),
            (b"P5\n2 2\n255\n\x00", "truncated"),
            (b"P6\n1 1\n255\n\x00\x00\x00", "magic"),
            (b"P5\n2 x\n255\n\x00\x00", "malformed"),
            (b"P5\n2", "truncated"),
        ],
    )
    def test_rejects(self, tmp_path, payload, fragment):
        (tmp_path / "bad.pgm").write_bytes(payload)
        with pytest.raises(FormatError, match=fragment):
            read_labelmap(tmp_path / "bad.pgm")

    @given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_image_round_trip_byte_exact(self, tmp_path_factory, h, w, seed):
        path = tmp_path_factory.mktemp("ppm") / "x.ppm"
        img = np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8)
        first, second, back = _roundtrip_bytes(write_image, read_image, img, path)
        assert first == second and np.array_equal(back, img)
        assert read_image(path).dtype == np.uint8


class TestProbmap:
    def test_half_half(self, tmp_path):
        p = np.array([[[0.5, 0.5]]], dtype=np.float32)
        first, second, back = _roundtrip_bytes(write_probmap, read_probmap, p, tmp_path / "p.pmf")
        assert first == second and back.tobytes() == p.tobytes()
        assert first == b"PMF1" + struct.pack("<III", 1, 1, 2) + struct.pack("<ff", 0.5, 0.5)

    def test_random_2x3x4_byte_exact(self, tmp_path, rng):
        p = random_simplex(rng, (2, 3), 4).astype(np.float32)
        first, second, back = _roundtrip_bytes(write_probmap, read_probmap, p, tmp_path / "p.pmf")
        assert first == second
        assert first[16:] == p.astype("<f4").tobytes()

    def test_channel_fastest_layout(self, tmp_path):
        p = np.zeros((2, 2, 3), dtype=np.float32)
        p[..., 0] = 1.0
        p[1, 0] = (0.0, 0.0, 1.0)
        write_probmap(p, tmp_path / "p.pmf")
        body = np.frombuffer((tmp_path / "p.pmf").read_bytes()[16:], dtype="<f4")
        # index ((h*W)+w)*C + c for h=1, w=0, c=2
        assert body[(1 * 2 + 0) * 3 + 2] == 1.0

    def test_simplex_violation_names_pixel(self, tmp_path):
        p = np.array([[[0.45, 0.45]]], dtype=np.float32)
        (tmp_path / "p.pmf").write_bytes(b"PMF1" + struct.pack("<III", 1, 1, 2) + p.astype("<f4").tobytes())
        with pytest.raises(FormatError, match=r"pixel \(0,0\)"):
            read_probmap(tmp_path / "p.pmf")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "p.pmf").write_bytes(b"PMF2" + struct.pack("<III", 1, 1, 1) + b"\0\0\x80\x3f")
        with pytest.raises(FormatError, match="magic"):
            read_probmap(tmp_path / "p.pmf")

    def test_dimension_overflow(self, tmp_path):
        (tmp_path / "p.pmf").write_bytes(b"PMF1" + struct.pack("<III", 2**31, 2**31, 4))
        with pytest.raises(FormatError):
            read_probmap(tmp_path / "p.pmf")

    @given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_round_trip_property(self, tmp_path_factory, h, w, c, seed):
        path = tmp_path_factory.mktemp("pmf") / "x.pmf"
        p = random_simplex(np.random.default_rng(seed), (h, w), c).astype(np.float32)
        first, second, back = _roundtrip_bytes(write_probmap, read_probmap, p, path)
        assert first == second and back.tobytes() == p.tobytes()


class TestArgmax:
    def test_simple(self):
        assert argmax_labels(np.array([[[0.1, 0.7, 0.2]]])).tolist() == [[1]]

    def test_tie_goes_low(self):
        assert argmax_labels(np.array([[[0.5, 0.5]]])).tolist() == [[0]]

    def test_matches_linear_scan(self, rng):
        p = random_simplex(rng, (4, 4), 5)
        p[0, 0] = (0.3, 0.3, 0.1, 0.3, 0.0)
        assert np.array_equal(argmax_labels(p), argmax_scan(p))

    def test_read_prediction_from_pmf(self, tmp_path, rng):
        p = random_simplex(rng, (3, 3), 4).astype(np.float32)
        write_probmap(p, tmp_path / "a.pmf")
        assert np.array_equal(read_prediction(tmp_path / "a.pmf"), argmax_scan(p))
