import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from affectformer.data import formats as fm
from affectformer.data.dataset import load_dataset, load_features
from affectformer.errors import AlignmentError, DataError, FormatError


def make_seq(rng, t=5, d=8, vid="vid01", start=0):
    feats = rng.normal(size=(t, d)).astype(np.float32).astype(np.float64)
    return fm.FeatureSequence(vid, np.arange(start, start + t), feats)


def make_labels(rng, t=6, vid="vid01"):
    va = rng.uniform(-1, 1, (t, 2))
    expr = rng.integers(0, 8, t)
    au = rng.integers(0, 2, (t, 12))
    va[1] = fm.SENTINEL
    expr[2] = fm.SENTINEL
    au[3] = fm.SENTINEL
    mask = np.ones(t, bool)
    mask[-1] = False
    return fm.LabelSet(np.arange(t) * 2, va, expr, au, mask, vid)


class TestAFSQ:
    def test_round_trip(self, rng, tmp_path):
        seq = make_seq(rng)
        p = tmp_path / "a.afsq"
        fm.write_feature_file(p, seq)
        back = fm.read_feature_file(p)
        assert back.video_id == seq.video_id
        np.testing.assert_array_equal(back.frame_ids, seq.frame_ids)
        np.testing.assert_array_equal(back.features, seq.features)
        assert back.features.dtype == np.float64

    def test_layout(self, rng):
        seq = fm.FeatureSequence("ab", [3, 9], [[1.0, 2.0], [3.0, 4.5]])
        buf = fm.encode_feature_file(seq)
        expect = (b"AFSQ" + struct.pack("<III", 1, 2, 2) + struct.pack("<H", 2) + b"ab"
                  + struct.pack("<QQ", 3, 9) + struct.pack("<4f", 1, 2, 3, 4.5))
        assert buf == expect

    def test_bad_magic(self, rng):
        buf = b"XXXX" + fm.encode_feature_file(make_seq(rng))[4:]
        with pytest.raises(FormatError) as ei:
            fm.decode_feature_file(buf)
        assert ei.value.offset == 0

    def test_bad_version(self, rng):
        buf = bytearray(fm.encode_feature_file(make_seq(rng)))
        buf[4:8] = struct.pack("<I", 2)
        with pytest.raises(FormatError) as ei:
            fm.decode_feature_file(bytes(buf))
        assert ei.value.offset == 4

    def test_truncated_payload(self, rng):
        seq = make_seq(rng, t=3, d=4)
        buf = fm.encode_feature_file(seq)
        with pytest.raises(FormatError, match="truncated feature payload") as ei:
            fm.decode_feature_file(buf[:-16])  # only 2 of 3 rows present
        assert ei.value.offset is not None

    @pytest.mark.parametrize("cut", [0, 3, 10, 17, 20])
    def test_truncated_anywhere(self, rng, cut):
        with pytest.raises(FormatError):
            fm.decode_feature_file(fm.encode_feature_file(make_seq(rng))[:cut])

    def test_trailing_bytes(self, rng):
        with pytest.raises(FormatError, match="trailing"):
            fm.decode_feature_file(fm.encode_feature_file(make_seq(rng)) + b"\0")

    def test_nan_payload(self, rng):
        seq = make_seq(rng, t=3, d=2)
        buf = bytearray(fm.encode_feature_file(seq))
        buf[-4:] = struct.pack("<f", float("nan"))
        with pytest.raises(DataError, match="frame 2"):
            fm.decode_feature_file(bytes(buf))

    def test_path_in_message(self, tmp_path):
        p = tmp_path / "bad.afsq"
        p.write_bytes(b"XXXXjunk")
        with pytest.raises(FormatError, match="bad.afsq"):
            fm.read_feature_file(p)


@settings(max_examples=60, deadline=None)
@given(
    st.integers(1, 12).flatmap(lambda t: st.tuples(
        st.text(min_size=0, max_size=12),
        st.lists(st.integers(0, 2**40), min_size=t, max_size=t, unique=True).map(sorted),
        arrays(np.float32, (t, 3), elements=st.floats(-1e6, 1e6, width=32)),
    ))
)
def test_afsq_byte_round_trip(case):
    vid, fids, feats = case
    seq = fm.FeatureSequence(vid, fids, feats.astype(np.float64))
    buf = fm.encode_feature_file(seq)
    again = fm.encode_feature_file(fm.decode_feature_file(buf))
    assert again == buf


class TestMerge:
    def test_shape_and_columns(self, rng):
        a, b = make_seq(rng, d=4), make_seq(rng, d=6)
        m = fm.merge_streams(a, b)
        assert m.dim == 10
        np.testing.assert_array_equal(m.features[:, :4], a.features)
        np.testing.assert_array_equal(m.features[:, 4:], b.features)

    def test_misaligned(self, rng):
        a = make_seq(rng)
        b = fm.FeatureSequence("vid01", [0, 1, 2, 4, 5], rng.normal(size=(5, 2)))
        with pytest.raises(AlignmentError, match="position 3"):
            fm.merge_streams(a, b)

    def test_different_video(self, rng):
        with pytest.raises(AlignmentError):
            fm.merge_streams(make_seq(rng), make_seq(rng, vid="other"))

    def test_load_features_merges(self, rng, tmp_path):
        a, b = make_seq(rng, d=3), make_seq(rng, d=2)
        fm.write_feature_file(tmp_path / "a.afsq", a)
        fm.write_feature_file(tmp_path / "b.afsq", b)
        assert load_features([tmp_path / "a.afsq", tmp_path / "b.afsq"]).dim == 5


class TestFeatureSequence:
    @pytest.mark.parametrize("fids,feats", [
        ([], np.zeros((0, 2))),
        ([0, 1], np.zeros((3, 2))),
        ([1, 1], np.zeros((2, 2))),
        ([0, 1], [[0.0, np.inf], [0.0, 0.0]]),
    ])
    def test_invalid(self, fids, feats):
        with pytest.raises(DataError):
            fm.FeatureSequence("v", fids, feats)


class TestLabels:
    def test_round_trip(self, rng, tmp_path):
        labels = make_labels(rng)
        p = tmp_path / "l.txt"
        fm.write_label_file(p, labels)
        back = fm.read_label_file(p, video_id="vid01")
        for name in ("frame_ids", "va", "expr", "au", "mask"):
            np.testing.assert_array_equal(getattr(back, name), getattr(labels, name))
        assert fm.format_label_file(back) == p.read_text()

    def test_text_layout(self):
        labels = fm.LabelSet([7], [[0.25, -5]], [3], [[1] + [0] * 11], [True])
        with pytest.raises(DataError):  # one of valence/arousal missing
            fm.parse_label_file(fm.format_label_file(labels))
        labels = fm.LabelSet([7], [[0.25, -0.5]], [3], [[1] + [0] * 11], [True])
        assert fm.format_label_file(labels) == (
            "#affectlabels v1\n7,0.25,-0.5,3,1,0,0,0,0,0,0,0,0,0,0,0,1\n")

    def test_valid_masks(self, rng):
        labels = make_labels(rng)
        assert list(labels.valid("va")) == [1, 0, 1, 1, 1, 0]
        assert list(labels.valid("expr")) == [1, 1, 0, 1, 1, 0]
        assert list(labels.valid("au")) == [1, 1, 1, 0, 1, 0]

    @pytest.mark.parametrize("line,err", [
        ("0,0.1,0.1,9" + ",0" * 12 + ",1", DataError),
        ("0,1.5,0.1,0" + ",0" * 12 + ",1", DataError),
        ("0,0.1,0.1,0" + ",2" + ",0" * 11 + ",1", DataError),
        ("0,0.1,0.1,0" + ",-5" + ",0" * 11 + ",1", DataError),
        ("0,0.1,0.1,0" + ",0" * 12 + ",3", DataError),
        ("0,0.1,0.1,0" + ",0" * 11 + ",1", FormatError),
        ("0,abc,0.1,0" + ",0" * 12 + ",1", FormatError),
    ])
    def test_bad_rows(self, line, err):
        with pytest.raises(err):
            fm.parse_label_file(f"{fm.LABEL_HEADER}\n{line}\n")

    def test_missing_header(self):
        with pytest.raises(FormatError):
            fm.parse_label_file("0,0,0,0" + ",0" * 12 + ",1\n")

    def test_alignment(self, rng):
        seq = make_seq(rng, t=6)
        labels = make_labels(rng)  # even frame ids
        with pytest.raises(AlignmentError, match="position 1"):
            fm.check_alignment(seq, labels)


class TestManifest:
    def test_round_trip_relative(self, rng, tmp_path):
        seq, labels = make_seq(rng, t=6), make_labels(rng)
        labels.frame_ids = seq.frame_ids
        (tmp_path / "f").mkdir()
        fp, lp = tmp_path / "f" / "v.afsq", tmp_path / "f" / "v.txt"
        fm.write_feature_file(fp, seq)
        fm.write_label_file(lp, labels)
        path = tmp_path / "m.tsv"
        fm.write_manifest(path, fm.DatasetManifest("dev", [fm.ManifestRecord("vid01", (fp,), lp)]))
        assert path.read_text() == "#split dev\nvid01\tf/v.afsq\tf/v.txt\n"
        m = fm.read_manifest(path)
        assert m.split == "dev" and m.stream_dims == (8,)
        assert m.records[0].feature_paths == (fp,)
        videos = load_dataset(m)
        assert videos[0].video_id == "vid01" and videos[0].features.T == 6

    def test_bad_field_count(self, tmp_path):
        p = tmp_path / "m.tsv"
        p.write_text("only\tone\n")
        with pytest.raises(FormatError):
            fm.read_manifest(p, validate=False)

    def test_empty_manifest(self, tmp_path):
        p = tmp_path / "m.tsv"
        p.write_text("#split train\n")
        with pytest.raises(DataError):
            load_dataset(p)

    def test_missing_file(self, tmp_path):
        p = tmp_path / "m.tsv"
        p.write_text("v\tnope.afsq\tnope.txt\n")
        with pytest.raises(OSError):
            fm.read_manifest(p)
