import filecmp

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from affectformer.data import (
    AugmentPolicy,
    BalancedSampler,
    FeatureSequence,
    LabelSet,
    SynthSpec,
    augment_window,
    balanced_index_stream,
    generate,
    make_windows,
    majority_label,
    synthesize_dataset,
    window_starts,
)
from affectformer.data.formats import SENTINEL
from affectformer.errors import ConfigError, DataError


def seq_and_labels(rng, t, expr=None):
    fids = np.arange(t) + 100
    seq = FeatureSequence("v", fids, rng.normal(size=(t, 3)))
    expr = rng.integers(0, 8, t) if expr is None else np.asarray(expr)
    labels = LabelSet(fids, rng.uniform(-1, 1, (t, 2)), expr, rng.integers(0, 2, (t, 12)),
                      np.ones(t, bool), "v")
    return seq, labels


class TestWindows:
    def test_tail_window(self):
        assert window_starts(10, 4, 4) == [(0, 4), (4, 4), (8, 2)]

    def test_short_video(self):
        assert window_starts(3, 8, 4) == [(0, 3)]

    def test_stride_one_no_tail(self):
        assert window_starts(3, 2, 1) == [(0, 2), (1, 2)]

    def test_tail_needs_valid_frame(self):
        valid = np.ones(10, bool)
        valid[8:] = False
        assert window_starts(10, 4, 4, valid) == [(0, 4), (4, 4)]

    def test_windows_slice_labels(self, rng):
        seq, labels = seq_and_labels(rng, 10)
        ws = make_windows(seq, labels, 4, 4)
        assert [w.start for w in ws] == [0, 4, 8]
        w = ws[2]
        np.testing.assert_array_equal(w.frame_ids, [108, 109])
        np.testing.assert_array_equal(w.labels.frame_ids, w.frame_ids)
        np.testing.assert_array_equal(w.features, seq.features[8:])
        assert w.center == 8.5

    def test_unlabelled_sequence(self, rng):
        seq, _ = seq_and_labels(rng, 7)
        ws = make_windows(seq, None, 4, 4)
        assert [(w.start, w.length) for w in ws] == [(0, 4), (4, 3)]
        assert not ws[0].labels.any_valid().any()

    def test_bad_args(self):
        with pytest.raises(ValueError):
            window_starts(5, 0, 1)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 80), st.integers(1, 20), st.data())
def test_windows_cover_all_frames(t, win, data):
    stride = data.draw(st.integers(1, win))
    covered = np.zeros(t, bool)
    for s, n in window_starts(t, win, stride):
        assert n <= win and s + n <= t
        covered[s:s + n] = True
    assert covered.all()


class TestSampler:
    def test_majority_tie_smallest(self):
        assert majority_label([3, 3, 1, 1, 5], np.ones(5, bool)) == 1
        assert majority_label([3, 3, 1, 1, 5], [1, 1, 1, 0, 1]) == 3
        assert majority_label([2], [False]) is None

    def test_imbalanced_split(self):
        classes = [0] * 900 + [1] * 100
        draws = np.array(BalancedSampler(classes, seed=3).draw(10_000)) >= 900
        assert abs(draws.mean() - 0.5) <= 0.05

    def test_chi_square_uniform(self):
        # 5 classes with sizes 1..500; chi^2 with 4 dof, 0.999 quantile 18.47
        classes = sum(([c] * n for c, n in enumerate((500, 120, 40, 7, 1))), [])
        cls = np.asarray(classes)
        draws = cls[BalancedSampler(classes, seed=11).draw(10_000)]
        counts = np.bincount(draws, minlength=5)
        chi2 = ((counts - 2000) ** 2 / 2000).sum()
        assert chi2 < 18.47

    def test_single_class(self):
        classes = [4, None, 4, 4]
        assert set(BalancedSampler(classes, 0).draw(100)) == {0, 2, 3}

    def test_deterministic(self):
        classes = [0, 1, 2, 1, 0]
        assert BalancedSampler(classes, 9).draw(50) == BalancedSampler(classes, 9).draw(50)

    def test_empty(self):
        with pytest.raises(DataError):
            BalancedSampler([None, None], 0)

    def test_from_windows(self, rng):
        seq, labels = seq_and_labels(rng, 12, expr=[0] * 8 + [5] * 4)
        ws = make_windows(seq, labels, 4, 4)
        stream = balanced_index_stream(ws, seed=1)
        assert stream.class_ids == [0, 5]
        tracks = [w.labels.track("expr") for w in ws]
        assert balanced_index_stream(tracks, 1).draw(20) == stream.draw(20)


class TestAugment:
    def window(self, rng, t=20):
        seq, labels = seq_and_labels(rng, t)
        labels.mask[3] = False
        labels.expr[5] = SENTINEL
        return make_windows(seq, labels, t, t)[0]

    def test_identity(self, rng):
        w = self.window(rng)
        state = rng.bit_generator.state
        assert augment_window(w, AugmentPolicy(), rng) is w
        assert rng.bit_generator.state == state

    def test_noise_keeps_labels(self, rng):
        w = self.window(rng)
        out = augment_window(w, AugmentPolicy(noise_prob=1.0, noise_sigma=0.1), rng)
        assert not np.array_equal(out.features, w.features)
        for name in ("va", "expr", "au", "mask", "frame_ids"):
            np.testing.assert_array_equal(getattr(out.labels, name), getattr(w.labels, name))

    def test_crop_contiguous(self, rng):
        w = self.window(rng)
        policy = AugmentPolicy(crop_prob=1.0)
        for _ in range(50):
            out = augment_window(w, policy, rng)
            assert out.length >= 10
            off = out.start - w.start
            np.testing.assert_array_equal(out.frame_ids, w.frame_ids[off:off + out.length])
            np.testing.assert_array_equal(out.labels.expr, w.labels.expr[off:off + out.length])
            np.testing.assert_array_equal(out.labels.mask, w.labels.mask[off:off + out.length])
            np.testing.assert_array_equal(out.features, w.features[off:off + out.length])

    def test_frame_drop(self, rng):
        w = self.window(rng)
        out = augment_window(w, AugmentPolicy(drop_prob=1.0), rng)
        changed = np.flatnonzero(np.any(out.features != w.features, axis=1))
        assert len(changed) == 2
        np.testing.assert_allclose(out.features[changed], np.tile(w.features.mean(0), (2, 1)))

    def test_labels_never_edited(self, rng):
        w = self.window(rng, t=32)
        policy = AugmentPolicy(noise_prob=0.5, crop_prob=0.5, drop_prob=0.5)
        for _ in range(100):
            out = augment_window(w, policy, rng)
            idx = np.searchsorted(w.frame_ids, out.frame_ids)
            np.testing.assert_array_equal(out.labels.va, w.labels.va[idx])
            np.testing.assert_array_equal(out.labels.au, w.labels.au[idx])
            # masked frames stay masked
            assert not np.any(out.labels.mask & ~w.labels.mask[idx])

    @pytest.mark.parametrize("kw", [dict(noise_prob=1.5), dict(drop_frac=0.2),
                                    dict(min_crop_frac=0.3), dict(noise_sigma=-1)])
    def test_invalid_policy(self, kw):
        with pytest.raises(ConfigError):
            AugmentPolicy(**kw)


class TestSynth:
    spec = SynthSpec(train_videos=3, val_videos=1, frames=60, stream_a=5, stream_b=3, seed=5)

    def test_byte_identical(self, tmp_path):
        synthesize_dataset(self.spec, tmp_path / "a")
        synthesize_dataset(self.spec, tmp_path / "b")
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert len(files) == 4 * 3 + 2
        _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b",
                                               [str(f) for f in files], shallow=False)
        assert not mismatch and not errors

    def test_seed_changes_output(self):
        a = generate(self.spec)["train"][0][0].features
        b = generate(SynthSpec(**{**self.spec.__dict__, "seed": 6}))["train"][0][0].features
        assert not np.array_equal(a, b)

    def test_va_range_and_consistency(self):
        for split in generate(self.spec).values():
            for seq, labels in split:
                va = labels.va[labels.valid("va")]
                assert np.all(np.abs(va) <= 1.0)
                assert seq.T == labels.T == 60
                assert seq.dim == 8

    def test_nearest_centroid(self):
        spec = SynthSpec(train_videos=4, val_videos=2, frames=200, seed=2)
        data = generate(spec)

        def stack(split):
            xs, ys = [], []
            for seq, labels in data[split]:
                ok = labels.valid("expr")
                xs.append(seq.features[ok])
                ys.append(labels.expr[ok])
            return np.concatenate(xs), np.concatenate(ys)

        x, y = stack("train")
        cents = np.stack([x[y == c].mean(0) for c in range(8)])
        xv, yv = stack("val")
        pred = np.argmin(((xv[:, None, :] - cents[None]) ** 2).sum(-1), axis=1)
        assert (pred == yv).mean() > 0.9

    def test_parse(self):
        s = SynthSpec.parse("frames=32, cluster_sep=2.5\nstream_b=0")
        assert (s.frames, s.cluster_sep, s.stream_b) == (32, 2.5, 0)
        with pytest.raises(ConfigError):
            SynthSpec.parse("bogus=1")

    def test_single_stream(self, tmp_path):
        m = synthesize_dataset(SynthSpec(train_videos=1, val_videos=0, frames=8, stream_b=0), tmp_path)
        assert list(m) == ["train"]
        assert len(m["train"].records[0].feature_paths) == 1
