import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from avfusion.embedspace import (
    FACE_DIM,
    VOICE_DIM,
    CorruptionSpec,
    Dataset,
    SyntheticConfig,
    average_voice_window,
    corrupt,
    corrupted_indices,
    generate_synthetic,
    l2_normalize,
    read_dataset,
    records,
    window_span_sec,
    write_dataset,
)
from avfusion.errors import DimensionMismatch, InsufficientFrames, InvalidConfig, MalformedRecord, ZeroVector

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


def small_config(**kw):
    return SyntheticConfig(n_identities=kw.pop("n_identities", 4), clips_per_identity=kw.pop("clips_per_identity", 3), **kw)


def intra_identity_cosine(mat, ids):
    total, count = 0.0, 0
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            if ids[i] == ids[j]:
                total += float(mat[i] @ mat[j])
                count += 1
    return total / count


class TestL2Normalize:
    def test_pythagorean(self):
        np.testing.assert_allclose(l2_normalize([3.0, 4.0]), [0.6, 0.8], atol=1e-15)

    def test_zero_vector(self):
        with pytest.raises(ZeroVector):
            l2_normalize([0.0, 0.0, 0.0])

    @given(arrays(np.float64, st.integers(1, 40), elements=finite))
    def test_unit_norm_and_direction(self, v):
        if np.linalg.norm(v) < 1e-9:
            return
        u = l2_normalize(v)
        assert abs(np.linalg.norm(u) - 1.0) < 1e-12
        # Direction: u is a positive multiple of v.
        k = int(np.argmax(np.abs(v)))
        np.testing.assert_allclose(u * (v[k] / u[k]), v, rtol=1e-9, atol=1e-9 * np.abs(v).max())

    @given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-10, 10)))
    def test_idempotent_on_unit_vectors(self, v):
        if np.linalg.norm(v) < 1e-6:
            return
        u = v / np.linalg.norm(v)
        np.testing.assert_allclose(l2_normalize(u), u, atol=1e-12)


class TestVoiceWindow:
    def test_two_frames(self):
        np.testing.assert_array_equal(average_voice_window([[0.0, 2.0], [2.0, 0.0]], 2), [1.0, 1.0])

    def test_copies(self):
        u = np.random.default_rng(1).standard_normal(7)
        np.testing.assert_allclose(average_voice_window([u] * 5, 5), u, atol=1e-15)

    def test_against_summation_loop(self):
        frames = np.random.default_rng(2).standard_normal((100, VOICE_DIM))
        expected = [math.fsum(frames[:, d]) / 100 for d in range(VOICE_DIM)]
        np.testing.assert_allclose(average_voice_window(frames, 100), expected, atol=1e-12)

    def test_uses_first_frames_only(self):
        frames = np.arange(12.0).reshape(6, 2)
        np.testing.assert_array_equal(average_voice_window(frames, 2), [1.0, 2.0])

    def test_insufficient(self):
        with pytest.raises(InsufficientFrames):
            average_voice_window(np.ones((3, 4)), 4)

    def test_window_span(self):
        assert window_span_sec(10) == pytest.approx(0.115)
        assert window_span_sec(100) == pytest.approx(1.015)


class TestGenerateSynthetic:
    def test_shape_and_norms(self):
        d = generate_synthetic(small_config())
        assert len(d) == 12 and d.face_dim == FACE_DIM and d.voice_dim == VOICE_DIM
        np.testing.assert_allclose(np.linalg.norm(d.face, axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(d.voice, axis=1), 1.0, atol=1e-12)

    def test_zero_noise_collapses_clips(self):
        d = generate_synthetic(small_config(face_noise_sigma=0.0, voice_noise_sigma=0.0))
        for i in range(len(d)):
            for j in range(len(d)):
                if d.identity_ids[i] == d.identity_ids[j]:
                    assert d.face[i] @ d.face[j] == pytest.approx(1.0, abs=1e-12)
                    assert d.voice[i] @ d.voice[j] == pytest.approx(1.0, abs=1e-12)

    def test_deterministic(self):
        assert generate_synthetic(small_config(seed=9)).equals(generate_synthetic(small_config(seed=9)))
        assert not generate_synthetic(small_config(seed=9)).equals(generate_synthetic(small_config(seed=10)))

    def test_noise_stream_shares_prototypes(self):
        a = generate_synthetic(small_config(face_noise_sigma=0.0, voice_noise_sigma=0.0, noise_stream=0))
        b = generate_synthetic(small_config(face_noise_sigma=0.0, voice_noise_sigma=0.0, noise_stream=1))
        np.testing.assert_array_equal(a.face, b.face)
        assert set(a.clip_ids).isdisjoint(b.clip_ids)

    def test_face_cleaner_than_voice(self):
        d = generate_synthetic(SyntheticConfig(face_noise_sigma=0.1, voice_noise_sigma=1.0))
        assert intra_identity_cosine(d.face, d.identity_ids) > intra_identity_cosine(d.voice, d.identity_ids)

    @pytest.mark.parametrize(
        "kw, field",
        [
            ({"face_noise_sigma": float("nan")}, "face_noise_sigma"),
            ({"voice_noise_sigma": -0.1}, "voice_noise_sigma"),
            ({"n_identities": 1}, "n_identities"),
            ({"clips_per_identity": 1}, "clips_per_identity"),
        ],
    )
    def test_invalid(self, kw, field):
        with pytest.raises(InvalidConfig, match=field):
            generate_synthetic(SyntheticConfig(**kw))


class TestCorrupt:
    def test_zeros_full(self):
        d = corrupt(generate_synthetic(small_config()), CorruptionSpec("voice", "zeros", 1.0, 0))
        assert not d.voice.any()
        assert not d.voice_normalized.any()

    def test_fraction_zero_is_identity(self):
        d = generate_synthetic(small_config())
        assert corrupt(d, CorruptionSpec("face", "random_standard_normal", 0.0, 3)).equals(d)

    def test_moments(self):
        n = 10_000
        d = Dataset([f"i{k}" for k in range(n)], [f"c{k}" for k in range(n)], np.zeros((n, FACE_DIM)), np.zeros((n, 1)))
        face = corrupt(d, CorruptionSpec("face", "random_standard_normal", 1.0, 5)).face
        assert abs(face.mean()) < 0.01
        assert abs(face.var() - 1.0) < 0.05

    def test_raw_noise_is_not_normalised(self):
        d = corrupt(generate_synthetic(small_config()), CorruptionSpec("voice", "random_standard_normal", 1.0, 0))
        norms = np.linalg.norm(d.voice, axis=1)
        assert np.all(norms > 0.8 * math.sqrt(VOICE_DIM))

    def test_renormalised_noise(self):
        spec = CorruptionSpec("voice", "random_standard_normal", 1.0, 0, renormalize=True)
        d = corrupt(generate_synthetic(small_config()), spec)
        np.testing.assert_allclose(np.linalg.norm(d.voice, axis=1), 1.0, atol=1e-12)
        assert d.voice_normalized.all()

    @settings(max_examples=30, deadline=None)
    @given(
        fraction=st.floats(0.0, 1.0),
        modality=st.sampled_from(["face", "voice"]),
        mode=st.sampled_from(["zeros", "random_standard_normal"]),
        seed=st.integers(0, 2**32),
    )
    def test_changes_exactly_round_fn_rows(self, fraction, modality, mode, seed):
        d = generate_synthetic(small_config(n_identities=5, clips_per_identity=3))
        spec = CorruptionSpec(modality, mode, fraction, seed)
        out = corrupt(d, spec)
        other = "voice" if modality == "face" else "face"
        changed = np.flatnonzero(np.any(out.modality(modality) != d.modality(modality), axis=1))
        assert changed.size == round(fraction * len(d))
        np.testing.assert_array_equal(changed, corrupted_indices(len(d), spec))
        np.testing.assert_array_equal(out.modality(other), d.modality(other))
        assert corrupt(d, spec).equals(out)

    def test_invalid_spec(self):
        with pytest.raises(InvalidConfig, match="fraction"):
            corrupt(generate_synthetic(small_config()), CorruptionSpec(fraction=1.5))


class TestDatasetFile:
    def test_round_trip(self, tmp_path):
        d = generate_synthetic(small_config(n_identities=3, clips_per_identity=2))
        d = Dataset.from_samples([d[i] for i in range(3)])
        path = tmp_path / "d.jsonl"
        write_dataset(d, path)
        back = read_dataset(path)
        assert back.equals(d)

    def test_round_trip_with_corruption(self, tmp_path):
        d = corrupt(generate_synthetic(small_config()), CorruptionSpec("face", "random_standard_normal", 0.5, 1))
        write_dataset(d, tmp_path / "d.jsonl")
        assert read_dataset(tmp_path / "d.jsonl").equals(d)

    def test_header(self, tmp_path):
        write_dataset(generate_synthetic(small_config()), tmp_path / "d.jsonl")
        header = json.loads((tmp_path / "d.jsonl").read_text().splitlines()[0])
        assert header == {"format_version": 1, "face_dim": 512, "voice_dim": 600}

    def test_short_face_vector(self, tmp_path):
        path = tmp_path / "d.jsonl"
        write_dataset(generate_synthetic(small_config()), path)
        lines = path.read_text().splitlines()
        rec = json.loads(lines[1])
        rec["vector"] = rec["vector"][:511]
        lines[1] = json.dumps(rec)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DimensionMismatch, match="line 2"):
            read_dataset(path)

    def test_count_preserved(self, tmp_path):
        d = generate_synthetic(small_config(n_identities=7, clips_per_identity=2))
        write_dataset(d, tmp_path / "d.jsonl")
        assert len(read_dataset(tmp_path / "d.jsonl")) == 14

    def test_malformed_line_number(self, tmp_path):
        path = tmp_path / "d.jsonl"
        write_dataset(generate_synthetic(small_config()), path)
        lines = path.read_text().splitlines()
        lines[4] = "{not json"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(MalformedRecord) as err:
            read_dataset(path)
        assert err.value.line_no == 5

    def test_missing_voice_record(self, tmp_path):
        path = tmp_path / "d.jsonl"
        write_dataset(generate_synthetic(small_config()), path)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(MalformedRecord, match="lacks a voice"):
            read_dataset(path)

    def test_records_view(self):
        d = generate_synthetic(small_config())
        recs = list(records(d))
        assert len(recs) == 2 * len(d)
        assert [r.modality for r in recs[:2]] == ["face", "voice"]
        assert recs[1].segment_length_sec == pytest.approx(0.115)
