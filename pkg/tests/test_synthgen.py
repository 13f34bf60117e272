import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sspslab.synthgen import (
    Corpus,
    CorpusConfig,
    build_corpus,
    build_trials,
    clean_views,
    export_corpus,
    load_corpus_export,
    load_trials,
    sample_views,
    save_trials,
    split_corpus,
)


def small_config(**kw):
    base = dict(
        n_speakers=4,
        recordings_per_speaker=3,
        utterances_per_recording=2,
        latent_dim=4,
        input_dim=8,
        seed=123,
    )
    base.update(kw)
    return CorpusConfig(**base)


class TestCorpusConfig:
    @pytest.mark.parametrize(
        "bad",
        [
            dict(n_speakers=0),
            dict(recordings_per_speaker=0),
            dict(utterances_per_recording=0),
            dict(latent_dim=0),
            dict(segment_noise_sigma=-0.1),
            dict(augment_noise_sigma=-1.0),
            dict(latent_dim=16, input_dim=8),
        ],
    )
    def test_rejects_bad_values(self, bad):
        with pytest.raises(ValueError):
            small_config(**bad)

    def test_counts(self):
        cfg = small_config()
        assert cfg.n_recordings == 12
        assert cfg.n_utterances == 24


class TestBuildCorpus:
    def test_two_speakers_one_recording_each(self):
        corpus = build_corpus(small_config(n_speakers=2, recordings_per_speaker=1,
                                           utterances_per_recording=1))
        assert corpus.n_utterances == 2
        assert np.unique(corpus.speaker_latent_rows, axis=0).shape[0] == 2
        assert np.unique(corpus.channel_latent_rows, axis=0).shape[0] == 2

    def test_one_speaker_three_recordings(self):
        corpus = build_corpus(small_config(n_speakers=1, recordings_per_speaker=3,
                                           utterances_per_recording=2))
        assert corpus.n_utterances == 6
        # all utterances share one speaker latent, 3 distinct channel latents
        assert np.unique(corpus.speaker_latent_rows, axis=0).shape[0] == 1
        assert np.unique(corpus.channel_latent_rows, axis=0).shape[0] == 3

    def test_determinism(self):
        a = build_corpus(small_config())
        b = build_corpus(small_config())
        np.testing.assert_array_equal(a.speaker_latent_rows, b.speaker_latent_rows)
        np.testing.assert_array_equal(a.channel_latent_rows, b.channel_latent_rows)
        np.testing.assert_array_equal(a.mix_speaker, b.mix_speaker)
        np.testing.assert_array_equal(a.mix_channel, b.mix_channel)

    def test_latent_sharing_follows_ids(self):
        corpus = build_corpus(small_config())
        for i in range(corpus.n_utterances):
            for j in range(corpus.n_utterances):
                same_spk = corpus.speaker_ids[i] == corpus.speaker_ids[j]
                share = np.array_equal(
                    corpus.speaker_latent_rows[i], corpus.speaker_latent_rows[j]
                )
                assert same_spk == share
                same_rec = corpus.recording_ids[i] == corpus.recording_ids[j]
                share_c = np.array_equal(
                    corpus.channel_latent_rows[i], corpus.channel_latent_rows[j]
                )
                assert same_rec == share_c

    def test_utterance_meta(self):
        corpus = build_corpus(small_config())
        meta = corpus.utterance_meta(5)
        assert meta.utterance_id == 5
        assert meta.speaker_id == corpus.speaker_of(5)
        with pytest.raises(KeyError):
            corpus.utterance_meta(999)


class TestSampleViews:
    def test_zero_noise_anchor_equals_positive(self):
        corpus = build_corpus(small_config(segment_noise_sigma=0.0, augment_noise_sigma=0.0))
        rng = np.random.default_rng(0)
        views = sample_views(corpus, np.arange(6), "pair", rng)
        np.testing.assert_array_equal(views.anchors, views.positives)

    def test_zero_channel_scale_same_speaker_identical_means(self):
        corpus = build_corpus(
            small_config(channel_scale=0.0, segment_noise_sigma=0.0, augment_noise_sigma=0.0)
        )
        # utterances 0 and 2 share a speaker but sit in different recordings
        assert corpus.speaker_of(0) == corpus.speaker_of(2)
        assert corpus.recording_of(0) != corpus.recording_of(2)
        views = sample_views(corpus, np.array([0, 2]), "pair", np.random.default_rng(0))
        np.testing.assert_allclose(views.anchors[0], views.anchors[1], atol=0)

    def test_matrix_product_oracle(self):
        # independent elementwise recomputation of W_s s + W_r r
        cfg = small_config(speaker_scale=1.0, channel_scale=1.0,
                           segment_noise_sigma=0.0, augment_noise_sigma=0.0)
        corpus = build_corpus(cfg)
        ids = np.array([1, 7, 12])
        views = sample_views(corpus, ids, "pair", np.random.default_rng(4))
        for row, utt in enumerate(ids):
            s = corpus.speaker_latent_rows[utt]
            r = corpus.channel_latent_rows[utt]
            expected = np.empty(cfg.input_dim)
            for a in range(cfg.input_dim):
                acc = 0.0
                for b in range(cfg.latent_dim):
                    acc += corpus.mix_speaker[a, b] * s[b] + corpus.mix_channel[a, b] * r[b]
                expected[a] = acc
            np.testing.assert_allclose(views.anchors[row], expected, rtol=1e-12)

    def test_noise_removal_reconstructs_clean_component(self):
        cfg = small_config()
        corpus = build_corpus(cfg)
        ids = np.arange(corpus.n_utterances)
        clean = clean_views(corpus, ids)
        expected = (
            cfg.speaker_scale * corpus.speaker_latent_rows[ids] @ corpus.mix_speaker.T
            + cfg.channel_scale * corpus.channel_latent_rows[ids] @ corpus.mix_channel.T
        )
        np.testing.assert_allclose(clean, expected, rtol=1e-12)

    def test_reference_views_use_halved_variance_and_no_augment(self):
        # with segment sigma 1 and augment sigma 5, reference noise variance
        # must be ~0.5, far from 1.0 (augmented) and 26 (segment+augment)
        cfg = small_config(n_speakers=32, segment_noise_sigma=1.0, augment_noise_sigma=5.0)
        corpus = build_corpus(cfg)
        ids = np.arange(corpus.n_utterances)
        views = sample_views(corpus, ids, "pair", np.random.default_rng(11))
        resid = views.reference_views - clean_views(corpus, ids)
        var = float(np.var(resid))
        n = resid.size
        tol = 3.0 * 0.5 * np.sqrt(2.0 / n)
        assert abs(var - 0.5) < tol

    def test_multicrop_counts_and_global_scale(self):
        cfg = small_config(segment_noise_sigma=1.0, augment_noise_sigma=0.0)
        corpus = build_corpus(cfg)
        ids = np.arange(corpus.n_utterances)
        views = sample_views(corpus, ids, "multicrop", np.random.default_rng(3))
        assert len(views.local_views) == 4
        assert len(views.global_views) == 2
        assert views.teacher_global_views[0] is views.global_views[0]
        clean = clean_views(corpus, ids)
        var_global = np.var(np.concatenate([g - clean for g in views.global_views]))
        var_local = np.var(np.concatenate([l - clean for l in views.local_views]))
        assert abs(var_global - 0.5) < 0.1
        assert abs(var_local - 1.0) < 0.1

    def test_supervised_positive_indices_redirect(self):
        cfg = small_config(segment_noise_sigma=0.0, augment_noise_sigma=0.0)
        corpus = build_corpus(cfg)
        ids = np.array([0, 1])
        others = np.array([2, 3])
        views = sample_views(corpus, ids, "pair", np.random.default_rng(0),
                             positive_indices=others)
        np.testing.assert_allclose(views.positives, clean_views(corpus, others))
        mv = sample_views(corpus, ids, "multicrop", np.random.default_rng(0),
                          positive_indices=others)
        assert len(mv.teacher_global_views) == 2
        assert mv.teacher_global_views[0] is not mv.global_views[0]
        np.testing.assert_allclose(mv.teacher_global_views[0], clean_views(corpus, others))

    def test_unknown_id_and_bad_spec(self):
        corpus = build_corpus(small_config())
        with pytest.raises(KeyError):
            sample_views(corpus, np.array([999]), "pair", np.random.default_rng(0))
        with pytest.raises(ValueError):
            sample_views(corpus, np.array([0]), "triple", np.random.default_rng(0))

    def test_channel_dominant_nearest_neighbor_shares_recording(self):
        # with channel_scale >> speaker_scale the cosine-nearest noiseless view
        # comes from the same recording: the confound the corpus is built for
        cfg = small_config(speaker_scale=0.5, channel_scale=8.0,
                           segment_noise_sigma=0.0, augment_noise_sigma=0.0)
        corpus = build_corpus(cfg)
        x = clean_views(corpus, np.arange(corpus.n_utterances))
        x = x / np.linalg.norm(x, axis=1, keepdims=True)
        sims = x @ x.T
        np.fill_diagonal(sims, -np.inf)
        nn = np.argmax(sims, axis=1)
        assert np.array_equal(corpus.recording_ids[nn], corpus.recording_ids)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_view_sampling_pure_in_rng_state(self, seed):
        corpus = build_corpus(small_config())
        ids = np.arange(8)
        v1 = sample_views(corpus, ids, "pair", np.random.default_rng(seed))
        v2 = sample_views(corpus, ids, "pair", np.random.default_rng(seed))
        np.testing.assert_array_equal(v1.anchors, v2.anchors)
        np.testing.assert_array_equal(v1.positives, v2.positives)
        np.testing.assert_array_equal(v1.reference_views, v2.reference_views)


class TestSplitCorpus:
    def test_disjoint_speakers_shared_world(self):
        corpus = build_corpus(small_config(n_speakers=6))
        train, eval_ = split_corpus(corpus, 2)
        assert train.mix_speaker is corpus.mix_speaker
        assert eval_.mix_speaker is corpus.mix_speaker
        assert set(np.unique(train.speaker_ids)) == {0, 1, 2, 3}
        assert set(np.unique(eval_.speaker_ids)) == {4, 5}
        assert train.n_utterances + eval_.n_utterances == corpus.n_utterances

    def test_bad_split(self):
        corpus = build_corpus(small_config(n_speakers=4))
        with pytest.raises(ValueError):
            split_corpus(corpus, 4)
        with pytest.raises(ValueError):
            split_corpus(corpus, 0)


class TestBuildTrials:
    def test_single_speaker_nontarget_infeasible(self):
        corpus = build_corpus(small_config(n_speakers=1))
        with pytest.raises(ValueError):
            build_trials(corpus, n_target=1, n_nontarget=1, rng=np.random.default_rng(0))

    def test_exact_counts(self):
        corpus = build_corpus(small_config())
        trials = build_trials(corpus, 10, 10, np.random.default_rng(0))
        assert len(trials) == 20
        assert int(np.sum(trials.is_target)) == 10
        assert int(np.sum(~trials.is_target)) == 10

    def test_labels_audited_by_brute_force(self):
        corpus = build_corpus(small_config())
        trials = build_trials(corpus, 30, 30, np.random.default_rng(1))
        for a, b, is_target in trials.trials:
            assert a != b
            assert (corpus.speaker_of(a) == corpus.speaker_of(b)) == is_target

    def test_too_many_targets(self):
        corpus = build_corpus(small_config(n_speakers=2, recordings_per_speaker=1,
                                           utterances_per_recording=2))
        # only 1 same-speaker pair per speaker -> 2 total
        with pytest.raises(ValueError):
            build_trials(corpus, 3, 0, np.random.default_rng(0))


class TestSerialization:
    def test_corpus_export_roundtrip(self, tmp_path):
        corpus = build_corpus(small_config())
        path = tmp_path / "corpus.txt"
        export_corpus(corpus, path)
        header, spk, rec = load_corpus_export(path)
        assert header["n_speakers"] == "4"
        assert header["seed"] == "123"
        np.testing.assert_array_equal(spk, corpus.speaker_ids)
        np.testing.assert_array_equal(rec, corpus.recording_ids)

    def test_trials_roundtrip(self, tmp_path):
        corpus = build_corpus(small_config())
        trials = build_trials(corpus, 5, 7, np.random.default_rng(2))
        path = tmp_path / "trials.txt"
        save_trials(trials, path)
        loaded = load_trials(path)
        np.testing.assert_array_equal(loaded.utt_a, trials.utt_a)
        np.testing.assert_array_equal(loaded.utt_b, trials.utt_b)
        np.testing.assert_array_equal(loaded.is_target, trials.is_target)
        first = path.read_text().splitlines()[0].split()
        assert first[0] in ("0", "1")
