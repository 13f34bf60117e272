"""Synthetic speaker/channel corpus generator.

Each utterance mixes a per-speaker latent and a per-recording channel latent
through fixed linear maps, plus Gaussian segment/augmentation noise.  Views
of the same utterance therefore share both the speaker and the channel
component, which is exactly the confound that same-utterance positive
sampling inherits.  All randomness flows through explicit numpy Generators,
so corpora, views and trial lists are pure functions of (config, rng state).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "CorpusConfig",
    "Corpus",
    "UtteranceMeta",
    "ViewBatch",
    "TrialList",
    "build_corpus",
    "split_corpus",
    "sample_views",
    "clean_views",
    "build_trials",
    "export_corpus",
    "load_corpus_export",
    "save_trials",
    "load_trials",
]


@dataclass(frozen=True)
class CorpusConfig:
    """Shape and noise parameters of a synthetic corpus."""

    n_speakers: int = 64
    recordings_per_speaker: int = 4
    utterances_per_recording: int = 8
    latent_dim: int = 8
    input_dim: int = 32
    speaker_scale: float = 1.0
    channel_scale: float = 1.5
    segment_noise_sigma: float = 0.3
    augment_noise_sigma: float = 0.3
    seed: int = 0

    def __post_init__(self) -> None:
        counts = {
            "n_speakers": self.n_speakers,
            "recordings_per_speaker": self.recordings_per_speaker,
            "utterances_per_recording": self.utterances_per_recording,
            "latent_dim": self.latent_dim,
            "input_dim": self.input_dim,
        }
        for name, value in counts.items():
            if int(value) < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
        if self.input_dim < self.latent_dim:
            raise ValueError("input_dim must be >= latent_dim")
        if self.segment_noise_sigma < 0 or self.augment_noise_sigma < 0:
            raise ValueError("noise sigmas must be >= 0")

    @property
    def n_recordings(self) -> int:
        return self.n_speakers * self.recordings_per_speaker

    @property
    def n_utterances(self) -> int:
        return self.n_recordings * self.utterances_per_recording


@dataclass(frozen=True)
class UtteranceMeta:
    utterance_id: int
    speaker_id: int
    recording_id: int
    speaker_latent: np.ndarray
    channel_latent: np.ndarray


@dataclass
class Corpus:
    """A generated corpus.

    ``speaker_ids`` and ``recording_ids`` are hidden labels: training code
    must only touch them through :meth:`speaker_of` / :meth:`recording_of`
    (evaluation, diagnostics) and :meth:`same_speaker_other_recording`
    (supervised positive sampling).  View synthesis reads only the
    per-utterance latent rows, never the id arrays.
    """

    config: CorpusConfig
    speaker_ids: np.ndarray            # (N,) int
    recording_ids: np.ndarray          # (N,) int
    speaker_latent_rows: np.ndarray    # (N, latent_dim)
    channel_latent_rows: np.ndarray    # (N, latent_dim)
    mix_speaker: np.ndarray            # (input_dim, latent_dim)
    mix_channel: np.ndarray            # (input_dim, latent_dim)

    @property
    def n_utterances(self) -> int:
        return int(self.speaker_ids.shape[0])

    @property
    def utterances(self) -> list[UtteranceMeta]:
        return [self.utterance_meta(i) for i in range(self.n_utterances)]

    def utterance_meta(self, utterance_id: int) -> UtteranceMeta:
        self._check_id(utterance_id)
        return UtteranceMeta(
            utterance_id=int(utterance_id),
            speaker_id=int(self.speaker_ids[utterance_id]),
            recording_id=int(self.recording_ids[utterance_id]),
            speaker_latent=self.speaker_latent_rows[utterance_id],
            channel_latent=self.channel_latent_rows[utterance_id],
        )

    def speaker_of(self, utterance_id: int) -> int:
        """Hidden-label read; evaluation and supervised sampling only."""
        self._check_id(utterance_id)
        return int(self.speaker_ids[utterance_id])

    def recording_of(self, utterance_id: int) -> int:
        """Hidden-label read; evaluation and supervised sampling only."""
        self._check_id(utterance_id)
        return int(self.recording_ids[utterance_id])

    def same_speaker_other_recording(self, utterance_id: int, rng: np.random.Generator) -> int:
        """Draw a positive utterance with the anchor's speaker but a different recording.

        This is the supervised sampling entry point; it is the only place the
        training path may consume hidden labels, and only in supervised mode.
        """
        self._check_id(utterance_id)
        spk = self.speaker_ids[utterance_id]
        rec = self.recording_ids[utterance_id]
        candidates = np.flatnonzero((self.speaker_ids == spk) & (self.recording_ids != rec))
        if candidates.size == 0:
            raise ValueError(
                f"utterance {utterance_id}: speaker {int(spk)} has no other recording"
            )
        return int(candidates[rng.integers(candidates.size)])

    def _check_id(self, utterance_id: int) -> None:
        if not 0 <= int(utterance_id) < self.n_utterances:
            raise KeyError(f"unknown utterance id {utterance_id}")


@dataclass
class ViewBatch:
    """Views generated for a batch of utterances.

    Pair mode fills ``anchors``/``positives``; multicrop mode fills
    ``local_views`` (4) and ``global_views`` (2).  ``teacher_global_views``
    aliases ``global_views`` unless positives were drawn from different
    utterances.  ``reference_views`` are always present: fresh segment noise
    scaled by 1/sqrt(2) and no augmentation noise.
    """

    indices: np.ndarray
    reference_views: np.ndarray
    anchors: np.ndarray | None = None
    positives: np.ndarray | None = None
    local_views: list[np.ndarray] = field(default_factory=list)
    global_views: list[np.ndarray] = field(default_factory=list)
    teacher_global_views: list[np.ndarray] = field(default_factory=list)


@dataclass
class TrialList:
    """Labeled verification trials over an evaluation corpus."""

    utt_a: np.ndarray      # (T,) int
    utt_b: np.ndarray      # (T,) int
    is_target: np.ndarray  # (T,) bool

    def __len__(self) -> int:
        return int(self.utt_a.shape[0])

    @property
    def trials(self) -> list[tuple[int, int, bool]]:
        return [
            (int(a), int(b), bool(t))
            for a, b, t in zip(self.utt_a, self.utt_b, self.is_target)
        ]


def build_corpus(config: CorpusConfig) -> Corpus:
    """Generate a corpus deterministically from its config.

    Draw order is fixed: mixing matrices first (entries N(0, 1/latent_dim)),
    then speaker latents, then channel latents, all i.i.d. standard normal.
    """
    rng = np.random.default_rng(config.seed)
    d, p = config.latent_dim, config.input_dim
    mix_speaker = rng.standard_normal((p, d)) / np.sqrt(d)
    mix_channel = rng.standard_normal((p, d)) / np.sqrt(d)
    speaker_latents = rng.standard_normal((config.n_speakers, d))
    channel_latents = rng.standard_normal((config.n_recordings, d))

    reps = config.recordings_per_speaker * config.utterances_per_recording
    speaker_ids = np.repeat(np.arange(config.n_speakers), reps)
    recording_ids = np.repeat(np.arange(config.n_recordings), config.utterances_per_recording)
    return Corpus(
        config=config,
        speaker_ids=speaker_ids,
        recording_ids=recording_ids,
        speaker_latent_rows=speaker_latents[speaker_ids],
        channel_latent_rows=channel_latents[recording_ids],
        mix_speaker=mix_speaker,
        mix_channel=mix_channel,
    )


def split_corpus(corpus: Corpus, n_eval_speakers: int) -> tuple[Corpus, Corpus]:
    """Split off the last ``n_eval_speakers`` into a disjoint evaluation corpus.

    Both halves share the mixing matrices (the fixed "physics") and keep
    their global speaker/recording ids, so disjointness is visible in the
    labels.  Utterance ids are re-based to 0..N-1 within each half; the
    stored config is the parent corpus config.
    """
    n_total = int(np.unique(corpus.speaker_ids).size)
    if not 1 <= n_eval_speakers < n_total:
        raise ValueError(f"need 1 <= n_eval_speakers < {n_total}, got {n_eval_speakers}")
    cut = n_total - n_eval_speakers
    eval_mask = corpus.speaker_ids >= cut

    def take(mask: np.ndarray) -> Corpus:
        return Corpus(
            config=corpus.config,
            speaker_ids=corpus.speaker_ids[mask].copy(),
            recording_ids=corpus.recording_ids[mask].copy(),
            speaker_latent_rows=corpus.speaker_latent_rows[mask].copy(),
            channel_latent_rows=corpus.channel_latent_rows[mask].copy(),
            mix_speaker=corpus.mix_speaker,
            mix_channel=corpus.mix_channel,
        )

    return take(~eval_mask), take(eval_mask)


def clean_views(corpus: Corpus, indices: np.ndarray) -> np.ndarray:
    """Noise-free views: speaker_scale*W_s@s + channel_scale*W_r@r per utterance."""
    indices = np.asarray(indices, dtype=np.intp)
    if indices.size and (indices.min() < 0 or indices.max() >= corpus.n_utterances):
        raise KeyError("unknown utterance id in indices")
    cfg = corpus.config
    spk = corpus.speaker_latent_rows[indices] @ corpus.mix_speaker.T
    chan = corpus.channel_latent_rows[indices] @ corpus.mix_channel.T
    return cfg.speaker_scale * spk + cfg.channel_scale * chan


def _noisy_view(
    clean: np.ndarray,
    rng: np.random.Generator,
    segment_sigma: float,
    augment_sigma: float,
) -> np.ndarray:
    # Two draws per view regardless of the sigmas, so the rng consumption
    # pattern depends only on the view spec.
    out = clean + segment_sigma * rng.standard_normal(clean.shape)
    return out + augment_sigma * rng.standard_normal(clean.shape)


def sample_views(
    corpus: Corpus,
    indices: np.ndarray,
    view_spec: str,
    rng: np.random.Generator,
    positive_indices: np.ndarray | None = None,
) -> ViewBatch:
    """Sample augmented views for a batch of utterances.

    ``view_spec`` is ``"pair"`` (anchor + positive) or ``"multicrop"``
    (4 local + 2 global views).  Segment noise is fresh per view with sigma
    ``segment_noise_sigma``; augmentation noise is fresh per augmented view
    with sigma ``augment_noise_sigma``.  Reference views and global views use
    segment sigma scaled by 1/sqrt(2), the longer-segment analogue.

    ``positive_indices`` redirects the positive branch to other utterances
    (supervised sampling): in pair mode the positives, in multicrop mode two
    extra teacher-side global views.  The per-view draw order is fixed, so a
    given rng state always yields the same batch.
    """
    indices = np.asarray(indices, dtype=np.intp)
    cfg = corpus.config
    seg = cfg.segment_noise_sigma
    aug = cfg.augment_noise_sigma
    ref_seg = seg / np.sqrt(2.0)

    clean = clean_views(corpus, indices)
    if positive_indices is not None:
        positive_indices = np.asarray(positive_indices, dtype=np.intp)
        if positive_indices.shape != indices.shape:
            raise ValueError("positive_indices must match indices in shape")
        clean_pos = clean_views(corpus, positive_indices)
    else:
        clean_pos = clean

    batch = ViewBatch(indices=indices, reference_views=np.empty(0))
    if view_spec == "pair":
        batch.anchors = _noisy_view(clean, rng, seg, aug)
        batch.positives = _noisy_view(clean_pos, rng, seg, aug)
    elif view_spec == "multicrop":
        batch.global_views = [_noisy_view(clean, rng, ref_seg, aug) for _ in range(2)]
        batch.local_views = [_noisy_view(clean, rng, seg, aug) for _ in range(4)]
    else:
        raise ValueError(f"unknown view_spec {view_spec!r}")

    batch.reference_views = clean + ref_seg * rng.standard_normal(clean.shape)

    if view_spec == "multicrop":
        if positive_indices is None:
            batch.teacher_global_views = list(batch.global_views)
        else:
            batch.teacher_global_views = [
                _noisy_view(clean_pos, rng, ref_seg, aug) for _ in range(2)
            ]
    return batch


def build_trials(
    corpus_eval: Corpus,
    n_target: int,
    n_nontarget: int,
    rng: np.random.Generator,
) -> TrialList:
    """Sample distinct labeled trial pairs; never pairs an utterance with itself."""
    if n_target < 0 or n_nontarget < 0:
        raise ValueError("trial counts must be >= 0")
    spk = corpus_eval.speaker_ids
    n = corpus_eval.n_utterances
    if n_nontarget > 0 and np.unique(spk).size < 2:
        raise ValueError("need >= 2 speakers for non-target trials")

    iu, ju = np.triu_indices(n, k=1)
    same = spk[iu] == spk[ju]
    target_pairs = np.flatnonzero(same)
    nontarget_pairs = np.flatnonzero(~same)
    if n_target > target_pairs.size:
        raise ValueError(
            f"requested {n_target} target trials but only {target_pairs.size} same-speaker pairs exist"
        )
    if n_nontarget > nontarget_pairs.size:
        raise ValueError(
            f"requested {n_nontarget} non-target trials but only {nontarget_pairs.size} pairs exist"
        )

    chosen_t = rng.choice(target_pairs, size=n_target, replace=False)
    chosen_n = rng.choice(nontarget_pairs, size=n_nontarget, replace=False)
    chosen = np.concatenate([chosen_t, chosen_n])
    labels = np.concatenate(
        [np.ones(n_target, dtype=bool), np.zeros(n_nontarget, dtype=bool)]
    )
    return TrialList(utt_a=iu[chosen].copy(), utt_b=ju[chosen].copy(), is_target=labels)


def export_corpus(corpus: Corpus, path: str | Path) -> None:
    """Write config as key=value header lines, a blank line, then one
    ``utt_id speaker_id recording_id`` row per utterance."""
    lines = [f"{k}={v}" for k, v in vars(corpus.config).items()]
    lines.append("")
    lines.append("utt_id speaker_id recording_id")
    for i in range(corpus.n_utterances):
        lines.append(f"{i} {int(corpus.speaker_ids[i])} {int(corpus.recording_ids[i])}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_corpus_export(path: str | Path) -> tuple[dict, np.ndarray, np.ndarray]:
    """Parse a corpus export back into (config dict, speaker_ids, recording_ids)."""
    header: dict = {}
    speakers: list[int] = []
    recordings: list[int] = []
    in_rows = False
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            in_rows = True
            continue
        if not in_rows:
            key, value = line.split("=", 1)
            header[key] = value
        elif not line.startswith("utt_id"):
            _, s, r = line.split()
            speakers.append(int(s))
            recordings.append(int(r))
    return header, np.asarray(speakers), np.asarray(recordings)


def save_trials(trials: TrialList, path: str | Path) -> None:
    """One ``<label 0|1> <utt_id_a> <utt_id_b>`` line per trial."""
    lines = [
        f"{int(t)} {int(a)} {int(b)}"
        for a, b, t in zip(trials.utt_a, trials.utt_b, trials.is_target)
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_trials(path: str | Path) -> TrialList:
    labels, a_ids, b_ids = [], [], []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        t, a, b = line.split()
        labels.append(bool(int(t)))
        a_ids.append(int(a))
        b_ids.append(int(b))
    return TrialList(
        utt_a=np.asarray(a_ids, dtype=np.intp),
        utt_b=np.asarray(b_ids, dtype=np.intp),
        is_target=np.asarray(labels, dtype=bool),
    )
