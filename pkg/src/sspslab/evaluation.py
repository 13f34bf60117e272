"""Verification-style evaluation: cosine trial scoring, EER, minDCF, and
intra/inter-speaker variance statistics.

Scoring uses encoder representations of noise-free views (the full-length,
augmentation-free analogue), l2-normalized, so trial scores are plain dot
products in [-1, 1].  The error-rate sweep walks every unique score plus a
reject-all sentinel; both metrics are therefore invariant under strictly
increasing transforms of the scores.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nncore import Mlp
from .synthgen import Corpus, TrialList, clean_views

__all__ = [
    "ScoredTrials",
    "MetricsReport",
    "encode_corpus",
    "score_trials",
    "compute_eer",
    "compute_min_dcf",
    "speaker_variance_stats",
    "export_embeddings",
    "evaluate_model",
]


@dataclass
class ScoredTrials:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=bool)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise ValueError("scores and labels must be 1-d and of equal length")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")


@dataclass
class MetricsReport:
    eer: float
    min_dcf: float
    intra_speaker_variance: float
    inter_speaker_variance: float
    n_target: int
    n_nontarget: int

    def as_dict(self) -> dict:
        return {
            "eer": self.eer,
            "min_dcf": self.min_dcf,
            "intra_var": self.intra_speaker_variance,
            "inter_var": self.inter_speaker_variance,
            "n_target": self.n_target,
            "n_nontarget": self.n_nontarget,
        }


def encode_corpus(encoder: Mlp, corpus: Corpus) -> np.ndarray:
    """One representation per utterance from its noise-free view."""
    views = clean_views(corpus, np.arange(corpus.n_utterances))
    reps, _ = encoder.forward(views)
    return reps


def score_trials(encoder: Mlp, corpus_eval: Corpus, trials: TrialList) -> ScoredTrials:
    """Cosine scores of l2-normalized representations for each trial pair."""
    reps = encode_corpus(encoder, corpus_eval)
    norms = np.linalg.norm(reps, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm representation; cannot cosine-score")
    reps = reps / norms
    n = corpus_eval.n_utterances
    for ids in (trials.utt_a, trials.utt_b):
        if ids.size and (ids.min() < 0 or ids.max() >= n):
            raise KeyError("trial references an unknown utterance id")
    scores = np.sum(reps[trials.utt_a] * reps[trials.utt_b], axis=1)
    return ScoredTrials(scores=np.clip(scores, -1.0, 1.0), labels=trials.is_target.copy())


def _sweep(st: ScoredTrials) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """False-acceptance and miss rates at each candidate threshold.

    Decision rule: accept iff score >= threshold.  Candidates are the unique
    scores in ascending order plus a reject-all sentinel above the maximum.
    """
    target = np.sort(st.scores[st.labels])
    nontarget = np.sort(st.scores[~st.labels])
    if target.size == 0 or nontarget.size == 0:
        raise ValueError("need at least one target and one non-target trial")
    thresholds = np.unique(st.scores)
    thresholds = np.append(thresholds, np.inf)
    # score >= t  <=>  index of first element >= t (searchsorted 'left')
    p_fa = 1.0 - np.searchsorted(nontarget, thresholds, side="left") / nontarget.size
    p_miss = np.searchsorted(target, thresholds, side="left") / target.size
    return thresholds, p_fa, p_miss


def compute_eer(st: ScoredTrials) -> float:
    """Equal error rate, linearly interpolated between the two sweep points
    bracketing the miss-rate/false-acceptance crossing."""
    _, p_fa, p_miss = _sweep(st)
    diff = p_miss - p_fa  # ascends from -1 (accept all) to +1 (reject all)
    k = int(np.argmax(diff >= 0.0))
    if diff[k] == 0.0:
        return float(p_fa[k])
    lam = diff[k - 1] / (diff[k - 1] - diff[k])
    return float(p_fa[k - 1] + lam * (p_fa[k] - p_fa[k - 1]))


def compute_min_dcf(
    st: ScoredTrials,
    p_target: float = 0.01,
    c_miss: float = 1.0,
    c_fa: float = 1.0,
) -> float:
    """Minimum normalized detection cost over all thresholds.

    cost(t) = c_miss*p_target*P_miss(t) + c_fa*(1-p_target)*P_fa(t),
    normalized by the best uninformed decision,
    min(c_miss*p_target, c_fa*(1-p_target)).
    """
    _, p_fa, p_miss = _sweep(st)
    costs = c_miss * p_target * p_miss + c_fa * (1.0 - p_target) * p_fa
    floor = min(c_miss * p_target, c_fa * (1.0 - p_target))
    return float(np.min(costs) / floor)


def speaker_variance_stats(
    representations: np.ndarray, speaker_labels: np.ndarray
) -> tuple[float, float]:
    """Spread around and between per-speaker centroids of l2-normalized reps.

    intra: mean squared distance of each representation to its speaker
    centroid; inter: mean squared pairwise distance between centroids.
    """
    reps = np.asarray(representations, dtype=np.float64)
    labels = np.asarray(speaker_labels)
    if reps.ndim != 2 or labels.shape != (reps.shape[0],):
        raise ValueError("representations (N, D) and labels (N,) expected")
    speakers, counts = np.unique(labels, return_counts=True)
    if speakers.size < 2:
        raise ValueError("need at least 2 speakers")
    if np.any(counts < 2):
        raise ValueError("every speaker needs at least 2 utterances")
    norms = np.linalg.norm(reps, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm representation")
    reps = reps / norms

    centroids = np.stack([reps[labels == s].mean(axis=0) for s in speakers])
    intra = 0.0
    for c, s in zip(centroids, speakers):
        intra += float(np.sum((reps[labels == s] - c) ** 2))
    intra /= reps.shape[0]

    iu, ju = np.triu_indices(speakers.size, k=1)
    inter = float(np.mean(np.sum((centroids[iu] - centroids[ju]) ** 2, axis=1)))
    return intra, inter


def export_embeddings(
    representations: np.ndarray,
    utterance_ids: np.ndarray,
    speaker_ids: np.ndarray,
    path: str | Path,
) -> None:
    """CSV export for external projection/plotting.

    Header ``utt_id,speaker_id,dim_0..dim_{D-1}``; rows in the given order;
    floats printed with 17 significant digits so a parse-back is bit-exact.
    """
    reps = np.asarray(representations, dtype=np.float64)
    if reps.ndim != 2:
        raise ValueError("representations must be 2-d")
    d = reps.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["utt_id", "speaker_id"] + [f"dim_{k}" for k in range(d)])
        for utt, spk, row in zip(utterance_ids, speaker_ids, reps):
            writer.writerow([int(utt), int(spk)] + [f"{v:.17g}" for v in row])


def evaluate_model(
    encoder: Mlp,
    corpus_eval: Corpus,
    trials: TrialList,
    p_target: float = 0.01,
) -> MetricsReport:
    """Score trials and bundle EER, minDCF, and variance stats in one report."""
    st = score_trials(encoder, corpus_eval, trials)
    reps = encode_corpus(encoder, corpus_eval)
    intra, inter = speaker_variance_stats(reps, corpus_eval.speaker_ids)
    return MetricsReport(
        eer=compute_eer(st),
        min_dcf=compute_min_dcf(st, p_target=p_target),
        intra_speaker_variance=intra,
        inter_speaker_variance=inter,
        n_target=int(np.sum(st.labels)),
        n_nontarget=int(np.sum(~st.labels)),
    )
