"""Word-timing evaluation: edit-distance matching, offset statistics,
threshold percentages, durations and peak-position distributions."""
from __future__ import annotations

import unicodedata
from dataclasses import dataclass, field

import numpy as np

from .ctc import BLANK_ID
from .boundary import WordTiming


def _norm(word: str) -> str:
    return unicodedata.normalize("NFC", word)


@dataclass(frozen=True)
class MatchedPair:
    """Hypothesis/reference word pair from an equal-text alignment slot."""

    hyp: WordTiming
    ref: WordTiming

    def __post_init__(self):
        if _norm(self.hyp.word) != _norm(self.ref.word):
            raise ValueError(
                f"matched pair must share text, got {self.hyp.word!r} vs {self.ref.word!r}"
            )


@dataclass
class MetricsReport:
    """Aggregate word-timing accuracy; statistics are None when nothing matched."""

    n_matched: int
    n_hyp: int
    n_ref: int
    ave_st_delta_ms: float | None = None
    ave_ed_delta_ms: float | None = None
    signed_st_delta_ms: float | None = None
    signed_ed_delta_ms: float | None = None
    pct_ws: dict[float, float] = field(default_factory=dict)
    pct_we: dict[float, float] = field(default_factory=dict)
    mean_ref_duration_ms: float | None = None
    mean_hyp_duration_ms: float | None = None

    def to_dict(self) -> dict:
        return {
            "n_matched": self.n_matched,
            "n_hyp": self.n_hyp,
            "n_ref": self.n_ref,
            "ave_st_delta_ms": self.ave_st_delta_ms,
            "ave_ed_delta_ms": self.ave_ed_delta_ms,
            "signed_st_delta_ms": self.signed_st_delta_ms,
            "signed_ed_delta_ms": self.signed_ed_delta_ms,
            "pct_ws": {str(k): v for k, v in self.pct_ws.items()},
            "pct_we": {str(k): v for k, v in self.pct_we.items()},
            "mean_ref_duration_ms": self.mean_ref_duration_ms,
            "mean_hyp_duration_ms": self.mean_hyp_duration_ms,
        }


@dataclass
class PeakHistogram:
    """Binned relative peak positions plus their unbinned mean."""

    counts: np.ndarray
    bin_edges: np.ndarray
    mean_rel_pos: float | None
    n_scored: int
    n_skipped: int


def edit_align(hyp_words: list[str], ref_words: list[str]) -> list[tuple[int, int]]:
    """Minimum-edit-distance alignment; returns only the equal-text slots.

    Unit costs. The backtrace prefers match > substitution > deletion >
    insertion, so the result is deterministic. Word texts are compared after
    Unicode NFC normalization, byte-exact, no case folding.
    """
    hyp = [_norm(w) for w in hyp_words]
    ref = [_norm(w) for w in ref_words]
    n, m = len(hyp), len(ref)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = dist[i - 1, j - 1] + (0 if hyp[i - 1] == ref[j - 1] else 1)
            dist[i, j] = min(sub, dist[i, j - 1] + 1, dist[i - 1, j] + 1)

    matches = []
    i, j = n, m
    while i > 0 and j > 0:
        if hyp[i - 1] == ref[j - 1] and dist[i, j] == dist[i - 1, j - 1]:
            matches.append((i - 1, j - 1))
            i, j = i - 1, j - 1
        elif dist[i, j] == dist[i - 1, j - 1] + 1:
            i, j = i - 1, j - 1
        elif dist[i, j] == dist[i, j - 1] + 1:  # deletion: ref word unmatched
            j -= 1
        else:  # insertion: hyp word unmatched
            i -= 1
    matches.reverse()
    return matches


def edit_distance(hyp_words: list[str], ref_words: list[str]) -> int:
    """Levenshtein distance under the same normalization as edit_align."""
    hyp = [_norm(w) for w in hyp_words]
    ref = [_norm(w) for w in ref_words]
    prev = np.arange(len(ref) + 1)
    for i, w in enumerate(hyp, start=1):
        cur = np.empty_like(prev)
        cur[0] = i
        for j, r in enumerate(ref, start=1):
            cur[j] = min(prev[j - 1] + (w != r), prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return int(prev[-1])


def timing_metrics(
    pairs: list[MatchedPair],
    thresholds_ms: list[float],
    n_hyp: int | None = None,
    n_ref: int | None = None,
) -> MetricsReport:
    """Offset statistics over matched pairs.

    Deltas are mean absolute start/end differences; pct_ws[t] is the
    percentage of pairs with |start delta| strictly below t (same for ends).
    Signed means (hyp - ref) are kept as a diagnostic.
    """
    report = MetricsReport(
        n_matched=len(pairs),
        n_hyp=len(pairs) if n_hyp is None else n_hyp,
        n_ref=len(pairs) if n_ref is None else n_ref,
    )
    if not pairs:
        return report
    d_start = np.array([p.hyp.start_ms - p.ref.start_ms for p in pairs])
    d_end = np.array([p.hyp.end_ms - p.ref.end_ms for p in pairs])
    report.ave_st_delta_ms = float(np.abs(d_start).mean())
    report.ave_ed_delta_ms = float(np.abs(d_end).mean())
    report.signed_st_delta_ms = float(d_start.mean())
    report.signed_ed_delta_ms = float(d_end.mean())
    for tau in thresholds_ms:
        report.pct_ws[float(tau)] = float(100.0 * np.mean(np.abs(d_start) < tau))
        report.pct_we[float(tau)] = float(100.0 * np.mean(np.abs(d_end) < tau))
    report.mean_ref_duration_ms = float(np.mean([p.ref.duration_ms for p in pairs]))
    report.mean_hyp_duration_ms = float(np.mean([p.hyp.duration_ms for p in pairs]))
    return report


def peak_histogram(
    items: list[tuple[float, WordTiming]],
    n_bins: int,
    value_range: tuple[float, float] = (-1.0, 2.0),
) -> PeakHistogram:
    """Distribution of peak position relative to the reference word.

    Each item is (peak_ms, reference word timing); the relative position is
    (peak - ref.start) / ref.duration, so 0 sits at the word start and 1 at
    its end. Zero-duration references are skipped and counted. Values outside
    value_range land in the edge bins so every scored item is counted.
    """
    if n_bins < 1:
        raise ValueError(f"n_bins must be >= 1, got {n_bins}")
    lo, hi = value_range
    if not lo < hi:
        raise ValueError(f"empty histogram range [{lo}, {hi}]")
    rel = []
    skipped = 0
    for peak_ms, ref in items:
        if ref.duration_ms <= 0:
            skipped += 1
            continue
        rel.append((peak_ms - ref.start_ms) / ref.duration_ms)
    values = np.asarray(rel)
    counts, edges = np.histogram(np.clip(values, lo, hi), bins=n_bins, range=(lo, hi))
    mean = float(values.mean()) if len(values) else None
    return PeakHistogram(counts, edges, mean, len(values), skipped)


def blank_occupancy(posteriors: np.ndarray) -> float:
    """Fraction of frames whose argmax token is the blank."""
    posteriors = np.asarray(posteriors)
    return float(np.mean(posteriors.argmax(axis=1) == BLANK_ID))
