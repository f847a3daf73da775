"""Synthetic corpus generation and a small trainable frame-level classifier.

The generator lays out wordpiece spans separated by silence gaps, emits a
token-specific mean vector plus Gaussian noise on every frame, and keeps the
construction as ground-truth word timings. Two feature streams are produced:
the raw frames (local, sharp) and a moving-average of them (utterance-level
context with smeared boundaries), so classifiers can be trained on the
smoothed stream alone or on both concatenated.

The classifier is a two-hidden-layer tanh network trained with manual
backpropagation and plain SGD; training methods cover plain CTC, CTC with a
label prior, guided cross-entropy retargeting, and the peak regularizer.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .boundary import (
    CetcParams,
    GuidedTargets,
    WordMap,
    WordTiming,
    cetc_boundaries,
    cetc_guided_targets,
    gridsearch_offset,
    guided_ce_grad,
    words_from_spans,
)
from .ctc import (
    LabelSequence,
    LogitMatrix,
    NoValidPathError,
    apply_label_prior,
    ctc_grad,
    forced_align,
    log_softmax_rows,
    prior_ctc_grad,
    token_spans,
)
from .metrics import (
    MatchedPair,
    MetricsReport,
    blank_occupancy,
    edit_align,
    peak_histogram,
    timing_metrics,
)
from .pfr import PfrParams, combined_loss, pfr_loss_grad

log = logging.getLogger(__name__)

FRAME_MS = 10.0

# token means are pulled toward the silence mean by this factor; full
# separation makes every method trivially accurate, full overlap makes the
# task unlearnable -- 0.6 keeps the blank/token race competitive
TOKEN_SILENCE_PULL = 0.6

METHODS = ("peaky", "npc", "cetc", "pfr")


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class CorpusSpec:
    """Layout and randomness knobs for one synthetic corpus.

    All (lo, hi) ranges are inclusive; the seed fully determines the corpus.
    """

    n_utts: int = 48
    vocab_size: int = 8
    pieces_per_word: tuple[int, int] = (1, 3)
    words_per_utt: tuple[int, int] = (2, 4)
    span_frames: tuple[int, int] = (3, 8)
    gap_frames: tuple[int, int] = (2, 4)
    feature_dim: int = 8
    noise_sigma: float = 0.5
    context_window: int = 6
    seed: int = 20240601

    def __post_init__(self):
        if self.n_utts < 1 or self.vocab_size < 2 or self.feature_dim < 1:
            raise ValueError("need n_utts >= 1, vocab_size >= 2, feature_dim >= 1")
        for name in ("pieces_per_word", "words_per_utt", "span_frames", "gap_frames"):
            lo, hi = (int(x) for x in getattr(self, name))
            setattr(self, name, (lo, hi))
            if not 0 < lo <= hi:
                raise ValueError(f"{name}: invalid range ({lo}, {hi})")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.context_window < 1:
            raise ValueError("context_window must be >= 1")


@dataclass(eq=False)
class SynthUtterance:
    """One generated utterance with ground-truth alignment."""

    utt_id: str
    features_lo: np.ndarray
    features_hi: np.ndarray
    labels: LabelSequence
    word_map: WordMap
    ref_timings: list[WordTiming]

    @property
    def n_frames(self) -> int:
        return self.features_lo.shape[0]


def _moving_average(frames: np.ndarray, window: int) -> np.ndarray:
    """Boundary-clipped running mean; even windows take the extra frame
    from the future side (encoder lookahead analog)."""
    n = frames.shape[0]
    back = (window - 1) // 2
    ahead = window // 2
    csum = np.vstack([np.zeros((1, frames.shape[1])), np.cumsum(frames, axis=0)])
    lo = np.maximum(np.arange(n) - back, 0)
    hi = np.minimum(np.arange(n) + ahead + 1, n)
    return (csum[hi] - csum[lo]) / (hi - lo)[:, None]


def token_text(token_id: int) -> str:
    return f"t{token_id}"


def word_text(piece_ids: list[int]) -> str:
    return "-".join(token_text(p) for p in piece_ids)


def generate_corpus(spec: CorpusSpec) -> list[SynthUtterance]:
    """Deterministically generate a corpus from its spec."""
    rng = np.random.default_rng(spec.seed)
    means = rng.normal(size=(spec.vocab_size + 1, spec.feature_dim))
    means[1:] = means[0] + TOKEN_SILENCE_PULL * (means[1:] - means[0])
    silence_mean = means[0]

    utts = []
    for i in range(spec.n_utts):
        n_words = int(rng.integers(spec.words_per_utt[0], spec.words_per_utt[1] + 1))
        pieces: list[int] = []
        word_pieces: list[list[int]] = []
        for _ in range(n_words):
            n_pieces = int(rng.integers(spec.pieces_per_word[0], spec.pieces_per_word[1] + 1))
            group = []
            for _ in range(n_pieces):
                tok = int(rng.integers(1, spec.vocab_size + 1))
                while pieces and tok == pieces[-1]:
                    tok = int(rng.integers(1, spec.vocab_size + 1))
                pieces.append(tok)
                group.append(tok)
            word_pieces.append(group)

        def gap() -> int:
            return int(rng.integers(spec.gap_frames[0], spec.gap_frames[1] + 1))

        rows: list[np.ndarray] = []
        spans: list[tuple[int, int]] = []

        def emit(mean: np.ndarray, n: int):
            rows.append(np.tile(mean, (n, 1)))

        emit(silence_mean, gap())
        t = len(rows[0])
        for w, group in enumerate(word_pieces):
            if w > 0:
                g = gap()
                emit(silence_mean, g)
                t += g
            for tok in group:
                n = int(rng.integers(spec.span_frames[0], spec.span_frames[1] + 1))
                emit(means[tok], n)
                spans.append((t, t + n - 1))
                t += n
        emit(silence_mean, gap())

        clean = np.vstack(rows)
        features_lo = clean + spec.noise_sigma * rng.normal(size=clean.shape)
        features_hi = _moving_average(features_lo, spec.context_window)

        words = []
        ref = []
        u = 0
        for group in word_pieces:
            first, last = u, u + len(group) - 1
            text = word_text(group)
            words.append((text, first, last))
            ref.append(
                WordTiming(text, spans[first][0] * FRAME_MS, (spans[last][1] + 1) * FRAME_MS)
            )
            u += len(group)

        utts.append(
            SynthUtterance(
                utt_id=f"synth-{i:04d}",
                features_lo=features_lo,
                features_hi=features_hi,
                labels=LabelSequence(tuple(pieces)),
                word_map=WordMap(tuple(words)),
                ref_timings=ref,
            )
        )
    return utts


def split_corpus(
    corpus: list[SynthUtterance], holdout_every: int = 5
) -> tuple[list[SynthUtterance], list[SynthUtterance]]:
    """Deterministic train/heldout split: every holdout_every-th utterance
    is held out."""
    train = [u for i, u in enumerate(corpus) if i % holdout_every != holdout_every - 1]
    held = [u for i, u in enumerate(corpus) if i % holdout_every == holdout_every - 1]
    return train, held


@dataclass(eq=False)
class Classifier:
    """Two-hidden-layer tanh network mapping frame features to vocab logits."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    version: int = 0

    @classmethod
    def init(cls, input_dim: int, hidden: int, n_classes: int, seed: int) -> "Classifier":
        rng = np.random.default_rng(seed)
        def layer(n_in, n_out):
            return rng.normal(scale=1.0 / np.sqrt(n_in), size=(n_in, n_out))
        return cls(
            w1=layer(input_dim, hidden), b1=np.zeros(hidden),
            w2=layer(hidden, hidden), b2=np.zeros(hidden),
            w3=0.1 * layer(hidden, n_classes), b3=np.zeros(n_classes),
        )

    @property
    def input_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def n_classes(self) -> int:
        return self.w3.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
                "w3": self.w3, "b3": self.b3}

    def apply_update(self, grads: dict[str, np.ndarray], learning_rate: float) -> None:
        for name, param in self.params().items():
            param -= learning_rate * grads[name]
        self.version += 1


def model_forward(
    clf: Classifier, features: np.ndarray, utt_id: str = "<utt>", frame_ms: float = FRAME_MS
) -> tuple[LogitMatrix, dict]:
    """Forward pass returning logits plus the activation cache for backward."""
    if features.ndim != 2 or features.shape[1] != clf.input_dim:
        raise ValueError(
            f"{utt_id}: input dim {features.shape} does not match classifier "
            f"input dim {clf.input_dim}"
        )
    a1 = np.tanh(features @ clf.w1 + clf.b1)
    a2 = np.tanh(a1 @ clf.w2 + clf.b2)
    logits = a2 @ clf.w3 + clf.b3
    cache = {"x": features, "a1": a1, "a2": a2, "version": clf.version}
    return LogitMatrix(utt_id, logits, frame_ms), cache


def model_backward(clf: Classifier, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients of the forward chain w.r.t. parameters."""
    if cache["version"] != clf.version:
        raise ValueError("stale cache: classifier was updated after the forward pass")
    x, a1, a2 = cache["x"], cache["a1"], cache["a2"]
    da2 = dlogits @ clf.w3.T
    dz2 = da2 * (1.0 - a2 * a2)
    da1 = dz2 @ clf.w2.T
    dz1 = da1 * (1.0 - a1 * a1)
    return {
        "w3": a2.T @ dlogits, "b3": dlogits.sum(axis=0),
        "w2": a1.T @ dz2, "b2": dz2.sum(axis=0),
        "w1": x.T @ dz1, "b1": dz1.sum(axis=0),
    }


@dataclass
class TrainConfig:
    """Trainer settings; method picks the loss, the rest are shared knobs."""

    method: str
    gamma_train: float = 0.25
    gamma_inf: float = 1.0
    cetc: CetcParams = field(default_factory=CetcParams)
    pfr: PfrParams | None = None
    fuse_features: bool = False
    hidden: int = 64
    epochs: int = 150
    batch_size: int = 64
    learning_rate: float = 0.1
    seed: int = 7

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}, expected one of {METHODS}")
        if self.method == "pfr" and self.pfr is None:
            raise ValueError("method 'pfr' requires pfr params (lambda_pfr has no default)")
        if self.epochs < 1 or self.batch_size < 1 or self.hidden < 1:
            raise ValueError("epochs, batch_size and hidden must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")


@dataclass
class EpochStats:
    stage: str
    epoch: int
    mean_loss: float
    blank_occupancy: float


def model_inputs(utt: SynthUtterance, fuse_features: bool) -> np.ndarray:
    """Classifier input: the smoothed stream, optionally with the raw one."""
    if fuse_features:
        return np.concatenate([utt.features_hi, utt.features_lo], axis=1)
    return utt.features_hi


def _inputs_for(clf: Classifier, utt: SynthUtterance) -> np.ndarray:
    d = utt.features_lo.shape[1]
    if clf.input_dim == d:
        return utt.features_hi
    if clf.input_dim == 2 * d:
        return model_inputs(utt, fuse_features=True)
    raise ValueError(
        f"classifier input dim {clf.input_dim} matches neither {d} nor {2 * d}"
    )


def corpus_blank_occupancy(clf: Classifier, corpus: list[SynthUtterance]) -> float:
    """Mean fraction of blank-dominant frames under the plain posteriors."""
    values = []
    for utt in corpus:
        logits, _ = model_forward(clf, _inputs_for(clf, utt), utt.utt_id)
        values.append(blank_occupancy(np.exp(log_softmax_rows(logits))))
    return float(np.mean(values))


def _sgd_epochs(
    clf: Classifier,
    corpus: list[SynthUtterance],
    loss_and_grad,
    config: TrainConfig,
    rng: np.random.Generator,
    stage: str,
    log_records: list[EpochStats],
) -> None:
    skipped: set[str] = set()
    for epoch in range(config.epochs):
        order = rng.permutation(len(corpus))
        losses = []
        for b, lo in enumerate(range(0, len(order), config.batch_size)):
            batch = [corpus[i] for i in order[lo : lo + config.batch_size]]
            grads = None
            n_used = 0
            for utt in batch:
                try:
                    logits, cache = model_forward(
                        clf, model_inputs(utt, config.fuse_features), utt.utt_id
                    )
                    loss, dlogits = loss_and_grad(logits, utt)
                except NoValidPathError as err:
                    if utt.utt_id not in skipped:
                        log.warning("skipping %s: %s", utt.utt_id, err)
                        skipped.add(utt.utt_id)
                    continue
                except ValueError as err:
                    if "non-finite" in str(err):
                        raise TrainingDivergedError(
                            f"diverged on {utt.utt_id} (epoch {epoch}, batch {b}): {err}"
                        ) from err
                    raise
                if not np.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss on {utt.utt_id} (epoch {epoch}, batch {b})"
                    )
                losses.append(loss)
                utt_grads = model_backward(clf, cache, dlogits)
                if grads is None:
                    grads = utt_grads
                else:
                    for k in grads:
                        grads[k] += utt_grads[k]
                n_used += 1
            if grads is not None:
                for k in grads:
                    grads[k] /= n_used
                clf.apply_update(grads, config.learning_rate)
                if not all(np.isfinite(v).all() for v in clf.params().values()):
                    raise TrainingDivergedError(
                        f"non-finite parameters after epoch {epoch}, batch {b}"
                    )
        log_records.append(
            EpochStats(stage, epoch, float(np.mean(losses)) if losses else float("nan"),
                       corpus_blank_occupancy(clf, corpus))
        )


def cetc_targets(
    clf: Classifier,
    corpus: list[SynthUtterance],
    params: CetcParams,
    n_classes: int,
    fuse_features: bool = False,
) -> dict[str, GuidedTargets]:
    """Guided targets from a trained classifier's forced-aligned peaks.

    Utterances with no valid alignment path are skipped with a warning.
    """
    targets: dict[str, GuidedTargets] = {}
    for utt in corpus:
        logits, _ = model_forward(clf, model_inputs(utt, fuse_features), utt.utt_id)
        log_probs = log_softmax_rows(logits)
        try:
            path = forced_align(log_probs, utt.labels)
        except NoValidPathError as err:
            log.warning("cetc targets: skipping %s: %s", utt.utt_id, err)
            continue
        spans = token_spans(path, np.exp(log_probs))
        peaks = [s.peak_frame for s in spans]
        bounds = cetc_boundaries(peaks, utt.n_frames, params)
        targets[utt.utt_id] = cetc_guided_targets(
            utt.labels, peaks, bounds, params.beta, utt.n_frames, n_classes
        )
    return targets


def train(
    config: TrainConfig, corpus: list[SynthUtterance], n_classes: int | None = None
) -> tuple[Classifier, list[EpochStats]]:
    """Train a classifier on the corpus with the configured method.

    peaky: plain CTC. npc: CTC on label-prior-adjusted logits. pfr: the npc
    loss plus the weighted peak regularizer. cetc: a peaky first stage whose
    forced-aligned peaks are expanded into guided targets that retrain a
    fresh classifier with cross-entropy.
    """
    if not corpus:
        raise ValueError("corpus is empty")
    if n_classes is None:
        n_classes = max(max(u.labels.tokens) for u in corpus) + 1
    input_dim = model_inputs(corpus[0], config.fuse_features).shape[1]
    rng = np.random.default_rng(config.seed)
    clf = Classifier.init(input_dim, config.hidden, n_classes, config.seed)
    records: list[EpochStats] = []

    if config.method in ("peaky", "npc", "pfr"):
        def loss_and_grad(logits: LogitMatrix, utt: SynthUtterance):
            if config.method == "peaky":
                return ctc_grad(logits, utt.labels)
            if config.method == "npc":
                return prior_ctc_grad(logits, utt.labels, config.gamma_train)
            ctc_part = prior_ctc_grad(logits, utt.labels, config.gamma_train)
            pfr_part = pfr_loss_grad(logits, config.pfr)
            return combined_loss(ctc_part, pfr_part, None, config.pfr)

        _sgd_epochs(clf, corpus, loss_and_grad, config, rng, config.method, records)
        return clf, records

    # cetc: stage 1 is plain CTC, stage 2 retrains on guided targets
    def stage1_loss(logits: LogitMatrix, utt: SynthUtterance):
        return ctc_grad(logits, utt.labels)

    _sgd_epochs(clf, corpus, stage1_loss, config, rng, "cetc-stage1", records)

    targets = cetc_targets(clf, corpus, config.cetc, n_classes, config.fuse_features)
    if not targets:
        raise TrainingDivergedError("cetc: no utterance produced guided targets")

    clf2 = Classifier.init(input_dim, config.hidden, n_classes, config.seed + 1)

    def stage2_loss(logits: LogitMatrix, utt: SynthUtterance):
        if utt.utt_id not in targets:
            raise NoValidPathError(f"{utt.utt_id} has no guided targets")
        return guided_ce_grad(logits, targets[utt.utt_id])

    _sgd_epochs(clf2, corpus, stage2_loss, config, rng, "cetc-stage2", records)
    return clf2, records


def predict_timings(
    clf: Classifier,
    corpus: list[SynthUtterance],
    gamma_inf: float,
    offset_ms: float = 0.0,
) -> dict[str, list[WordTiming]]:
    """Forced-alignment word timings for every utterance (oracle transcript).

    Utterances with no valid path are skipped with a warning and omitted.
    """
    out: dict[str, list[WordTiming]] = {}
    for utt in corpus:
        logits, _ = model_forward(clf, _inputs_for(clf, utt), utt.utt_id)
        adjusted = apply_label_prior(logits, gamma_inf)
        log_probs = log_softmax_rows(adjusted)
        try:
            path = forced_align(log_probs, utt.labels)
        except NoValidPathError as err:
            log.warning("skipping %s: %s", utt.utt_id, err)
            continue
        spans = token_spans(path, np.exp(log_probs))
        out[utt.utt_id] = words_from_spans(
            spans, utt.word_map, FRAME_MS, offset_ms, n_frames=utt.n_frames
        )
    return out


def reference_timings(corpus: list[SynthUtterance]) -> dict[str, list[WordTiming]]:
    return {utt.utt_id: list(utt.ref_timings) for utt in corpus}


def evaluate(
    clf: Classifier,
    corpus: list[SynthUtterance],
    gamma_inf: float,
    offset_ms: float = 0.0,
    thresholds_ms: tuple[float, ...] = (20.0, 80.0),
) -> MetricsReport:
    """Score forced-alignment timings against the corpus ground truth."""
    pred = predict_timings(clf, corpus, gamma_inf, offset_ms)
    pairs: list[MatchedPair] = []
    n_hyp = n_ref = 0
    for utt in corpus:
        refs = utt.ref_timings
        n_ref += len(refs)
        hyp = pred.get(utt.utt_id)
        if hyp is None:
            continue
        n_hyp += len(hyp)
        for hid, rid in edit_align([w.word for w in hyp], [w.word for w in refs]):
            pairs.append(MatchedPair(hyp[hid], refs[rid]))
    return timing_metrics(pairs, list(thresholds_ms), n_hyp=n_hyp, n_ref=n_ref)


def pfr_corpus_spec() -> CorpusSpec:
    """Corpus preset for the peak-regularizer sweep.

    Longer piece chains carry the frame-to-frame imitation pressure and a
    wider context window widens the boundary ramps it acts on.
    """
    return CorpusSpec(pieces_per_word=(2, 4), context_window=8)


# offset search protocol shared by the sweeps: reference times are quantized
# to the 10 ms frame, so the threshold sits half a frame above the quantum
# (the score then counts whole error bins instead of aliasing against them)
OFFSET_RANGE = (-100.0, 100.0)
OFFSET_STEP = 10.0
OFFSET_THRESHOLD = 15.0


def _sweep_scores(
    clf: Classifier,
    corpus: list[SynthUtterance],
    heldout: list[SynthUtterance],
    gamma_inf: float,
    thresholds: tuple[float, ...],
) -> dict:
    report = evaluate(clf, heldout, gamma_inf, thresholds_ms=thresholds)
    pred = predict_timings(clf, corpus, gamma_inf)
    offset, _, _ = gridsearch_offset(
        pred, reference_timings(corpus), OFFSET_RANGE, OFFSET_STEP, OFFSET_THRESHOLD
    )
    hist = peak_histogram(peak_reference_items(clf, corpus, gamma_inf), 10, (-1.0, 2.0))
    row = {
        "ave_st_ms": report.ave_st_delta_ms,
        "ave_ed_ms": report.ave_ed_delta_ms,
        "offset_ms": offset,
        "mean_peak_rel": hist.mean_rel_pos,
    }
    for tau in thresholds:
        row[f"pct_ws_{tau:g}"] = report.pct_ws[tau]
        row[f"pct_we_{tau:g}"] = report.pct_we[tau]
    return row


def sweep_gamma(
    spec: CorpusSpec | None = None,
    gammas_train: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0),
    gammas_inf: tuple[float, ...] = (0.0, 1.0),
    thresholds: tuple[float, ...] = (20.0, 80.0),
    seed: int = 7,
    epochs: int = 150,
    learning_rate: float = 0.1,
    batch_size: int = 64,
    fuse_features: bool = False,
) -> list[dict]:
    """Label-prior grid: one training per gamma_train, one row per
    (gamma_train, gamma_inf) pair, percentages scored on the held-out split."""
    spec = spec or CorpusSpec()
    corpus = generate_corpus(spec)
    train_split, heldout = split_corpus(corpus)
    rows = []
    for g_train in gammas_train:
        config = TrainConfig(
            method="npc", gamma_train=g_train, seed=seed, epochs=epochs,
            learning_rate=learning_rate, batch_size=batch_size,
            fuse_features=fuse_features,
        )
        clf, records = train(config, train_split, n_classes=spec.vocab_size + 1)
        for g_inf in gammas_inf:
            row = {"gamma_train": g_train, "gamma_inf": g_inf,
                   "blank_occupancy": records[-1].blank_occupancy}
            row.update(_sweep_scores(clf, corpus, heldout, g_inf, thresholds))
            rows.append(row)
    return rows


def sweep_pfr(
    spec: CorpusSpec | None = None,
    lambdas: tuple[float, ...] = (0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0),
    thresholds: tuple[float, ...] = (20.0, 80.0),
    seed: int = 3,
    epochs: int = 200,
    learning_rate: float = 0.07,
    batch_size: int = 64,
    mu: int = -1,
    tau: float = 7.0,
    gamma_train: float = 0.25,
    gamma_inf: float = 1.0,
) -> list[dict]:
    """Peak-regularizer weight grid on the pfr corpus preset, one training
    per lambda; peak statistics and offsets come from the full corpus."""
    spec = spec or pfr_corpus_spec()
    corpus = generate_corpus(spec)
    train_split, heldout = split_corpus(corpus)
    rows = []
    for lam in lambdas:
        config = TrainConfig(
            method="pfr", gamma_train=gamma_train, gamma_inf=gamma_inf,
            pfr=PfrParams(lambda_pfr=lam, mu=mu, tau=tau), seed=seed,
            epochs=epochs, learning_rate=learning_rate, batch_size=batch_size,
        )
        clf, records = train(config, train_split, n_classes=spec.vocab_size + 1)
        row = {"lambda_pfr": lam, "blank_occupancy": records[-1].blank_occupancy}
        row.update(_sweep_scores(clf, corpus, heldout, gamma_inf, thresholds))
        rows.append(row)
    return rows


def peak_reference_items(
    clf: Classifier, corpus: list[SynthUtterance], gamma_inf: float
) -> list[tuple[float, WordTiming]]:
    """(peak_ms, reference word) pairs for every piece of every aligned word."""
    items: list[tuple[float, WordTiming]] = []
    for utt in corpus:
        logits, _ = model_forward(clf, _inputs_for(clf, utt), utt.utt_id)
        adjusted = apply_label_prior(logits, gamma_inf)
        log_probs = log_softmax_rows(adjusted)
        try:
            path = forced_align(log_probs, utt.labels)
        except NoValidPathError:
            continue
        spans = token_spans(path, np.exp(log_probs))
        for (word, first, last), ref in zip(utt.word_map.words, utt.ref_timings):
            for u in range(first, last + 1):
                items.append((spans[u].peak_frame * FRAME_MS, ref))
    return items
