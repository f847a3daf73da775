"""Log-space CTC loss, gradients, label priors and Viterbi forced alignment.

All lattice computations run over the standard blank-interleaved topology:
a label sequence of length U expands to S = 2U+1 states, even states emit
blank (id 0) and odd state 2u+1 emits the u-th label. Probabilities are
kept in natural-log domain throughout; impossible cells hold -inf.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BLANK_ID = 0

NEG_INF = float("-inf")


class NoValidPathError(ValueError):
    """The CTC topology admits no valid path for the given (T, labels)."""


@dataclass(eq=False)
class LogitMatrix:
    """Raw (pre-softmax) frame-level classifier scores for one utterance.

    frames is a T x V float64 array; frame_ms is the duration of one frame
    in milliseconds.
    """

    utt_id: str
    frames: np.ndarray
    frame_ms: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ValueError(f"{self.utt_id}: frames must be 2-D, got shape {self.frames.shape}")
        t, v = self.frames.shape
        if t < 1 or v < 2:
            raise ValueError(f"{self.utt_id}: need T >= 1 and V >= 2, got T={t}, V={v}")
        if not (self.frame_ms > 0):
            raise ValueError(f"{self.utt_id}: frame_ms must be positive, got {self.frame_ms}")
        _check_finite(self.frames, self.utt_id)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_vocab(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class LabelSequence:
    """Token id sequence; ids live in [1, V-1], blank (0) is never a label."""

    tokens: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if len(self.tokens) < 1:
            raise ValueError("label sequence must contain at least one token")
        if any(t < 1 for t in self.tokens):
            raise ValueError(f"labels must be >= 1 (0 is the blank id), got {self.tokens}")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def n_repeats(self) -> int:
        """Count of adjacent equal labels; each one forces a mandatory blank."""
        return sum(1 for a, b in zip(self.tokens, self.tokens[1:]) if a == b)


@dataclass(eq=False)
class CtcLattice:
    """Forward/backward log-domain lattices, both of shape (2U+1) x T.

    alpha and beta each include the emission term at their own frame, so the
    per-frame consistency identity reads
    logsumexp_s(alpha[s,t] + beta[s,t] - emit[s,t]) == log_likelihood.
    """

    log_alpha: np.ndarray
    log_beta: np.ndarray
    log_likelihood: float


@dataclass(eq=False)
class AlignmentPath:
    """Length-T sequence of lattice states for one utterance.

    Even states emit blank, odd state 2u+1 emits labels.tokens[u].
    """

    states: np.ndarray
    labels: LabelSequence

    def emitted(self) -> np.ndarray:
        """Per-frame emitted token ids (blank included)."""
        syms = _state_symbols(self.labels)
        return syms[self.states]

    def collapse(self) -> tuple[int, ...]:
        """Apply the CTC collapse: drop consecutive repeats, then blanks."""
        emitted = self.emitted()
        keep = np.ones(len(emitted), dtype=bool)
        keep[1:] = emitted[1:] != emitted[:-1]
        deduped = emitted[keep]
        return tuple(int(t) for t in deduped[deduped != BLANK_ID])


@dataclass(frozen=True)
class TokenSpan:
    """Frame extent of one label token on an alignment path."""

    token_index: int
    start_frame: int
    end_frame: int
    peak_frame: int

    def __post_init__(self):
        if not (self.start_frame <= self.peak_frame <= self.end_frame):
            raise ValueError(
                f"token {self.token_index}: need start <= peak <= end, got "
                f"({self.start_frame}, {self.peak_frame}, {self.end_frame})"
            )


def _check_finite(frames: np.ndarray, utt_id: str = "<input>") -> None:
    if not np.isfinite(frames).all():
        bad = np.argwhere(~np.isfinite(np.asarray(frames)))
        t, v = bad[0]
        raise ValueError(f"{utt_id}: non-finite logit at frame {t}, vocab {v}")


def logsumexp(values: np.ndarray, axis: int | None = None) -> np.ndarray | float:
    """Numerically stable log(sum(exp(values))); all-(-inf) reduces to -inf."""
    values = np.asarray(values, dtype=np.float64)
    hi = np.max(values, axis=axis, keepdims=True)
    hi = np.where(np.isfinite(hi), hi, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(values - hi), axis=axis)) + np.squeeze(hi, axis=axis)
    if out.ndim == 0:
        return float(out)
    return out


def log_softmax_rows(logits: LogitMatrix | np.ndarray) -> np.ndarray:
    """Row-wise log-softmax of a T x V score matrix."""
    frames = logits.frames if isinstance(logits, LogitMatrix) else np.asarray(logits, dtype=np.float64)
    _check_finite(frames, logits.utt_id if isinstance(logits, LogitMatrix) else "<input>")
    shifted = frames - frames.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_rows(logits: LogitMatrix | np.ndarray) -> np.ndarray:
    """Row-wise softmax; rows sum to 1."""
    return np.exp(log_softmax_rows(logits))


def _state_symbols(labels: LabelSequence) -> np.ndarray:
    """Vocab id emitted by each of the 2U+1 states."""
    syms = np.full(2 * len(labels) + 1, BLANK_ID, dtype=np.int64)
    syms[1::2] = labels.tokens
    return syms


def _skip_allowed(syms: np.ndarray) -> np.ndarray:
    """skip[s] is True when the s-2 -> s transition is legal (distinct labels)."""
    skip = np.zeros(len(syms), dtype=bool)
    skip[3::2] = syms[3::2] != syms[1:-2:2]
    return skip


def _check_path_exists(n_frames: int, labels: LabelSequence) -> None:
    needed = len(labels) + labels.n_repeats
    if n_frames < needed:
        raise NoValidPathError(
            f"no valid path: T={n_frames} < U + repeats = {needed} "
            f"for labels of length {len(labels)}"
        )


def _emissions(log_probs: np.ndarray, syms: np.ndarray) -> np.ndarray:
    """State-indexed emission log-probs, shape S x T."""
    return log_probs[:, syms].T


def _forward(emit: np.ndarray, skip: np.ndarray) -> np.ndarray:
    n_states, n_frames = emit.shape
    alpha = np.full((n_states, n_frames), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    alpha[1, 0] = emit[1, 0]
    for t in range(1, n_frames):
        prev = alpha[:, t - 1]
        acc = np.logaddexp(prev, np.concatenate(([NEG_INF], prev[:-1])))
        from_skip = np.concatenate(([NEG_INF, NEG_INF], prev[:-2]))
        acc = np.logaddexp(acc, np.where(skip, from_skip, NEG_INF))
        alpha[:, t] = acc + emit[:, t]
    return alpha


def _backward(emit: np.ndarray, skip: np.ndarray) -> np.ndarray:
    n_states, n_frames = emit.shape
    beta = np.full((n_states, n_frames), NEG_INF)
    beta[-1, -1] = emit[-1, -1]
    beta[-2, -1] = emit[-2, -1]
    # skip legality is indexed by the target state s+2
    skip_fwd = np.concatenate((skip[2:], [False, False]))
    for t in range(n_frames - 2, -1, -1):
        nxt = beta[:, t + 1]
        acc = np.logaddexp(nxt, np.concatenate((nxt[1:], [NEG_INF])))
        to_skip = np.concatenate((nxt[2:], [NEG_INF, NEG_INF]))
        acc = np.logaddexp(acc, np.where(skip_fwd, to_skip, NEG_INF))
        beta[:, t] = acc + emit[:, t]
    return beta


def ctc_loss(log_probs: np.ndarray, labels: LabelSequence) -> tuple[float, CtcLattice]:
    """CTC negative log-likelihood of labels under a T x V log-prob matrix.

    Returns the loss together with the full forward/backward lattice so that
    occupancy posteriors can be derived without recomputation.
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    n_frames, n_vocab = log_probs.shape
    if max(labels.tokens) >= n_vocab:
        raise ValueError(f"label id {max(labels.tokens)} out of range for V={n_vocab}")
    _check_path_exists(n_frames, labels)

    syms = _state_symbols(labels)
    skip = _skip_allowed(syms)
    emit = _emissions(log_probs, syms)
    alpha = _forward(emit, skip)
    beta = _backward(emit, skip)
    log_like = float(np.logaddexp(alpha[-1, -1], alpha[-2, -1]))
    if not np.isfinite(log_like):
        raise NoValidPathError("no valid path: zero total path probability")
    return -log_like, CtcLattice(alpha, beta, log_like)


def ctc_grad(logits: LogitMatrix, labels: LabelSequence) -> tuple[float, np.ndarray]:
    """CTC loss and its gradient w.r.t. raw logits.

    grad[t, v] = softmax(logits)[t, v] - occupancy(v, t); rows sum to zero.
    """
    log_probs = log_softmax_rows(logits)
    loss, lattice = ctc_loss(log_probs, labels)
    syms = _state_symbols(labels)
    emit = _emissions(log_probs, syms)
    joint = lattice.log_alpha + lattice.log_beta - emit
    state_post = np.exp(joint - lattice.log_likelihood)
    occ = np.zeros_like(log_probs)
    np.add.at(occ.T, syms, state_post)
    return loss, np.exp(log_probs) - occ


def apply_label_prior(logits: LogitMatrix, gamma: float) -> LogitMatrix:
    """Subtract gamma times the per-label time-mean of the raw logits.

    The prior is computed from the utterance's own frames, one mean per
    vocabulary entry; gamma=0 is the identity.
    """
    if not np.isfinite(gamma):
        raise ValueError(f"gamma must be finite, got {gamma}")
    prior = logits.frames.mean(axis=0, keepdims=True)
    return LogitMatrix(logits.utt_id, logits.frames - gamma * prior, logits.frame_ms)


def prior_ctc_grad(
    logits: LogitMatrix, labels: LabelSequence, gamma_train: float
) -> tuple[float, np.ndarray]:
    """CTC loss/grad evaluated on label-prior-adjusted logits.

    The gradient chains through the per-label mean:
    dL/dO[t, v] = g[t, v] - (gamma/T) * sum_t' g[t', v], where g is the
    gradient w.r.t. the adjusted logits.
    """
    adjusted = apply_label_prior(logits, gamma_train)
    loss, g = ctc_grad(adjusted, labels)
    n_frames = logits.n_frames
    return loss, g - (gamma_train / n_frames) * g.sum(axis=0, keepdims=True)


def forced_align(log_probs: np.ndarray, labels: LabelSequence) -> AlignmentPath:
    """Viterbi search for the most probable valid CTC path.

    Score ties are broken toward advancing into the next token as early as
    possible: the backtrace prefers the higher predecessor state, and the
    final frame prefers the trailing blank over the last label state.
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    n_frames, n_vocab = log_probs.shape
    if max(labels.tokens) >= n_vocab:
        raise ValueError(f"label id {max(labels.tokens)} out of range for V={n_vocab}")
    _check_path_exists(n_frames, labels)

    syms = _state_symbols(labels)
    skip = _skip_allowed(syms)
    emit = _emissions(log_probs, syms)
    n_states = len(syms)

    score = np.full((n_states, n_frames), NEG_INF)
    back = np.zeros((n_states, n_frames), dtype=np.int64)
    score[0, 0] = emit[0, 0]
    score[1, 0] = emit[1, 0]
    back[:, 0] = np.arange(n_states)
    for t in range(1, n_frames):
        prev = score[:, t - 1]
        stay = prev
        step = np.concatenate(([NEG_INF], prev[:-1]))
        jump = np.where(skip, np.concatenate(([NEG_INF, NEG_INF], prev[:-2])), NEG_INF)
        # >= keeps the higher predecessor on ties (earliest advancement)
        best = np.where(stay >= step, stay, step)
        pred = np.where(stay >= step, np.arange(n_states), np.arange(n_states) - 1)
        pred = np.where(best >= jump, pred, np.arange(n_states) - 2)
        best = np.where(best >= jump, best, jump)
        score[:, t] = best + emit[:, t]
        back[:, t] = pred

    if not (np.isfinite(score[-1, -1]) or np.isfinite(score[-2, -1])):
        raise NoValidPathError("no valid path: final states unreachable")
    state = n_states - 1 if score[-1, -1] >= score[-2, -1] else n_states - 2
    states = np.empty(n_frames, dtype=np.int64)
    states[-1] = state
    for t in range(n_frames - 1, 0, -1):
        state = back[state, t]
        states[t - 1] = state
    return AlignmentPath(states, labels)


def path_score(log_probs: np.ndarray, path: AlignmentPath) -> float:
    """Sum of per-frame emission log-probs along a path."""
    emitted = path.emitted()
    return float(np.asarray(log_probs)[np.arange(len(emitted)), emitted].sum())


def token_spans(path: AlignmentPath, posteriors: np.ndarray) -> list[TokenSpan]:
    """Per-token (start, end, peak) frames read off an alignment path.

    start/end bound the frames spent in the token's emitting state; the peak
    is the within-span argmax of the token's posterior (first frame on ties).
    """
    posteriors = np.asarray(posteriors)
    spans = []
    for u, token in enumerate(path.labels.tokens):
        frames = np.flatnonzero(path.states == 2 * u + 1)
        if len(frames) == 0:
            raise ValueError(f"path never visits token {u}; not a valid alignment")
        start, end = int(frames[0]), int(frames[-1])
        peak = start + int(np.argmax(posteriors[start : end + 1, token]))
        spans.append(TokenSpan(u, start, end, peak))
    return spans
