"""Two-state HMM smoothing of per-frame CNN outputs.

State 0 is no-speech and state 1 is speech. Two emission models are
supported: Bernoulli over the thresholded speech-neuron output (hard mode)
and a per-state Gaussian mixture over the raw speech probability (soft mode).
All parameters are estimated by supervised counting against ground-truth
states; the mixtures are fit by EM on each state's observations separately.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import logsumexp

NUM_STATES = 2
PROB_CLAMP = 1e-6
VARIANCE_FLOOR = 1e-4
WEIGHT_FLOOR = 1e-6
HARD_THRESHOLD = 0.5
PARAM_FORMAT_VERSION = 1
VITERBI_TIE_TOL = 1e-9

_LOG_2PI = math.log(2.0 * math.pi)


class SmootherError(Exception):
    pass


@dataclass(frozen=True)
class HmmTransitions:
    initial: np.ndarray  # (2,)
    matrix: np.ndarray  # (2, 2), row = current state

    def __post_init__(self):
        if not np.all(self.matrix > 0) or not np.all(self.initial >= 0):
            raise SmootherError("transition probabilities must be positive")
        if not np.allclose(self.matrix.sum(axis=1), 1.0, rtol=0, atol=1e-12):
            raise SmootherError("transition rows must sum to 1")
        if not abs(self.initial.sum() - 1.0) <= 1e-12:
            raise SmootherError("initial distribution must sum to 1")


@dataclass(frozen=True)
class BernoulliEmissions:
    p_obs1: np.ndarray  # P(observed bit = 1 | state), shape (2,)

    def __post_init__(self):
        if not np.all((self.p_obs1 > 0) & (self.p_obs1 < 1)):
            raise SmootherError("Bernoulli parameters must lie strictly inside (0, 1)")


@dataclass(frozen=True)
class GmmEmissions:
    weights: np.ndarray  # (2, K)
    means: np.ndarray  # (2, K)
    variances: np.ndarray  # (2, K)
    # per-state EM log-likelihood trace; diagnostic only, never serialized
    loglik_history: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        if not (self.weights.shape == self.means.shape == self.variances.shape):
            raise SmootherError("GMM parameter shapes differ")
        if not np.allclose(self.weights.sum(axis=1), 1.0, rtol=0, atol=1e-12):
            raise SmootherError("mixture weights must sum to 1 per state")
        if np.any(self.weights < WEIGHT_FLOOR * (1 - 1e-9)):
            raise SmootherError("mixture weight below floor")
        if np.any(self.variances < VARIANCE_FLOOR * (1 - 1e-9)):
            raise SmootherError("variance below floor")

    @property
    def num_mixtures(self) -> int:
        return self.weights.shape[1]


Emissions = Union[BernoulliEmissions, GmmEmissions]


@dataclass(frozen=True)
class SmootherParams:
    transitions: HmmTransitions
    emissions: Emissions
    speech_bias: float = 0.0

    @property
    def mode(self) -> str:
        return "hard" if isinstance(self.emissions, BernoulliEmissions) else "soft"

    def with_bias(self, speech_bias: float) -> "SmootherParams":
        return replace(self, speech_bias=float(speech_bias))


# -- supervised estimation ----------------------------------------------------


@dataclass(frozen=True)
class SupervisedCounts:
    """Raw counts behind a supervised fit (before add-one smoothing)."""

    state_counts: np.ndarray  # (2,)
    bigram_counts: np.ndarray  # (2, 2)
    obs1_counts: np.ndarray  # (2,) frames with observed bit 1, per true state


def _check_pair(obs, states, min_len=2):
    obs = np.asarray(obs)
    states = np.asarray(states).astype(np.int64)
    if len(obs) != len(states):
        raise SmootherError(f"length mismatch: {len(obs)} observations, {len(states)} states")
    if len(states) < min_len:
        raise SmootherError(f"need at least {min_len} frames, got {len(states)}")
    if not np.all((states == 0) | (states == 1)):
        raise SmootherError("true states must be 0/1")
    return obs, states


def count_supervised(observed_bits, true_states) -> SupervisedCounts:
    obs, states = _check_pair(observed_bits, true_states)
    obs = obs.astype(np.int64)
    if not np.all((obs == 0) | (obs == 1)):
        raise SmootherError("observed bits must be 0/1")
    state_counts = np.bincount(states, minlength=2)
    bigrams = np.zeros((2, 2), dtype=np.int64)
    np.add.at(bigrams, (states[:-1], states[1:]), 1)
    obs1 = np.bincount(states, weights=obs, minlength=2).astype(np.int64)
    return SupervisedCounts(state_counts, bigrams, obs1)


def _transitions_from_states(states: np.ndarray) -> HmmTransitions:
    n = np.bincount(states, minlength=2)
    bigrams = np.zeros((2, 2), dtype=np.int64)
    np.add.at(bigrams, (states[:-1], states[1:]), 1)
    return _transitions_from_counts(n, bigrams)


def _transitions_from_counts(state_counts, bigrams) -> HmmTransitions:
    matrix = (bigrams + 1) / (bigrams.sum(axis=1, keepdims=True) + 2)
    initial = (state_counts + 1) / (state_counts.sum() + 2)
    return HmmTransitions(initial=initial.astype(np.float64), matrix=matrix.astype(np.float64))


def fit_hmm_supervised(observed_bits, true_states) -> SmootherParams:
    """Bernoulli-emission HMM from aligned (CNN bit, true state) sequences.

    Every count gets add-one smoothing: transitions from true-state bigrams,
    emissions from (bit, state) co-occurrences, and the initial distribution
    from state frequencies.
    """
    c = count_supervised(observed_bits, true_states)
    trans = _transitions_from_counts(c.state_counts, c.bigram_counts)
    p_obs1 = (c.obs1_counts + 1) / (c.state_counts + 2)
    return SmootherParams(trans, BernoulliEmissions(p_obs1.astype(np.float64)))


@dataclass(frozen=True)
class EmConfig:
    tol: float = 1e-7
    max_iter: int = 200
    variance_floor: float = VARIANCE_FLOOR
    weight_floor: float = WEIGHT_FLOOR


@dataclass(frozen=True)
class GmmFit:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    loglik_history: tuple
    iterations: int
    converged: bool


def _floor_weights(w: np.ndarray, floor: float) -> np.ndarray:
    """Closest point of the floored simplex for the weight M-step."""
    w = w / w.sum()
    fixed = np.zeros(len(w), dtype=bool)
    while True:
        low = (w < floor) & ~fixed
        if not low.any():
            return w
        fixed |= low
        free_mass = 1.0 - floor * fixed.sum()
        w = np.where(fixed, floor, w)
        free = ~fixed
        w[free] = w[free] / w[free].sum() * free_mass


def _component_logpdf(x, means, variances):
    d = x[:, None] - means[None, :]
    return -0.5 * (_LOG_2PI + np.log(variances)[None, :] + d * d / variances[None, :])


def fit_gmm_em(x, num_mixtures: int = 3, cfg: EmConfig = EmConfig()) -> GmmFit:
    """1-D Gaussian mixture by EM with deterministic quantile initialization.

    Means start at the (2i+1)/(2K) quantiles, weights uniform, and a shared
    variance pooled over nearest-mean assignments. Stops when the relative
    log-likelihood gain drops below ``cfg.tol`` or after ``cfg.max_iter``
    iterations. The variance floor is enforced in every M-step.
    """
    x = np.asarray(x, dtype=np.float64)
    k = num_mixtures
    if k < 1:
        raise SmootherError("num_mixtures must be >= 1")
    if len(x) < k:
        raise SmootherError(f"need at least {k} points for {k} mixtures")

    means = np.quantile(x, (2 * np.arange(k) + 1) / (2 * k))
    nearest = np.argmin(np.abs(x[:, None] - means[None, :]), axis=1)
    pooled = float(np.mean((x - means[nearest]) ** 2))
    variances = np.full(k, max(pooled, cfg.variance_floor))
    weights = np.full(k, 1.0 / k)

    history = []
    converged = False
    prev = None
    iterations = 0
    for iterations in range(1, cfg.max_iter + 1):
        joint = np.log(weights)[None, :] + _component_logpdf(x, means, variances)
        norm = logsumexp(joint, axis=1)
        ll = float(norm.sum())
        if not np.isfinite(ll):
            raise SmootherError(f"EM diverged: non-finite log-likelihood at iteration {iterations}")
        history.append(ll)
        if prev is not None and ll - prev <= cfg.tol * abs(prev):
            converged = True
            break
        prev = ll

        resp = np.exp(joint - norm[:, None])
        nk = resp.sum(axis=0)
        safe = np.where(nk > 0, nk, 1.0)
        new_means = np.where(nk > 0, resp.T @ x / safe, means)
        d = x[:, None] - new_means[None, :]
        new_var = np.where(nk > 0, np.sum(resp * d * d, axis=0) / safe, variances)
        variances = np.maximum(new_var, cfg.variance_floor)
        means = new_means
        weights = _floor_weights(nk / len(x), cfg.weight_floor)
    else:
        joint = np.log(weights)[None, :] + _component_logpdf(x, means, variances)
        history.append(float(logsumexp(joint, axis=1).sum()))

    order = np.argsort(means, kind="stable")
    return GmmFit(weights[order], means[order], variances[order], tuple(history), iterations, converged)


def clamp_probs(p) -> np.ndarray:
    return np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)


def fit_gmm_hmm_supervised(observed_probs, true_states, num_mixtures: int = 3,
                           em_cfg: EmConfig = EmConfig()) -> SmootherParams:
    """GMM-emission HMM: supervised transitions plus one EM-fit mixture per state."""
    obs, states = _check_pair(observed_probs, true_states)
    obs = np.asarray(obs, dtype=np.float64)
    if np.any((obs < 0) | (obs > 1)) or not np.all(np.isfinite(obs)):
        raise SmootherError("observed probabilities must lie in [0, 1]")
    obs = clamp_probs(obs)
    need = num_mixtures * 10
    fits = []
    for s in range(NUM_STATES):
        xs = obs[states == s]
        if len(xs) < need:
            raise SmootherError(f"state {s} has {len(xs)} frames, need at least {need}")
        fits.append(fit_gmm_em(xs, num_mixtures, em_cfg))
    emissions = GmmEmissions(
        weights=np.stack([f.weights for f in fits]),
        means=np.stack([f.means for f in fits]),
        variances=np.stack([f.variances for f in fits]),
        loglik_history=tuple(f.loglik_history for f in fits),
    )
    return SmootherParams(_transitions_from_states(states), emissions)


# -- emissions and decoding ---------------------------------------------------


def emission_loglik_seq(params: SmootherParams, observations) -> np.ndarray:
    """log P(obs_t | state) for every frame, shape (T, 2), speech bias included."""
    obs = np.asarray(observations, dtype=np.float64).reshape(-1)
    em = params.emissions
    if isinstance(em, BernoulliEmissions):
        if not np.all((obs == 0) | (obs == 1)):
            raise SmootherError("Bernoulli emissions need 0/1 observations")
        bit = obs[:, None]
        ll = bit * np.log(em.p_obs1)[None, :] + (1 - bit) * np.log1p(-em.p_obs1)[None, :]
    else:
        if np.any((obs < 0) | (obs > 1)) or not np.all(np.isfinite(obs)):
            raise SmootherError("GMM emissions need observations in [0, 1]")
        x = clamp_probs(obs)
        ll = np.empty((len(x), NUM_STATES))
        for s in range(NUM_STATES):
            joint = np.log(em.weights[s])[None, :] + _component_logpdf(x, em.means[s], em.variances[s])
            ll[:, s] = logsumexp(joint, axis=1)
    ll[:, 1] += params.speech_bias
    return ll


def emission_loglik(params: SmootherParams, observation) -> np.ndarray:
    return emission_loglik_seq(params, [observation])[0]


def path_log_prob(params: SmootherParams, observations, path) -> float:
    """Joint log-probability of one state path (with the speech bias applied)."""
    ll = emission_loglik_seq(params, observations)
    path = np.asarray(path, dtype=np.int64)
    lt = np.log(params.transitions.matrix)
    total = math.log(params.transitions.initial[path[0]]) if params.transitions.initial[path[0]] > 0 else -math.inf
    total += ll[0, path[0]]
    for t in range(1, len(path)):
        total += lt[path[t - 1], path[t]] + ll[t, path[t]]
    return float(total)


def viterbi_loglik(loglik: np.ndarray, transitions: HmmTransitions) -> tuple[np.ndarray, float]:
    """Most probable path given per-frame emission log-likelihoods.

    Ties prefer state 0 both when choosing a predecessor and at the final
    frame. Scores closer than ``VITERBI_TIE_TOL`` count as tied, so equal path
    scores summed in a different order still resolve the same way.
    """
    tol = VITERBI_TIE_TOL
    n = len(loglik)
    if n == 0:
        raise SmootherError("empty observation sequence")
    with np.errstate(divide="ignore"):
        li = np.log(transitions.initial)
    lt = np.log(transitions.matrix)
    l00, l01, l10, l11 = float(lt[0, 0]), float(lt[0, 1]), float(lt[1, 0]), float(lt[1, 1])
    e = loglik.tolist()
    d0 = float(li[0]) + e[0][0]
    d1 = float(li[1]) + e[0][1]
    back0 = bytearray(n)
    back1 = bytearray(n)
    for t in range(1, n):
        e0, e1 = e[t]
        a, b = d0 + l00, d1 + l10
        if b > a + tol:
            n0 = b
            back0[t] = 1
        else:
            n0 = a
        a, b = d0 + l01, d1 + l11
        if b > a + tol:
            n1 = b
            back1[t] = 1
        else:
            n1 = a
        d0, d1 = n0 + e0, n1 + e1
    path = np.zeros(n, dtype=np.int8)
    state = 1 if d1 > d0 + tol else 0
    best = d1 if state else d0
    for t in range(n - 1, -1, -1):
        path[t] = state
        state = back1[t] if state else back0[t]
    return path, float(best)


def viterbi(observations, params: SmootherParams) -> tuple[np.ndarray, float]:
    return viterbi_loglik(emission_loglik_seq(params, observations), params.transitions)


def _speech_probs(predictions) -> np.ndarray:
    if len(predictions) and hasattr(predictions[0], "p_speech"):
        return np.array([p.p_speech for p in predictions], dtype=np.float64)
    arr = np.asarray(predictions, dtype=np.float64)
    return arr[:, 0] if arr.ndim == 2 else arr


def hard_bits(p_speech) -> np.ndarray:
    return (np.asarray(p_speech) > HARD_THRESHOLD).astype(np.int8)


def smooth_decisions(predictions, params: SmootherParams, mode: Optional[str] = None) -> np.ndarray:
    """Viterbi-smoothed speech decisions from CNN outputs.

    ``predictions`` is a sequence of FramePrediction, an (T, 2) probability
    array, or a vector of speech probabilities.
    """
    mode = mode or params.mode
    if mode != params.mode:
        raise SmootherError(f"mode {mode!r} does not match {params.mode!r} emissions")
    p = _speech_probs(predictions)
    if len(p) == 0:
        return np.zeros(0, dtype=np.int8)
    obs = hard_bits(p) if mode == "hard" else p
    return viterbi(obs, params)[0]


# -- parameter file -----------------------------------------------------------


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in np.ravel(values))


def dumps_smoother(params: SmootherParams) -> str:
    lines = [
        "# segwright smoother parameters",
        f"format_version = {PARAM_FORMAT_VERSION}",
        f"emission = {'bernoulli' if params.mode == 'hard' else 'gmm'}",
        f"speech_bias = {repr(float(params.speech_bias))}",
        f"initial = {_fmt(params.transitions.initial)}",
        f"transition.0 = {_fmt(params.transitions.matrix[0])}",
        f"transition.1 = {_fmt(params.transitions.matrix[1])}",
    ]
    em = params.emissions
    if isinstance(em, BernoulliEmissions):
        lines.append(f"bernoulli.p_obs1 = {_fmt(em.p_obs1)}")
    else:
        lines.append(f"gmm.num_mixtures = {em.num_mixtures}")
        for s in range(NUM_STATES):
            lines.append(f"gmm.{s}.weights = {_fmt(em.weights[s])}")
            lines.append(f"gmm.{s}.means = {_fmt(em.means[s])}")
            lines.append(f"gmm.{s}.variances = {_fmt(em.variances[s])}")
    return "\n".join(lines) + "\n"


def loads_smoother(text: str) -> SmootherParams:
    kv = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise SmootherError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        kv[key] = value

    def floats(key, n=None):
        if key not in kv:
            raise SmootherError(f"missing key {key!r}")
        try:
            vals = np.array([float(v) for v in kv[key].split()], dtype=np.float64)
        except ValueError as exc:
            raise SmootherError(f"{key}: {exc}") from None
        if n is not None and len(vals) != n:
            raise SmootherError(f"{key}: expected {n} values, got {len(vals)}")
        return vals

    version = kv.get("format_version")
    if version != str(PARAM_FORMAT_VERSION):
        raise SmootherError(f"smoother format version {version}, expected {PARAM_FORMAT_VERSION}")
    trans = HmmTransitions(
        initial=floats("initial", 2),
        matrix=np.stack([floats("transition.0", 2), floats("transition.1", 2)]),
    )
    kind = kv.get("emission")
    if kind == "bernoulli":
        em = BernoulliEmissions(floats("bernoulli.p_obs1", 2))
    elif kind == "gmm":
        k = int(kv.get("gmm.num_mixtures", "0"))
        if k < 1:
            raise SmootherError("gmm.num_mixtures must be >= 1")
        em = GmmEmissions(
            weights=np.stack([floats(f"gmm.{s}.weights", k) for s in range(NUM_STATES)]),
            means=np.stack([floats(f"gmm.{s}.means", k) for s in range(NUM_STATES)]),
            variances=np.stack([floats(f"gmm.{s}.variances", k) for s in range(NUM_STATES)]),
        )
    else:
        raise SmootherError(f"unknown emission variant {kind!r}")
    return SmootherParams(trans, em, float(floats("speech_bias", 1)[0]))


def save_smoother(params: SmootherParams, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_smoother(params))


def load_smoother(path) -> SmootherParams:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise SmootherError(f"{path}: {exc}") from exc
    return loads_smoother(text)
