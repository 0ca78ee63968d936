"""Safety classification of target speed with a 3-state Gaussian HMM.

Hidden states order as (Forward, Pause, Reverse) by increasing emission
mean: slow targets are safe to approach, fast ones call for holding or
backing off.  Filtering runs in scaled form so arbitrarily long speed
sequences stay in range.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

VAR_FLOOR = 1e-8  # (m/s)^2, keeps emissions from collapsing on constant data

_FORMAT_TAG = "elte-adapt-hmm 1"


class HmmError(ValueError):
    pass


class SafetyState(enum.IntEnum):
    """Execution verdicts, ordered from permissive to protective."""

    FORWARD = 0
    PAUSE = 1
    REVERSE = 2


@dataclass(frozen=True)
class HmmModel:
    """Row-stochastic transitions, per-state Gaussian speed emissions."""

    transition: np.ndarray   # (n, n)
    means: np.ndarray        # (n,) m/s
    variances: np.ndarray    # (n,) (m/s)^2
    initial: np.ndarray      # (n,)

    def __post_init__(self):
        A = np.asarray(self.transition, dtype=float)
        mu = np.asarray(self.means, dtype=float)
        var = np.asarray(self.variances, dtype=float)
        pi = np.asarray(self.initial, dtype=float)
        n = mu.shape[0]
        if A.shape != (n, n) or var.shape != (n,) or pi.shape != (n,):
            raise HmmError("inconsistent model shapes")
        if np.abs(A.sum(axis=1) - 1.0).max() > 1e-12:
            raise HmmError("transition rows must sum to 1")
        if np.any(A < 0) or np.any(pi < 0):
            raise HmmError("probabilities must be non-negative")
        if abs(pi.sum() - 1.0) > 1e-12:
            raise HmmError("initial distribution must sum to 1")
        if np.any(var <= 0):
            raise HmmError("emission variances must be positive")
        for arr, name in ((A, "transition"), (mu, "means"), (var, "variances"), (pi, "initial")):
            arr.setflags(write=False)
        object.__setattr__(self, "transition", A)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)
        object.__setattr__(self, "initial", pi)

    @property
    def n_states(self) -> int:
        return self.means.shape[0]

    def emission_density(self, obs) -> np.ndarray:
        """Gaussian density of each state for observations (N,) -> (N, n)."""
        o = np.atleast_1d(np.asarray(obs, dtype=float))[:, None]
        return np.exp(-0.5 * (o - self.means) ** 2 / self.variances) / np.sqrt(
            2.0 * np.pi * self.variances
        )


@dataclass(frozen=True)
class ForwardResult:
    posteriors: np.ndarray      # (N, n) filtered state distributions
    log_likelihood: float
    state: SafetyState          # classification of the last posterior


def _check_speeds(speeds) -> np.ndarray:
    s = np.asarray(speeds, dtype=float)
    if s.ndim != 1 or s.size == 0:
        raise HmmError("speed sequence must be a non-empty 1-d array")
    if not np.all(np.isfinite(s)) or np.any(s < 0):
        raise HmmError("speeds must be finite and non-negative")
    return s


def forward_step(model: HmmModel, posterior, obs: float):
    """One scaled forward-filter step.

    posterior None starts a sequence from the initial distribution.
    Returns (new posterior, log of the step's scaling factor).
    """
    dens = model.emission_density([obs])[0]
    prior = model.initial if posterior is None else posterior @ model.transition
    raw = prior * dens
    c = raw.sum()
    if c <= 0.0 or not np.isfinite(c):
        # observation far outside every emission: fall back to the prior
        return prior / prior.sum(), -np.inf
    return raw / c, float(np.log(c))


def forward_filter(model: HmmModel, speeds) -> ForwardResult:
    """Filtered posteriors for a whole speed sequence, in scaled form."""
    s = _check_speeds(speeds)
    post = None
    ll = 0.0
    out = np.empty((s.size, model.n_states))
    for i, obs in enumerate(s):
        post, log_c = forward_step(model, post, obs)
        ll += log_c
        out[i] = post
    return ForwardResult(posteriors=out, log_likelihood=ll, state=classify(model, out[-1]))


def classify(model: HmmModel, posterior) -> SafetyState:
    """Most probable state; exact ties resolve toward the protective end."""
    p = np.asarray(posterior, dtype=float)
    if p.ndim != 1 or p.shape[0] != model.n_states or np.any(p < 0) or p.sum() <= 0:
        raise HmmError(f"not a posterior over {model.n_states} states: {posterior}")
    best = np.nonzero(p == p.max())[0]
    return SafetyState(int(best.max()))


@dataclass(frozen=True)
class TrainResult:
    model: HmmModel
    log_likelihoods: tuple      # one entry per EM iteration
    converged: bool


def _forward_backward(model: HmmModel, s: np.ndarray):
    n = model.n_states
    N = s.size
    dens = model.emission_density(s)
    alpha = np.empty((N, n))
    scale = np.empty(N)
    alpha[0] = model.initial * dens[0]
    scale[0] = alpha[0].sum()
    alpha[0] /= scale[0]
    for t in range(1, N):
        alpha[t] = (alpha[t - 1] @ model.transition) * dens[t]
        scale[t] = alpha[t].sum()
        alpha[t] /= scale[t]
    beta = np.empty((N, n))
    beta[-1] = 1.0
    for t in range(N - 2, -1, -1):
        beta[t] = (model.transition @ (dens[t + 1] * beta[t + 1])) / scale[t + 1]
    gamma = alpha * beta
    gamma /= gamma.sum(axis=1, keepdims=True)
    xi_sum = np.zeros((n, n))
    for t in range(N - 1):
        xi = model.transition * np.outer(alpha[t], dens[t + 1] * beta[t + 1]) / scale[t + 1]
        xi_sum += xi
    ll = float(np.sum(np.log(scale)))
    return gamma, xi_sum, ll


def _initial_guess(sequences, n_states) -> HmmModel:
    pooled = np.concatenate(sequences)
    qs = np.quantile(pooled, np.linspace(0.15, 0.85, n_states))
    spread = max(float(pooled.var()), VAR_FLOOR)
    A = np.full((n_states, n_states), 0.1 / (n_states - 1))
    np.fill_diagonal(A, 0.9)
    return HmmModel(
        transition=A,
        means=qs,
        variances=np.full(n_states, spread),
        initial=np.full(n_states, 1.0 / n_states),
    )


def _relabel_by_mean(model: HmmModel) -> HmmModel:
    order = np.argsort(model.means, kind="stable")
    return HmmModel(
        transition=model.transition[np.ix_(order, order)],
        means=model.means[order],
        variances=model.variances[order],
        initial=model.initial[order],
    )


def baum_welch(
    train_speeds,
    n_states: int = 3,
    max_iter: int = 100,
    tol: float = 1e-6,
    initial_model: HmmModel | None = None,
) -> TrainResult:
    """Fit an HMM to speed sequences by EM.

    Iterates until the total log-likelihood improves by less than tol or
    max_iter is hit.  States are relabeled by ascending emission mean so
    index 0 is always the slow/safe one.
    """
    sequences = [_check_speeds(s) for s in train_speeds]
    if not sequences or all(s.size < 2 for s in sequences):
        raise HmmError("need at least one sequence of length >= 2")
    model = initial_model or _initial_guess(sequences, n_states)
    history = []
    converged = False
    for _ in range(max_iter):
        gamma_first = np.zeros(model.n_states)
        gamma_total = np.zeros(model.n_states)
        gamma_last_excl = np.zeros(model.n_states)
        xi_total = np.zeros((model.n_states, model.n_states))
        mean_num = np.zeros(model.n_states)
        var_num = np.zeros(model.n_states)
        ll = 0.0
        gammas = []
        for s in sequences:
            gamma, xi_sum, seq_ll = _forward_backward(model, s)
            ll += seq_ll
            gammas.append(gamma)
            gamma_first += gamma[0]
            gamma_total += gamma.sum(axis=0)
            gamma_last_excl += gamma[:-1].sum(axis=0)
            xi_total += xi_sum
            mean_num += gamma.T @ s
        history.append(ll)
        if len(history) > 1 and abs(history[-1] - history[-2]) < tol:
            converged = True
            break
        means = mean_num / gamma_total
        for s, gamma in zip(sequences, gammas):
            var_num += (gamma * (s[:, None] - means) ** 2).sum(axis=0)
        variances = np.maximum(var_num / gamma_total, VAR_FLOOR)
        transition = xi_total / np.maximum(gamma_last_excl[:, None], 1e-300)
        transition /= transition.sum(axis=1, keepdims=True)
        initial = gamma_first / gamma_first.sum()
        model = HmmModel(
            transition=transition, means=means, variances=variances, initial=initial
        )
    return TrainResult(
        model=_relabel_by_mean(model),
        log_likelihoods=tuple(history),
        converged=converged,
    )


def save_model(model: HmmModel, path) -> None:
    """Versioned plain-text format: transitions, (mean, var) rows, initial."""
    lines = [_FORMAT_TAG]
    for row in model.transition:
        lines.append(" ".join(repr(float(v)) for v in row))
    for mu, var in zip(model.means, model.variances):
        lines.append(f"{float(mu)!r} {float(var)!r}")
    lines.append(" ".join(repr(float(v)) for v in model.initial))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path) -> HmmModel:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != _FORMAT_TAG:
        raise HmmError(f"{path}: not a '{_FORMAT_TAG}' model file")
    n = 3
    if len(lines) != 1 + n + n + 1:
        raise HmmError(f"{path}: expected {1 + 2 * n + 1} lines, got {len(lines)}")
    A = np.array([[float(v) for v in lines[1 + i].split()] for i in range(n)])
    mv = np.array([[float(v) for v in lines[1 + n + i].split()] for i in range(n)])
    pi = np.array([float(v) for v in lines[1 + 2 * n].split()])
    return HmmModel(transition=A, means=mv[:, 0], variances=mv[:, 1], initial=pi)
