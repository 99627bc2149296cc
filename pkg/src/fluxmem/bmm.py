"""Two-component Beta mixture gate for deciding where an evicted page belongs.

Matching scores are min-max normalized into (0, 1), a low/high compatibility
Beta mixture is fitted by EM with moment-matching M-steps, and candidates
whose posterior under the high component clears a threshold are retained.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.special import digamma, gammaln, logsumexp
from sklearn.base import BaseEstimator, DensityMixin
from sklearn.utils.validation import check_array, check_is_fitted

SHAPE_MIN, SHAPE_MAX = 0.01, 1e4
KAPPA_MIN, KAPPA_MAX = 0.02, 2e4
VAR_FLOOR = 1e-6
PI_MIN = 1e-6
_MAX_HALVINGS = 30
# gates equal to the threshold in exact arithmetic (symmetric score sets) land
# within a few ulps either side; treat those as ties and retain
GATE_TOL = 1e-9


def normalize_scores(scores: Sequence[float], eps: float = 1e-3) -> np.ndarray:
    s = np.asarray(scores, dtype=float)
    if s.size == 0:
        raise ValueError("cannot normalize an empty score list")
    if not 0 < eps < 0.1:
        raise ValueError("eps must be in (0, 0.1)")
    lo, hi = s.min(), s.max()
    if hi <= lo:
        return np.full(s.shape, 0.5)
    return eps + (1 - 2 * eps) * (s - lo) / (hi - lo)


def _check_unit(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(x)) or np.any(x <= 0) or np.any(x >= 1):
        raise ValueError("Beta support is the open interval (0, 1)")
    return x


def log_beta_pdf(x, alpha, beta):
    """Log density of Beta(alpha, beta) at ``x``; scalars or arrays."""
    x = _check_unit(x)
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if np.any(alpha <= 0) or np.any(beta <= 0):
        raise ValueError("shape parameters must be positive")
    out = ((alpha - 1) * np.log(x) + (beta - 1) * np.log1p(-x)
           + gammaln(alpha + beta) - gammaln(alpha) - gammaln(beta))
    return float(out) if out.ndim == 0 else out


def moment_match(mu: float, var: float) -> tuple[float, float, bool]:
    """Beta shapes with the given mean and variance; third item flags clamping."""
    clamped = False
    if var < VAR_FLOOR:
        var, clamped = VAR_FLOOR, True
    kappa = mu * (1 - mu) / var - 1
    if not KAPPA_MIN <= kappa <= KAPPA_MAX:
        kappa, clamped = float(np.clip(kappa, KAPPA_MIN, KAPPA_MAX)), True
    a, b = mu * kappa, (1 - mu) * kappa
    if not (SHAPE_MIN <= a <= SHAPE_MAX and SHAPE_MIN <= b <= SHAPE_MAX):
        a = float(np.clip(a, SHAPE_MIN, SHAPE_MAX))
        b = float(np.clip(b, SHAPE_MIN, SHAPE_MAX))
        clamped = True
    return a, b, clamped


class BetaMixture(DensityMixin, BaseEstimator):
    """Two-component Beta mixture on (0, 1), fitted by EM.

    Component 0 is the low-compatibility regime and component 1 the high one;
    after fitting, components are relabeled so that ``mean(1) >= mean(0)``.

    Parameters
    ----------
    n_iter : int
        Maximum EM iterations.
    tol : float
        Early stop once the largest parameter change in an iteration is below this.
    init_var : float
        Variance used with the 30th/70th percentile means for initialization.
    """

    def __init__(self, n_iter: int = 50, tol: float = 1e-7, init_var: float = 0.01):
        self.n_iter = n_iter
        self.tol = tol
        self.init_var = init_var

    @classmethod
    def from_params(cls, pi: float, alpha0: float, beta0: float, alpha1: float, beta1: float,
                    **kwargs) -> BetaMixture:
        m = cls(**kwargs)
        m._set(pi, np.array([alpha0, alpha1], float), np.array([beta0, beta1], float))
        m.loglik_history_ = []
        m.clamped_ = []
        m.n_iter_ = 0
        m.degenerate_ = False
        return m

    def _set(self, pi: float, alphas: np.ndarray, betas: np.ndarray) -> None:
        self.weights_ = np.array([1 - pi, pi])
        self.alphas_ = alphas.copy()
        self.betas_ = betas.copy()

    @property
    def pi(self) -> float:
        return float(self.weights_[1])

    @property
    def alpha0(self) -> float:
        return float(self.alphas_[0])

    @property
    def beta0(self) -> float:
        return float(self.betas_[0])

    @property
    def alpha1(self) -> float:
        return float(self.alphas_[1])

    @property
    def beta1(self) -> float:
        return float(self.betas_[1])

    @property
    def means_(self) -> np.ndarray:
        return self.alphas_ / (self.alphas_ + self.betas_)

    def _joint_log(self, x: np.ndarray) -> np.ndarray:
        # (2, n): log pi_k + log Beta(x; alpha_k, beta_k)
        lx, l1x = np.log(x), np.log1p(-x)
        a, b = self.alphas_[:, None], self.betas_[:, None]
        norm = np.array([_log_beta_norm(self.alphas_[k], self.betas_[k]) for k in (0, 1)])
        return (np.log(self.weights_) + norm)[:, None] + (a - 1) * lx + (b - 1) * l1x

    def fit(self, X, y=None) -> BetaMixture:
        x = _check_unit(check_array(X, ensure_2d=False, dtype=float).ravel())
        if x.size < 2:
            raise ValueError("need at least 2 observations to fit a mixture")
        self.loglik_history_: list[float] = []
        self.clamped_: list[bool] = []
        self.n_iter_ = 0

        if np.ptp(x) == 0:
            a, b, _ = moment_match(float(x[0]), 0.0)
            self._set(0.5, np.array([a, a]), np.array([b, b]))
            self.degenerate_ = True
            self.loglik_history_.append(self._loglik(x))
            return self
        self.degenerate_ = False

        q30, q70 = np.quantile(x, [0.3, 0.7])
        if q70 - q30 < 1e-9:
            # identical starts never separate under EM; fall back to the means of
            # the lower and upper partitions, which differ whenever x is not constant
            q30, q70 = x[x <= q30].mean(), x[x >= q70].mean()
        a0, b0, _ = moment_match(float(q30), self.init_var)
        a1, b1, _ = moment_match(float(q70), self.init_var)
        self._set(0.5, np.array([a0, a1]), np.array([b0, b1]))
        lx, l1x = np.log(x), np.log1p(-x)
        # rows: 1, x, x^2, log x, log(1-x); one product gives all weighted sums
        feats = np.stack([np.ones_like(x), x, x * x, lx, l1x])
        basis = feats[[0, 3, 4]]

        def joint(pi, al, be):
            coef = np.array([
                [math.log(1 - pi) + _log_beta_norm(al[0], be[0]), al[0] - 1, be[0] - 1],
                [math.log(pi) + _log_beta_norm(al[1], be[1]), al[1] - 1, be[1] - 1],
            ])
            return coef @ basis

        pi, al, be = 0.5, [a0, a1], [b0, b1]
        lj = joint(pi, al, be)
        lse = _lse2(lj)
        self.loglik_history_.append(float(lse.sum()))

        n = x.size
        for _ in range(self.n_iter):
            old = (pi, al[0], al[1], be[0], be[1])
            resp = np.exp(lj - lse)
            sums = (resp @ feats.T).tolist()

            clamped = False
            pi = sums[1][0] / n
            if not PI_MIN <= pi <= 1 - PI_MIN:
                pi, clamped = min(max(pi, PI_MIN), 1 - PI_MIN), True
            al, be = list(al), list(be)
            for k in (0, 1):
                nk, sx, sxx, slx, sl1x = sums[k]
                if nk < 1e-12:
                    clamped = True
                    continue
                mu = sx / nk
                var = max(sxx / nk - mu * mu, 0.0)
                a, b, c = moment_match(mu, var)
                clamped |= c
                al[k], be[k] = _safeguarded_step((slx, sl1x, nk), (al[k], be[k]), (a, b))

            self.n_iter_ += 1
            self.clamped_.append(clamped)
            lj = joint(pi, al, be)
            lse = _lse2(lj)
            self.loglik_history_.append(float(lse.sum()))
            new = (pi, al[0], al[1], be[0], be[1])
            if max(abs(u - v) for u, v in zip(new, old)) < self.tol:
                break

        self._set(pi, np.array(al, float), np.array(be, float))
        if self.means_[0] > self.means_[1]:
            self._set(1 - self.pi, self.alphas_[::-1], self.betas_[::-1])
        return self

    def _loglik(self, x: np.ndarray) -> float:
        return float(logsumexp(self._joint_log(x), axis=0).sum())

    def score_samples(self, X) -> np.ndarray:
        check_is_fitted(self, "weights_")
        x = _check_unit(np.asarray(X, dtype=float).ravel())
        return logsumexp(self._joint_log(x), axis=0)

    def predict_proba(self, X) -> np.ndarray:
        """Posterior responsibilities, shape (n, 2): columns low, high."""
        check_is_fitted(self, "weights_")
        x = _check_unit(np.asarray(X, dtype=float).ravel())
        lj = self._joint_log(x)
        return np.exp(lj - logsumexp(lj, axis=0)).T

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    def gate(self, x):
        """Posterior of the high-compatibility component."""
        g = self.predict_proba(x)[:, 1]
        return float(g[0]) if np.ndim(x) == 0 else g

    def to_dict(self) -> dict:
        return {"pi": self.pi, "alpha0": self.alpha0, "beta0": self.beta0,
                "alpha1": self.alpha1, "beta1": self.beta1}


def _lse2(lj: np.ndarray) -> np.ndarray:
    # log(exp(row0) + exp(row1)), columnwise
    return np.logaddexp(lj[0], lj[1])


def _log_beta_norm(a: float, b: float) -> float:
    return math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)


def _safeguarded_step(stats, old, cand):
    # Moment matching is not an M-step for the Beta likelihood; accept the
    # candidate only if it does not lower this component's expected
    # complete-data log-likelihood Q, halving the step otherwise.
    # stats = (sum r*log x, sum r*log(1-x), sum r) make each trial O(1).
    # Trials move on the segment old -> cand in (alpha, beta), where Q is
    # concave, so a non-positive slope at old rules out every trial at once.
    s1, s2, nk = stats

    def q(a, b):
        return (a - 1) * s1 + (b - 1) * s2 + nk * _log_beta_norm(a, b)

    q_old = q(*old)
    if q(*cand) >= q_old:
        return float(cand[0]), float(cand[1])
    da, db = cand[0] - old[0], cand[1] - old[1]
    dab = float(digamma(old[0] + old[1]))
    slope = (da * (s1 + nk * (dab - float(digamma(old[0]))))
             + db * (s2 + nk * (dab - float(digamma(old[1])))))
    if slope <= 0:
        return float(old[0]), float(old[1])
    step = 0.5
    for _ in range(_MAX_HALVINGS - 1):
        trial = (old[0] + step * da, old[1] + step * db)
        if q(*trial) >= q_old:
            return trial
        step *= 0.5
    return float(old[0]), float(old[1])


@dataclass(frozen=True)
class GateDecision:
    """Outcome of gating one incoming item against candidate sessions.

    ``target`` is the best retained candidate index even when the raw-score
    floor turns the outcome into a new session; ``merge`` is the final call.
    """

    gates: tuple[float, ...]
    retained: tuple[int, ...]
    target: int | None
    merge: bool
    normalized: tuple[float, ...] = ()
    fitted: bool = False
    session_id: str | None = None

    @property
    def outcome(self) -> str:
        return "merge" if self.merge else "new_session"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gates"] = list(self.gates)
        d["retained"] = list(self.retained)
        d["normalized"] = list(self.normalized)
        return d


def _top(x: np.ndarray, m: int) -> list[int]:
    order = sorted(range(len(x)), key=lambda i: (-x[i], i))
    return sorted(order[:m])


def decide_fusion(
    scores: Sequence[float],
    threshold: float = 0.5,
    min_keep: int = 1,
    n_iter: int = 50,
    eps: float = 1e-3,
    floor: float = 0.15,
    tol: float = 1e-7,
) -> GateDecision:
    """Gate candidate match scores and choose merge target or a new session."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must be in (0, 1)")
    if min_keep < 1:
        raise ValueError("min_keep must be >= 1")
    s = np.asarray(scores, dtype=float)
    if s.size == 0:
        return GateDecision(gates=(), retained=(), target=None, merge=False)

    x = normalize_scores(s, eps)
    if s.size < 2 or np.ptp(s) == 0:
        gates = np.full(s.size, 0.5)
        retained = _top(x, min_keep)
        fitted = False
    else:
        mix = BetaMixture(n_iter=n_iter, tol=tol).fit(x)
        gates = mix.predict_proba(x)[:, 1]
        retained = [i for i in range(s.size) if gates[i] >= threshold - GATE_TOL]
        if len(retained) < min_keep:
            retained = _top(x, min_keep)
        fitted = True

    target = min(retained, key=lambda i: (-x[i], i)) if retained else None
    merge = bool(target is not None and s[target] >= floor)
    return GateDecision(
        gates=tuple(float(g) for g in gates),
        retained=tuple(retained),
        target=target,
        merge=merge,
        normalized=tuple(float(v) for v in x),
        fitted=fitted,
    )


def decide_threshold(scores: Sequence[float], threshold: float = 0.5) -> GateDecision:
    """Fixed raw-cosine gate used when the mixture is ablated."""
    s = np.asarray(scores, dtype=float)
    retained = [i for i in range(s.size) if s[i] >= threshold]
    target = min(retained, key=lambda i: (-s[i], i)) if retained else None
    return GateDecision(
        gates=tuple(float(v >= threshold) for v in s),
        retained=tuple(retained),
        target=target,
        merge=target is not None,
    )
