"""
Numerical checks of the closed-form results behind the model.

    bounds      variance bound of a clamped spike product, Monte Carlo over laws of M
    variance    output variance of SSA and QKTA against sampled binary Q, K, V
    moments     mean and variance ratios of the spatial-attention output
    epsilon     membrane sensitivity dH(t+1)/dH(t), closed form against autodiff
    jacobian    temporal Jacobian of a layer held inside the surrogate window
    mi          mutual information between time steps of a feature tensor
    energy      synaptic-operation energy ledger of a model

Every Monte Carlo routine takes a seed (or a ``SeedSequence``) and owns its
generator, so results do not depend on the order or process they run in.
"""
import logging
from dataclasses import dataclass, field, replace
from multiprocessing import Pool
from typing import Optional

import numpy as np
from scipy import stats

from .errors import ConfigurationError, DimensionError
from .neuron import LifConfig, charge, fire, reset, surrogate_window_grad
from .tensor import Node, SpikeTensor, add, reduce_sum, scale

logger = logging.getLogger(__name__)

BOUND_LAWS = ("two-point", "uniform", "deterministic")
A_GRID = (1.0, 1.5, 2.0)
B_GRID = (0.0, 0.2)
F_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))

VARIANCE_KINDS = ("ssa", "qkta")
VARIANCE_SAMPLERS = ("independent", "matrix")

# 45 nm energy per operation, pJ
E_MAC = 4.6
E_AC = 0.9

MI_MIN_SAMPLES = 100


def _check_clamp(a, b):
    if not 0.0 <= b < a:
        raise ConfigurationError("need 0 <= b < a, got a={} b={}".format(a, b), field="b")


def _check_rate(name, value):
    if not 0.0 <= value <= 1.0:
        raise ConfigurationError("firing rate must lie in [0, 1], got {}".format(value), field=name)


def _generator(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


# clamp variance bound

def bound_breakpoint(a, b):
    return (a + b) / (2.0 * a)


def prop41_bound(a, b, f):
    """Published upper bound on Var(X M) for X ~ Bernoulli(f) and M in [b, a]."""
    _check_clamp(a, b)
    _check_rate("f", f)
    if f <= bound_breakpoint(a, b):
        return a * a * (f * f - f + 0.5) + a * b * (1.0 - 2.0 * f) + b * b / 2.0
    return (a * a + 2.0 * a * b + b * b - 4.0 * f * a * b) / 4.0


def tight_bound(a, b, f):
    """Exact maximum of Var(X M); meets ``prop41_bound`` from the breakpoint upwards."""
    _check_clamp(a, b)
    _check_rate("f", f)
    if f <= bound_breakpoint(a, b):
        return a * a * f * (1.0 - f)
    return (a * a + 2.0 * a * b + b * b - 4.0 * f * a * b) / 4.0


def two_point_probability(a, b, f):
    """P(M = a) of the two-point law reaching the high-rate bound, or None outside [0, 1]."""
    if f == 0.0:
        return None
    p = (a + b - 2.0 * b * f) / (2.0 * f * (a - b))
    return p if 0.0 <= p <= 1.0 else None


@dataclass
class BoundReport:
    a: float
    b: float
    f: float
    law: str
    samples: int
    bound: float
    tight: float
    applicable: bool = True
    empirical: float = float("nan")
    sigma: float = float("nan")
    sigmas: float = 3.0

    @property
    def margin(self):
        return self.bound - self.empirical

    @property
    def violation(self):
        return bool(self.applicable and self.empirical > self.bound + self.sigmas * self.sigma)

    @property
    def attained(self):
        """Relative distance to the tight bound; equality constructions drive it to 0."""
        if not self.applicable or self.tight == 0.0:
            return float("nan")
        return abs(self.empirical - self.tight) / self.tight


def verify_bound_mc(a, b, f, law="two-point", samples=100000, seed=0, sigmas=3.0):
    """Sample Y = X M and compare Var(Y) with both bounds.

    ``two-point`` puts M on {a, b} with the probability that attains the
    high-rate branch, ``deterministic`` fixes M = a (equality in the low-rate
    branch) and ``uniform`` spreads M over [b, a].
    """
    if samples < 10000:
        raise ConfigurationError("need at least 1e4 samples, got {}".format(samples), field="samples")
    if law not in BOUND_LAWS:
        raise ConfigurationError("unknown law '{}', expected one of {}".format(law, BOUND_LAWS), field="law")
    report = BoundReport(a, b, f, law, samples, prop41_bound(a, b, f), tight_bound(a, b, f), sigmas=sigmas)
    rng = _generator(seed)

    if law == "two-point":
        p = two_point_probability(a, b, f)
        if p is None:
            report.applicable = False
            return report
        m = np.where(rng.random(samples) < p, a, b)
    elif law == "uniform":
        m = rng.uniform(b, a, size=samples)
    else:
        m = np.full(samples, a)
    y = (rng.random(samples) < f) * m

    centred = y - y.mean()
    variance = float(np.mean(centred ** 2))
    fourth = float(np.mean(centred ** 4))
    report.empirical = variance
    report.sigma = float(np.sqrt(max(fourth - variance ** 2, 0.0) / samples))
    return report


def family_sigmas(points, sigmas=3.0):
    """Tolerance multiple that keeps a whole grid at the false-alarm rate of one point."""
    alpha = stats.norm.sf(sigmas)
    return max(sigmas, float(stats.norm.isf(alpha / max(points, 1))))


def _grid_point(task):
    a, b, f, law, samples, seed, sigmas = task
    return verify_bound_mc(a, b, f, law, samples, np.random.default_rng(seed), sigmas)


def bounds_grid(a_values=A_GRID, b_values=B_GRID, f_values=F_GRID, laws=BOUND_LAWS,
                samples=100000, seed=0, workers=1):
    """``verify_bound_mc`` at every grid point, each with its own child seed."""
    points = [(a, b, f, law) for a in a_values for b in b_values for f in f_values for law in laws]
    sigmas = family_sigmas(len(points))
    children = np.random.SeedSequence(seed).spawn(len(points))
    tasks = [point + (samples, child, sigmas) for point, child in zip(points, children)]
    logger.info("[Analyze] bound grid: %s points, %s samples each, tolerance %.2f sigma",
                len(tasks), samples, sigmas)
    if workers > 1:
        with Pool(workers) as pool:
            return pool.map(_grid_point, tasks)
    return [_grid_point(task) for task in tasks]


# attention output variance

def attention_variance(kind, f_q, f_k=0.0, f_v=0.0, n=1, d=1, exact=False):
    """Closed-form variance of one pre-spike attention output.

    The SSA form treats its N d triple products as independent; with
    ``exact`` the covariances through shared query and value entries are
    added back.
    """
    for name, rate in (("f_q", f_q), ("f_k", f_k), ("f_v", f_v)):
        _check_rate(name, rate)
    if kind == "qkta":
        return d * f_q * (1.0 - f_q)
    if kind != "ssa":
        raise ConfigurationError("expected one of {}".format(VARIANCE_KINDS), field="kind")
    p = f_q * f_k * f_v
    variance = n * d * p * (1.0 - p)
    if exact:
        variance += d * n * (n - 1) * f_q * (1.0 - f_q) * f_k ** 2 * f_v ** 2
        variance += n * d * (d - 1) * f_v * (1.0 - f_v) * f_q ** 2 * f_k ** 2
    return variance


@dataclass
class VarianceReport:
    kind: str
    sampler: str
    rates: tuple
    n: int
    d: int
    samples: int
    analytic: float
    empirical: float

    @property
    def relative_error(self):
        if self.analytic == 0.0:
            return abs(self.empirical)
        return abs(self.empirical - self.analytic) / self.analytic


def _attention_draws(rng, kind, sampler, f_q, f_k, f_v, n, d, count):
    if kind == "qkta":
        return (rng.random((count, d)) < f_q).sum(axis=1)
    if sampler == "independent":
        terms = ((rng.random((count, n * d)) < f_q)
                 & (rng.random((count, n * d)) < f_k)
                 & (rng.random((count, n * d)) < f_v))
        return terms.sum(axis=1)
    q = rng.random((count, d)) < f_q
    k = rng.random((count, n, d)) < f_k
    v = rng.random((count, n)) < f_v
    return ((q[:, None, :] & k).sum(axis=2) * v).sum(axis=1)


def attention_variance_mc(kind, f_q, f_k=0.0, f_v=0.0, n=1, d=1, samples=100000,
                          sampler="independent", seed=0):
    if sampler not in VARIANCE_SAMPLERS:
        raise ConfigurationError("expected one of {}".format(VARIANCE_SAMPLERS), field="sampler")
    analytic = attention_variance(kind, f_q, f_k, f_v, n, d, exact=sampler == "matrix")
    rng = _generator(seed)
    chunk = max(1, 2 ** 20 // (n * d))
    draws = []
    for start in range(0, samples, chunk):
        count = min(chunk, samples - start)
        draws.append(_attention_draws(rng, kind, sampler, f_q, f_k, f_v, n, d, count))
    values = np.concatenate(draws).astype(np.float64)
    return VarianceReport(kind, sampler, (f_q, f_k, f_v), n, d, samples, analytic, float(values.var()))


# spatial-attention moments

def pm_ratios(f):
    """Asymptotic E(Y)/E(X) and Var(Y)/Var(X) for a centred, normalised channel sum."""
    _check_rate("f", f)
    return np.sqrt(f * (1.0 - f) / (2.0 * np.pi)), f * (np.pi - f) / (2.0 * np.pi)


def clamped_normal_moments(mu, sigma, b, a):
    """Mean and variance of clamp(N(mu, sigma^2), b, a)."""
    if not b < a:
        raise ConfigurationError("need b < a, got b={} a={}".format(b, a), field="clamp")
    if sigma == 0.0:
        return float(np.clip(mu, b, a)), 0.0
    lo, hi = (b - mu) / sigma, (a - mu) / sigma
    cdf_lo, cdf_hi = stats.norm.cdf(lo), stats.norm.cdf(hi)
    pdf_lo, pdf_hi = stats.norm.pdf(lo), stats.norm.pdf(hi)
    inside = cdf_hi - cdf_lo
    mean = b * cdf_lo + a * (1.0 - cdf_hi) + mu * inside + sigma * (pdf_lo - pdf_hi)
    second = (b * b * cdf_lo + a * a * (1.0 - cdf_hi)
              + mu * mu * inside
              + 2.0 * mu * sigma * (pdf_lo - pdf_hi)
              + sigma * sigma * (inside + lo * pdf_lo - hi * pdf_hi))
    return float(mean), float(max(second - mean * mean, 0.0))


@dataclass
class PmMoments:
    f: float
    a: float
    b: float
    channels: int
    samples: int
    expected_mean_ratio: float
    expected_var_ratio: float
    reference_mean_ratio: float
    reference_var_ratio: float
    mean_ratio: float = 0.0
    var_ratio: float = 0.0
    corr_mean: float = 0.0
    corr_rms: float = 0.0
    corr_max: float = 0.0
    in_regime: bool = True

    @property
    def ratios(self):
        return self.mean_ratio, self.var_ratio


def pm_moments(f, a=1.5, b=0.0, channels=1024, samples=100000, seed=0):
    """Measure the moment ratios of Y_c = X_c clamp(sum_c w'_c X_c, b, a).

    Weights are drawn from N(0, 1), centred and scaled to unit norm, so the
    channel sum is close to N(0, f (1 - f)) for large ``channels``.
    """
    _check_clamp(a, b)
    _check_rate("f", f)
    in_regime = a >= 1.0 and b <= 0.05 * a and f <= 0.2 and channels >= 256
    if not in_regime:
        logger.warning("[Analyze] pm_moments outside the small-rate regime (f=%s a=%s b=%s C=%s)",
                       f, a, b, channels)
    e_ratio, v_ratio = pm_ratios(f)
    m_mean, m_var = clamped_normal_moments(0.0, np.sqrt(f * (1.0 - f)), b, a)
    ref_var = (m_var + m_mean ** 2 - f * m_mean ** 2) / (1.0 - f) if f < 1.0 else 0.0
    report = PmMoments(f, a, b, channels, samples, float(e_ratio), float(v_ratio), m_mean, float(ref_var),
                       in_regime=in_regime)
    if f == 0.0 or f == 1.0:
        return report

    rng = _generator(seed)
    w = rng.standard_normal(channels)
    w -= w.mean()
    w /= np.sqrt(np.sum(w * w))

    sx = sy = syy = 0.0
    sm = smm = 0.0
    sx_c = np.zeros(channels)
    sxm_c = np.zeros(channels)
    chunk = max(1, 2 ** 21 // channels)
    for start in range(0, samples, chunk):
        count = min(chunk, samples - start)
        x = (rng.random((count, channels)) < f).astype(np.float64)
        m = np.clip(x @ w, b, a)
        y = x * m[:, None]
        sx += x.sum()
        sy += y.sum()
        syy += np.sum(y * y)
        sm += m.sum()
        smm += np.sum(m * m)
        sx_c += x.sum(axis=0)
        sxm_c += m @ x

    elements = samples * channels
    mean_x = sx / elements
    var_x = mean_x - mean_x ** 2
    mean_y = sy / elements
    report.mean_ratio = float(mean_y / mean_x)
    report.var_ratio = float((syy / elements - mean_y ** 2) / var_x)

    p_c = sx_c / samples
    mean_m = sm / samples
    sd_m = np.sqrt(max(smm / samples - mean_m ** 2, 0.0))
    sd_x = np.sqrt(p_c * (1.0 - p_c))
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = (sxm_c / samples - p_c * mean_m) / (sd_x * sd_m)
    corr = corr[np.isfinite(corr)]
    if corr.size:
        report.corr_mean = float(corr.mean())
        report.corr_rms = float(np.sqrt(np.mean(corr ** 2)))
        report.corr_max = float(np.max(np.abs(corr)))
    return report


# membrane sensitivity

def _scalar_or_array(values):
    return float(values) if np.ndim(values) == 0 else values


def epsilon_baseline(h, cfg):
    """dH(t+1)/dH(t) of the subtractive-reset neuron: 0 inside the surrogate window, else 1 - 1/tau."""
    h = np.asarray(h, dtype=np.float64)
    if cfg.detach_reset:
        return _scalar_or_array(np.full(h.shape, cfg.decay))
    return _scalar_or_array(cfg.decay * (1.0 - cfg.v_th * surrogate_window_grad(h, cfg)))


def epsilon_feedback(h, cfg, dphi_dS):
    """Baseline sensitivity plus the feedback edge phi(S(t)) entering H(t+1)."""
    h = np.asarray(h, dtype=np.float64)
    base = np.asarray(epsilon_baseline(h, cfg))
    return _scalar_or_array(base + dphi_dS * surrogate_window_grad(h, cfg))


def epsilon_hard_reset(h, cfg):
    """Sensitivity of the model neuron, (1 - 1/tau) [(1 - S) + (V_reset - H) sigma'(H)]."""
    h = np.asarray(h, dtype=np.float64)
    s = (h >= cfg.v_th).astype(np.float64)
    through_spike = 0.0 if cfg.detach_reset else (cfg.v_reset - h) * surrogate_window_grad(h, cfg)
    return _scalar_or_array(cfg.decay * ((1.0 - s) + through_spike))


def measure_epsilon(h, cfg, dphi_dS=None):
    """dH(t+1)/dH(t) by reverse-mode autodiff, one independent unit per entry of ``h``.

    The reset form follows ``cfg.reset``; ``dphi_dS`` adds the edge
    H(t+1) += dphi_dS * S(t).
    """
    h = np.atleast_1d(np.asarray(h, dtype=np.float64))
    h_t = Node(h, requires_grad=True)
    s = fire(h_t, cfg)
    v = reset(h_t, s, cfg)
    h_next = charge(v, Node(np.zeros(h.shape)), cfg)
    if dphi_dS is not None:
        h_next = add(h_next, scale(s, dphi_dS))
    h_next.backward(np.ones(h.shape))
    return h_t.grad.copy()


@dataclass
class EpsilonReport:
    h: np.ndarray
    dphi_dS: float
    baseline: np.ndarray
    baseline_measured: np.ndarray
    feedback: np.ndarray
    feedback_measured: np.ndarray
    hard: np.ndarray
    hard_measured: np.ndarray

    @property
    def max_error(self):
        return float(max(np.max(np.abs(self.baseline - self.baseline_measured)),
                         np.max(np.abs(self.feedback - self.feedback_measured)),
                         np.max(np.abs(self.hard - self.hard_measured))))


def epsilon_check(cfg=None, samples=10000, dphi_dS=1.0, seed=0):
    """Closed forms against autodiff on ``samples`` random membrane states."""
    cfg = cfg or LifConfig()
    rng = _generator(seed)
    h = rng.uniform(-0.5 * cfg.v_th, 2.0 * cfg.v_th, size=samples)
    soft = replace(cfg, reset="soft")
    hard = replace(cfg, reset="hard")
    return EpsilonReport(
        h=h,
        dphi_dS=dphi_dS,
        baseline=np.asarray(epsilon_baseline(h, soft)),
        baseline_measured=measure_epsilon(h, soft),
        feedback=np.asarray(epsilon_feedback(h, soft, dphi_dS)),
        feedback_measured=measure_epsilon(h, soft, dphi_dS),
        hard=np.asarray(epsilon_hard_reset(h, hard)),
        hard_measured=measure_epsilon(h, hard),
    )


@dataclass
class JacobianReport:
    steps: int
    units: int
    feedback_weight: float
    baseline: np.ndarray
    feedback: np.ndarray

    @property
    def baseline_max(self):
        return float(np.max(np.abs(self.baseline)))

    @property
    def feedback_max(self):
        return float(np.max(np.abs(self.feedback)))


def _window_chain(h1, targets, cfg, weight):
    """Gradient of sum(S(T)) with respect to H(1), inputs chosen to land on ``targets``."""
    start = Node(h1, requires_grad=True)
    h = start
    for t in range(1, len(targets)):
        s = fire(h, cfg)
        v = reset(h, s, cfg)
        drive = cfg.decay * v.values + weight * s.values
        h_next = add(scale(v, cfg.decay), Node(targets[t] - drive))
        if weight:
            h_next = add(h_next, scale(s, weight))
        h = h_next
    reduce_sum(fire(h, cfg), axis=0).backward()
    return start.grad.copy()


def feedback_jacobian(cfg=None, steps=4, units=8, feedback_weight=1.0, seed=0):
    """dO_T/dH_1 for a subtractive-reset layer whose every state sits in the surrogate window.

    Without feedback each step's sensitivity is exactly zero there, so the
    temporal Jacobian vanishes; the edge phi(S) = w S keeps it alive.
    """
    cfg = replace(cfg or LifConfig(v_th=1.0), reset="soft", detach_reset=False)
    if steps < 2:
        raise ConfigurationError("need at least two steps", field="steps")
    rng = _generator(seed)
    high = cfg.surrogate_window[1]
    targets = rng.uniform(1.05 * cfg.v_th, high - 0.15 * cfg.v_th, size=(steps, units))
    return JacobianReport(steps, units, feedback_weight,
                         _window_chain(targets[0], targets, cfg, 0.0),
                         _window_chain(targets[0], targets, cfg, feedback_weight))


# mutual information across time steps

# per-unit binary MI, or MI of the per-sample spike count binned into ``bins``
MI_ESTIMATORS = ("plug-in", "histogram")


@dataclass
class MiMatrix:
    values: np.ndarray
    samples: int
    units: int
    constant_units: int = 0
    estimator: str = "plug-in"
    bins: int = 2

    @property
    def steps(self):
        return self.values.shape[0]

    @property
    def mean_off_diagonal(self):
        t = self.steps
        if t < 2:
            return 0.0
        return float((self.values.sum() - np.trace(self.values)) / (t * (t - 1)))

    def metadata(self):
        return {"estimator": self.estimator, "bins": self.bins, "samples": self.samples,
                "units": self.units, "constant_units": self.constant_units}


def _xlogy_ratio(joint, left, right):
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = joint * np.log2(joint / (left * right))
    return np.where(joint > 0, terms, 0.0)


def _pairwise_mi(x, y):
    """Plug-in MI in bits of binary columns, one value per column."""
    n = x.shape[0]
    p11 = np.count_nonzero(x & y, axis=0) / n
    p10 = np.count_nonzero(x & ~y, axis=0) / n
    p01 = np.count_nonzero(~x & y, axis=0) / n
    p00 = np.count_nonzero(~x & ~y, axis=0) / n
    p1_ = np.count_nonzero(x, axis=0) / n
    p_1 = np.count_nonzero(y, axis=0) / n
    return (_xlogy_ratio(p11, p1_, p_1) + _xlogy_ratio(p10, p1_, 1.0 - p_1)
            + _xlogy_ratio(p01, 1.0 - p1_, p_1) + _xlogy_ratio(p00, 1.0 - p1_, 1.0 - p_1))


def _binned_mi(x, y, bins):
    """Plug-in MI in bits of two integer codes in [0, bins)."""
    joint = np.bincount(x * bins + y, minlength=bins * bins).reshape(bins, bins) / x.shape[0]
    left = joint.sum(axis=1, keepdims=True)
    right = joint.sum(axis=0, keepdims=True)
    return float(_xlogy_ratio(joint, left, right).sum())


def mi_matrix(features, units_sampled=None, seed=0, estimator="plug-in", bins=2):
    """T x T mutual information in bits between the spike features of every pair of steps.

    ``plug-in`` averages the binary MI of each unit. ``histogram`` bins each
    sample's spike count over the units into ``bins`` equal-width bins shared
    by all steps and takes the plug-in MI of the binned counts.
    """
    if estimator not in MI_ESTIMATORS:
        raise ConfigurationError("expected one of {}, got '{}'".format(MI_ESTIMATORS, estimator),
                                 field="estimator")
    if bins < 2:
        raise ConfigurationError("need at least 2 bins, got {}".format(bins), field="bins")
    if estimator == "plug-in" and bins != 2:
        raise ConfigurationError("binary units have exactly 2 bins, got {}".format(bins), field="bins")
    bits = features.bits if isinstance(features, SpikeTensor) else np.asarray(features)
    if bits.ndim < 3:
        raise DimensionError("features need [T, B, ...], got shape {}".format(bits.shape))
    t, batch = bits.shape[:2]
    if batch < MI_MIN_SAMPLES:
        raise ConfigurationError("need at least {} samples, got {}".format(MI_MIN_SAMPLES, batch),
                                 field="samples")
    flat = bits.reshape(t, batch, -1) > 0.5
    total = flat.shape[2]
    if units_sampled is not None and units_sampled < total:
        chosen = np.sort(_generator(seed).choice(total, size=units_sampled, replace=False))
        flat = flat[:, :, chosen]
    units = flat.shape[2]

    values = np.zeros((t, t))
    if estimator == "plug-in":
        rates = flat.mean(axis=1)
        constant = int(np.count_nonzero(np.any((rates == 0.0) | (rates == 1.0), axis=0)))
        if constant:
            logger.warning("[Analyze] %s of %s units are constant at some step, their MI is 0", constant, units)
        for i in range(t):
            for j in range(i, t):
                values[i, j] = values[j, i] = float(_pairwise_mi(flat[i], flat[j]).mean())
    else:
        counts = flat.sum(axis=2)
        codes = np.minimum(counts * bins // units, bins - 1)
        constant = int(sum(np.unique(codes[i]).size == 1 for i in range(t)))
        if constant:
            logger.warning("[Analyze] %s of %s steps fall in a single bin, their MI is 0", constant, t)
        for i in range(t):
            for j in range(i, t):
                values[i, j] = values[j, i] = _binned_mi(codes[i], codes[j], bins)
    return MiMatrix(values, batch, units, constant, estimator, bins)


# energy

def synaptic_operations(rate, steps, ops):
    return rate * steps * ops


@dataclass
class EnergyRow:
    name: str
    group: str
    macs: int
    steps: int
    spiking: bool
    rate: Optional[float]
    sops: float
    energy_pj: float

    @property
    def flops(self):
        return 2 * self.macs * self.steps


@dataclass
class EnergyLedger:
    e_mac: float
    e_ac: float
    rows: list = field(default_factory=list)

    def _sum(self, groups):
        return float(sum(row.energy_pj for row in self.rows if row.group in groups))

    @property
    def baseline_pj(self):
        return self._sum(("baseline",))

    @property
    def tdac_pj(self):
        return self._sum(("cm", "pm"))

    @property
    def total_pj(self):
        return self.baseline_pj + self.tdac_pj

    @property
    def total_mj(self):
        return self.total_pj * 1e-9

    @property
    def tdac_share(self):
        return self.tdac_pj / self.total_pj if self.total_pj else 0.0

    @property
    def tdac_sops(self):
        return float(sum(row.sops for row in self.rows if row.group in ("cm", "pm")))


def energy_report(model, firing_rates, e_mac=E_MAC, e_ac=E_AC, feedback=None):
    """Per-sample inference energy: spiking blocks pay E_AC per SOP, analog blocks E_MAC per MAC.

    ``model`` is a TDFormer or an iterable of energy blocks; ``firing_rates``
    maps block names to measured input rates.
    """
    blocks = model.energy_blocks(feedback) if hasattr(model, "energy_blocks") else list(model)
    ledger = EnergyLedger(e_mac, e_ac)
    for block in blocks:
        if block.steps == 0:
            ledger.rows.append(EnergyRow(block.name, block.group, block.macs, 0, block.spiking, None, 0.0, 0.0))
            continue
        if not block.spiking:
            energy = e_mac * block.macs * block.steps
            ledger.rows.append(EnergyRow(block.name, block.group, block.macs, block.steps, False, None,
                                         0.0, float(energy)))
            continue
        if block.name not in firing_rates:
            raise ConfigurationError("no firing rate measured for this block", field=block.name)
        rate = float(firing_rates[block.name])
        sops = synaptic_operations(rate, block.steps, block.macs)
        ledger.rows.append(EnergyRow(block.name, block.group, block.macs, block.steps, True, rate,
                                     float(sops), float(e_ac * sops)))
    logger.debug("[Analyze] energy %.1f pJ, feedback path %.1f pJ", ledger.total_pj, ledger.tdac_pj)
    return ledger


# paired comparisons

@dataclass
class PairedSummary:
    name: str
    treated: list
    control: list

    @property
    def deltas(self):
        return [t - c for t, c in zip(self.treated, self.control)]

    @property
    def mean_delta(self):
        return float(np.mean(self.deltas))

    @property
    def positive(self):
        return sum(1 for d in self.deltas if d > 0)

    @property
    def negative(self):
        return sum(1 for d in self.deltas if d < 0)

    @property
    def p_value(self):
        deltas = np.asarray(self.deltas)
        if len(deltas) < 2 or np.all(deltas == deltas[0]):
            return float("nan")
        return float(stats.ttest_rel(self.treated, self.control).pvalue)
