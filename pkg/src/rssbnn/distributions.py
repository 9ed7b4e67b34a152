"""Spike-and-slab radial posterior: samplers and KL terms.

The per-weight approximate posterior is a two-component mixture: a point
mass at zero with probability 1 - lambda_q and a radial slab with
parameters (mu, sigma), where lambda_q = sigmoid(theta_pi).  The prior is
the same mixture shape with a Gaussian slab and fixed parameters.

The mixture KL decomposes as

    KL(Bern(lambda_q) || Bern(lambda_p)) + lambda_q * KL(slab_q || slab_p)

and the slab KL, which has no closed form for the radial family, is
estimated by Monte Carlo as  -log(sigma) - mean_i log p(w_i)  up to an
additive constant that does not depend on the parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import GraphNode, Tensor, constant
from .errors import DegenerateGroup, DomainError, InvalidConfig, NonFiniteValue

__all__ = [
    "LAMBDA_EPS",
    "RadialParams",
    "BernoulliLogit",
    "SpikeSlabRadialParams",
    "PriorConfig",
    "GumbelConfig",
    "sample_radial",
    "sample_gumbel_softmax",
    "sample_spike_slab",
    "sigmoid_np",
    "kl_bernoulli",
    "kl_gaussian_gaussian",
    "bernoulli_kl_nats",
    "gaussian_kl_nats",
    "radial_prior_logpdf_mc",
    "kl_radial_gaussian_mc",
    "spike_slab_kl_per_weight",
    "kl_spike_slab",
]

LAMBDA_EPS = 1e-6
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


@dataclass
class RadialParams:
    """Location/scale of the radial slab; sigma must be positive."""

    mu: GraphNode
    sigma: GraphNode

    def __post_init__(self):
        self.mu = ad.as_node(self.mu)
        self.sigma = ad.as_node(self.sigma)
        if self.mu.shape != self.sigma.shape:
            raise DomainError(
                f"mu shape {self.mu.shape} != sigma shape {self.sigma.shape}"
            )
        if np.any(self.sigma.value.array <= 0):
            raise DomainError("sigma must be strictly positive")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mu.shape


@dataclass
class BernoulliLogit:
    """Per-weight inclusion probability in logit form."""

    theta_pi: GraphNode

    def __post_init__(self):
        self.theta_pi = ad.as_node(self.theta_pi)

    def lam(self) -> GraphNode:
        """Inclusion probability sigmoid(theta_pi), clamped away from {0,1}."""
        return ad.clip(ad.sigmoid(self.theta_pi), LAMBDA_EPS, 1.0 - LAMBDA_EPS)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.theta_pi.shape


class SpikeSlabRadialParams:
    """Per-weight triple (theta_pi, mu, rho) with sigma = softplus(rho)."""

    def __init__(self, theta_pi, mu, rho):
        self.inclusion = BernoulliLogit(ad.as_node(theta_pi))
        self.mu = ad.as_node(mu)
        self.rho = ad.as_node(rho)
        shapes = {self.inclusion.shape, self.mu.shape, self.rho.shape}
        if len(shapes) != 1:
            raise DomainError(f"parameter tensors must share one shape, got {shapes}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mu.shape

    @property
    def slab(self) -> RadialParams:
        return RadialParams(self.mu, ad.softplus(self.rho))


@dataclass(frozen=True)
class PriorConfig:
    """Fixed spike-and-slab prior: Bern(lambda_p) inclusion, Gaussian slab."""

    lambda_p: float = 0.1
    mu_p: float = 0.0
    sigma_p: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.lambda_p < 1.0:
            raise InvalidConfig(f"lambda_p must be in (0,1), got {self.lambda_p}")
        if self.sigma_p <= 0.0:
            raise InvalidConfig(f"sigma_p must be positive, got {self.sigma_p}")


@dataclass(frozen=True)
class GumbelConfig:
    """Relaxation temperature; keep tau >= 0.5 for training (enforced by
    the trainer config), smaller values are allowed in test harnesses."""

    tau: float = 0.5

    def __post_init__(self):
        if self.tau <= 0.0:
            raise InvalidConfig(f"tau must be positive, got {self.tau}")


# ---------------------------------------------------------------------------
# noise and samplers
# ---------------------------------------------------------------------------


def radial_direction_factors(
    n: int, shape: tuple[int, ...], rng: np.random.Generator, group: str = "per_layer"
) -> np.ndarray:
    """Draw n factors d = (xi / ||xi||) * |r| with the group norm.

    ``per_layer`` normalizes xi over all entries of the tensor and shares
    a single |r| per draw; ``per_row`` groups over the last axis (each
    entry is its own group for 1-D tensors).  Returns shape (n, *shape).
    """
    size = int(np.prod(shape)) if shape else 1
    if size == 0:
        raise DegenerateGroup(f"weight group of shape {shape} has size 0")
    xi = rng.standard_normal((n, *shape))
    if group == "per_layer":
        axes = tuple(range(1, xi.ndim))
        r = rng.standard_normal((n,) + (1,) * len(shape))
    elif group == "per_row":
        if len(shape) >= 2:
            axes = (xi.ndim - 1,)
            r = rng.standard_normal((n, *shape[:-1], 1))
        else:
            axes = ()
            r = rng.standard_normal((n, *shape))
    else:
        raise InvalidConfig(f"unknown radial group {group!r}")
    if axes:
        norm = np.sqrt((xi * xi).sum(axis=axes, keepdims=True))
    else:
        norm = np.abs(xi)
    norm = np.maximum(norm, np.finfo(np.float64).tiny)
    return (xi / norm) * np.abs(r)


def sample_radial(
    params: RadialParams, rng: np.random.Generator, group: str = "per_layer"
) -> GraphNode:
    """One reparameterized draw w = mu + sigma * (xi/||xi||) * |r|.

    Differentiable in mu and sigma; the direction factor enters as a
    constant noise leaf.
    """
    d = radial_direction_factors(1, params.shape, rng, group)[0]
    return params.mu + params.sigma * constant(d)


def sample_gumbel_softmax(
    logit: BernoulliLogit,
    cfg: GumbelConfig,
    rng: np.random.Generator,
    u: np.ndarray | None = None,
) -> GraphNode:
    """Relaxed Bernoulli draw sigmoid((theta_pi + logit(u)) / tau).

    ``u`` may be supplied by test harnesses to pin the uniform noise;
    otherwise it is drawn from rng on the open interval.  Output is
    clamped to stay strictly inside (0,1) even where sigmoid saturates.
    """
    shape = logit.shape
    if u is None:
        u = rng.random(shape if shape else None)
    u = np.maximum(np.asarray(u, dtype=np.float64), np.finfo(np.float64).tiny)
    logistic_noise = np.log(u / (1.0 - u))
    eta = logit.theta_pi + constant(logistic_noise)
    relaxed = ad.sigmoid(eta * (1.0 / cfg.tau))
    return ad.clip(relaxed, 1e-15, 1.0 - 1e-15)


def sample_spike_slab(
    params: SpikeSlabRadialParams,
    cfg: GumbelConfig,
    mode: str,
    rng: np.random.Generator,
    group: str = "per_layer",
) -> GraphNode:
    """Mixture draw: relaxed uses the Gumbel-Softmax gate, hard uses an
    exact Bernoulli indicator (no gradient path through the indicator)."""
    w_slab = sample_radial(params.slab, rng, group)
    if mode == "relaxed":
        gate = sample_gumbel_softmax(params.inclusion, cfg, rng)
        return gate * w_slab
    if mode == "hard":
        lam = sigmoid_np(params.inclusion.theta_pi.value.array)
        indicator = (rng.random(params.shape) < lam).astype(np.float64)
        return constant(indicator) * w_slab
    raise InvalidConfig(f"unknown sampling mode {mode!r}")


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    """Overflow-safe logistic function on plain arrays."""
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


# ---------------------------------------------------------------------------
# closed-form KL terms (floats; independent of the graph engine)
# ---------------------------------------------------------------------------


def kl_bernoulli(lambda_q: float, lambda_p: float) -> float:
    """Exact KL(Bern(lambda_q)||Bern(lambda_p)); arguments clamped to
    [1e-6, 1-1e-6] inside the open interval, boundary values rejected."""
    for name, v in (("lambda_q", lambda_q), ("lambda_p", lambda_p)):
        if not 0.0 < v < 1.0:
            raise DomainError(f"{name} must lie strictly inside (0,1), got {v}")
    lq = min(max(lambda_q, LAMBDA_EPS), 1.0 - LAMBDA_EPS)
    lp = min(max(lambda_p, LAMBDA_EPS), 1.0 - LAMBDA_EPS)
    return (1.0 - lq) * math.log((1.0 - lq) / (1.0 - lp)) + lq * math.log(lq / lp)


def kl_gaussian_gaussian(mu_q: float, sigma_q: float, mu_p: float, sigma_p: float) -> float:
    """Exact KL(N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2))."""
    if sigma_q <= 0.0 or sigma_p <= 0.0:
        raise DomainError("sigma must be positive")
    return (
        math.log(sigma_p / sigma_q)
        + (sigma_q ** 2 + (mu_q - mu_p) ** 2) / (2.0 * sigma_p ** 2)
        - 0.5
    )


# ---------------------------------------------------------------------------
# graph-valued KL terms
# ---------------------------------------------------------------------------


def bernoulli_kl_nats(inclusion: BernoulliLogit, lambda_p: float) -> GraphNode:
    """Elementwise KL(Bern(sigmoid(theta_pi)) || Bern(lambda_p)) as a node."""
    if not 0.0 < lambda_p < 1.0:
        raise DomainError(f"lambda_p must lie strictly inside (0,1), got {lambda_p}")
    lp = min(max(lambda_p, LAMBDA_EPS), 1.0 - LAMBDA_EPS)
    lam = inclusion.lam()
    one_minus = 1.0 - lam
    return one_minus * (ad.log(one_minus) - math.log(1.0 - lp)) + lam * (
        ad.log(lam) - math.log(lp)
    )


def gaussian_kl_nats(mu: GraphNode, sigma: GraphNode, prior: PriorConfig) -> GraphNode:
    """Elementwise closed-form Gaussian KL against the prior slab."""
    diff = mu - prior.mu_p
    scale = 1.0 / (2.0 * prior.sigma_p ** 2)
    return (
        (math.log(prior.sigma_p) - ad.log(sigma))
        + (sigma * sigma + diff * diff) * scale
        - 0.5
    )


def radial_prior_logpdf_mc(
    mu: GraphNode,
    sigma: GraphNode,
    prior: PriorConfig,
    n_samples: int,
    rng: np.random.Generator,
    group: str = "per_layer",
    max_chunk_elems: int = 2_000_000,
) -> GraphNode:
    """Per-weight Monte Carlo average of log p(w_i) under the Gaussian
    slab prior, with w_i drawn from the radial posterior.

    Forward streams the n_samples draws in chunks and retains only
    running sums (value plus the two accumulated gradient factors), so
    memory stays O(parameter count) regardless of n_samples.  The
    backward rule is analytic:

        d/dmu    mean_i log p(w_i) = mean_i  -(w_i - mu_p)/sigma_p^2
        d/dsigma mean_i log p(w_i) = mean_i  -(w_i - mu_p)/sigma_p^2 * d_i

    where d_i is the frozen direction factor of draw i.
    """
    if n_samples < 1:
        raise InvalidConfig(f"n_samples must be >= 1, got {n_samples}")
    mu = ad.as_node(mu)
    sigma = ad.as_node(sigma)
    if mu.shape != sigma.shape:
        raise DomainError(f"mu shape {mu.shape} != sigma shape {sigma.shape}")
    shape = mu.shape
    size = max(1, int(np.prod(shape)) if shape else 1)
    mu_v = mu.value.array
    sigma_v = sigma.value.array
    inv_var = 1.0 / (prior.sigma_p ** 2)
    log_norm = -math.log(prior.sigma_p) - _LOG_SQRT_2PI

    acc_lp = np.zeros(shape)
    acc_dlp = np.zeros(shape)
    acc_dlp_d = np.zeros(shape)
    remaining = n_samples
    chunk = max(1, max_chunk_elems // size)
    with np.errstate(over="ignore", invalid="ignore"):
        while remaining > 0:
            c = min(chunk, remaining)
            d = radial_direction_factors(c, shape, rng, group)
            w = mu_v + sigma_v * d
            z = (w - prior.mu_p) * inv_var
            acc_lp += (-0.5 * z * (w - prior.mu_p)).sum(axis=0)
            acc_dlp += (-z).sum(axis=0)
            acc_dlp_d += (-z * d).sum(axis=0)
            remaining -= c
    value = acc_lp / n_samples + log_norm
    grad_mu = acc_dlp / n_samples
    grad_sigma = acc_dlp_d / n_samples
    if not (
        np.all(np.isfinite(value))
        and np.all(np.isfinite(grad_mu))
        and np.all(np.isfinite(grad_sigma))
    ):
        raise NonFiniteValue("non-finite values produced by op 'radial_prior_logpdf_mc'")

    def rule(g):
        return g * grad_mu, g * grad_sigma

    requires = mu.requires_grad or sigma.requires_grad
    return GraphNode(
        Tensor(np.asarray(value)),
        parents=(mu, sigma),
        backward_rule=rule if requires else None,
        requires_grad=requires,
        op="radial_prior_logpdf_mc",
    )


def kl_radial_gaussian_mc(
    params: RadialParams,
    prior: PriorConfig,
    n_samples: int,
    rng: np.random.Generator,
    group: str = "per_layer",
) -> GraphNode:
    """MC estimate of KL(radial(mu, sigma) || N(mu_p, sigma_p)) summed
    over the parameter tensor, up to an additive constant:

        sum_jk [ -log sigma_jk - mean_i log p(w_i_jk) ]

    Tests must compare differences of estimates or add the analytically
    known 1-D constant; absolute values are meaningless on their own.
    """
    ce = radial_prior_logpdf_mc(params.mu, params.sigma, prior, n_samples, rng, group)
    return ad.reduce_sum(ad.neg(ad.log(params.sigma)) - ce)


def spike_slab_kl_per_weight(
    params: SpikeSlabRadialParams,
    prior: PriorConfig,
    n_samples: int,
    rng: np.random.Generator,
    group: str = "per_layer",
) -> GraphNode:
    """Elementwise mixture KL: Bernoulli term plus the lambda-weighted
    slab estimate (up to the slab's additive constant)."""
    lam = params.inclusion.lam()
    kl_incl = bernoulli_kl_nats(params.inclusion, prior.lambda_p)
    slab = params.slab
    ce = radial_prior_logpdf_mc(slab.mu, slab.sigma, prior, n_samples, rng, group)
    slab_term = lam * (ad.neg(ad.log(slab.sigma)) - ce)
    return kl_incl + slab_term


def kl_spike_slab(
    params: SpikeSlabRadialParams,
    prior: PriorConfig,
    n_samples: int,
    rng: np.random.Generator,
    group: str = "per_layer",
) -> GraphNode:
    """Scalar mixture KL summed over all weights of the tensor."""
    return ad.reduce_sum(spike_slab_kl_per_weight(params, prior, n_samples, rng, group))
