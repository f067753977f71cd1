"""
Dirichlet and diagonal-Gaussian variational families.

Sampling is reparameterized: Gaussian draws are ``mu + sigma * eps`` and
Dirichlet draws normalize Gamma variates whose gradient with respect to the
concentration comes from the Gamma CDF (implicit reparameterization).
Every draw returns a noise record that replays it exactly.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from src import diffcore as dc
from src import numerics
from src.diffcore import Function, Node, as_node, value_of
from src.errors import DomainError, ShapeError

TINY = np.finfo(np.float64).tiny
CDF_INVERSION_MAX_ITER = 200
CDF_INVERSION_RTOL = 1e-15


@dataclass(frozen=True)
class DirichletParams:
    """
    Concentration of a Dirichlet over the (K-1)-simplex.

    Attributes:
        alpha: K-vector (or batch x K matrix) of positive reals, as a Node
            when gradients are needed.
    """

    alpha: Node | np.ndarray

    def __post_init__(self):
        alpha = value_of(self.alpha)
        if alpha.ndim == 0 or alpha.shape[-1] < 2:
            raise ShapeError(f"Dirichlet needs K >= 2, got shape {alpha.shape}")
        if not np.all(np.isfinite(alpha)) or np.any(alpha <= 0.0):
            raise DomainError("Dirichlet concentration must be positive")

    @property
    def k(self) -> int:
        return value_of(self.alpha).shape[-1]

    def mean(self) -> Node:
        """Posterior mean α / Σα, differentiable in α."""
        alpha = as_node(self.alpha)
        return alpha / dc.sum(alpha, axis=-1, keepdims=True)

    @classmethod
    def uniform(cls, k: int, alpha0: float = 1.0) -> "DirichletParams":
        return cls(np.full(k, float(alpha0)))


@dataclass(frozen=True)
class GaussianParams:
    """
    Diagonal Gaussian N(mu, diag(sigma^2)).

    Attributes:
        mu: J-vector (or batch x J) of means.
        sigma: Standard deviations, same shape, strictly positive.
        log_sigma: Optional ln sigma; used directly by the KL when present.
    """

    mu: Node | np.ndarray
    sigma: Node | np.ndarray
    log_sigma: Node | np.ndarray | None = None

    def __post_init__(self):
        mu, sigma = value_of(self.mu), value_of(self.sigma)
        if mu.shape != sigma.shape:
            raise ShapeError(f"Shape mismatch: {mu.shape} and {sigma.shape}")
        if not np.all(np.isfinite(sigma)) or np.any(sigma <= 0.0):
            raise DomainError("Gaussian sigma must be positive")


class GammaNoise(NamedTuple):
    """
    Everything needed to replay a batch of Gamma(alpha, 1) draws.

    Attributes:
        alpha: Concentration the draws were made with.
        normal: Accepted normal variates of the squeeze sampler.
        boost_uniform: Uniforms of the shape boost (used where alpha < 1).
        g: The Gamma variates.
    """

    alpha: np.ndarray
    normal: np.ndarray
    boost_uniform: np.ndarray
    g: np.ndarray


class LatentNoise(NamedTuple):
    gamma: GammaNoise
    eps_pos: np.ndarray
    eps_neg: np.ndarray


class LatentSample(NamedTuple):
    """One draw of (w, z+, z-) and the noise that produced it."""

    w: Node
    z_pos: Node
    z_neg: Node
    noise: LatentNoise


def dirichlet_kl(q: DirichletParams, p: DirichletParams) -> Node:
    """
    KL(Dir(q.alpha) || Dir(p.alpha)) in closed form.

    Works row-wise on batches; the result is a scalar node for a single
    K-vector and a batch vector otherwise.

    Raises:
        ShapeError: If the two concentrations have different K.
    """
    if q.k != p.k:
        raise ShapeError(f"Shape mismatch: {value_of(q.alpha).shape} and {value_of(p.alpha).shape}")
    alpha = as_node(q.alpha)
    alpha0 = value_of(p.alpha)

    total = dc.sum(alpha, axis=-1, keepdims=True)
    total0 = np.sum(alpha0, axis=-1, keepdims=True)
    prior_norm = np.sum(numerics.log_gamma(alpha0), axis=-1, keepdims=True) - numerics.log_gamma(total0)

    kl = (
        dc.log_gamma(total)
        - dc.sum(dc.log_gamma(alpha), axis=-1, keepdims=True)
        + prior_norm
        + dc.sum((alpha - alpha0) * (dc.digamma(alpha) - dc.digamma(total)), axis=-1, keepdims=True)
    )
    return dc.sum(kl, axis=-1)


def gaussian_kl(q: GaussianParams) -> Node:
    """KL(q || N(0, I)) = 1/2 Σ_j (mu_j² + sigma_j² - 2 ln sigma_j - 1)."""
    mu, sigma = as_node(q.mu), as_node(q.sigma)
    log_sigma = dc.log(sigma) if q.log_sigma is None else as_node(q.log_sigma)
    return 0.5 * dc.sum(mu * mu + sigma * sigma - 2.0 * log_sigma - 1.0, axis=-1)


def sample_gaussian(
    q: GaussianParams, rng: np.random.Generator | None = None, eps: np.ndarray | None = None
) -> tuple[Node, np.ndarray]:
    """
    Pathwise draw z = mu + sigma * eps.

    Args:
        q: Gaussian parameters.
        rng: Source of fresh noise, ignored when ``eps`` is given.
        eps: Standard normal noise to replay.

    Returns:
        The sample node and the noise used.
    """
    shape = value_of(q.mu).shape
    if eps is None:
        eps = rng.standard_normal(shape)
    return as_node(q.mu) + as_node(q.sigma) * eps, eps


def _gamma_from_noise(alpha: np.ndarray, normal: np.ndarray, boost_uniform: np.ndarray) -> np.ndarray:
    boost = alpha < 1.0
    shape = np.where(boost, alpha + 1.0, alpha)
    d = shape - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)
    g = d * (1.0 + c * normal) ** 3
    with np.errstate(divide="ignore", under="ignore"):
        g = np.where(boost, g * boost_uniform ** (1.0 / alpha), g)
    return np.maximum(g, TINY)


def draw_gamma(alpha: np.ndarray, rng: np.random.Generator) -> GammaNoise:
    """
    Gamma(alpha, 1) variates by the Marsaglia-Tsang squeeze method.

    Shapes below one are boosted: draw Gamma(alpha + 1) and scale by
    U^(1/alpha). Only the accepted normals are recorded, so replaying never
    reruns the rejection loop.
    """
    alpha = np.array(alpha, dtype=np.float64)
    boost = alpha < 1.0
    d = np.where(boost, alpha + 1.0, alpha) - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)

    normal = np.zeros(alpha.shape)
    pending = np.ones(alpha.shape, dtype=bool)
    while pending.any():
        idx = np.flatnonzero(pending)
        x = rng.standard_normal(idx.size)
        u = rng.random(idx.size)
        dd, cc = d.flat[idx], c.flat[idx]
        v = (1.0 + cc * x) ** 3
        with np.errstate(divide="ignore", invalid="ignore"):
            accept = (v > 0.0) & (np.log(u) < 0.5 * x * x + dd - dd * v + dd * np.log(v))
        normal.flat[idx[accept]] = x[accept]
        pending.flat[idx[accept]] = False

    boost_uniform = rng.random(alpha.shape)
    g = _gamma_from_noise(alpha, normal, boost_uniform)
    return GammaNoise(alpha, normal, boost_uniform, g)


def _invert_gamma_cdf(alpha: np.ndarray, level: np.ndarray, start: np.ndarray) -> np.ndarray:
    # Newton on P(alpha, g) = level, safeguarded by bisection on a bracket
    g = np.array(start, dtype=np.float64)
    lo = np.zeros_like(g)
    hi = np.full_like(g, np.inf)
    solvable = (level > 0.0) & (level < 1.0)
    for _ in range(CDF_INVERSION_MAX_ITER):
        err = numerics.reg_incomplete_gamma(alpha, g) - level
        hi = np.where(err > 0.0, np.minimum(hi, g), hi)
        lo = np.where(err < 0.0, np.maximum(lo, g), lo)
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            pdf = np.exp(numerics.gamma_log_density(alpha, g))
            candidate = g - err / pdf
        outside = ~np.isfinite(candidate) | (candidate <= lo) | (candidate >= hi)
        bisect = np.where(np.isfinite(hi), 0.5 * (lo + hi), 2.0 * g)
        candidate = np.where(outside, bisect, candidate)
        candidate = np.where(solvable, np.maximum(candidate, TINY), g)
        done = np.abs(candidate - g) <= CDF_INVERSION_RTOL * g
        g = candidate
        if done.all():
            break
    return g


def replay_gamma(noise: GammaNoise, alpha: np.ndarray) -> np.ndarray:
    """
    Reproduce Gamma variates for ``alpha``.

    With the recorded concentration the original draw is rebuilt bitwise.
    With a different concentration the variate keeps its CDF level, which is
    the path the implicit gradient differentiates.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != noise.alpha.shape:
        raise ShapeError(f"Shape mismatch: {alpha.shape} and {noise.alpha.shape}")
    if np.array_equal(alpha, noise.alpha):
        return _gamma_from_noise(alpha, noise.normal, noise.boost_uniform)
    level = numerics.reg_incomplete_gamma(noise.alpha, noise.g)
    return _invert_gamma_cdf(alpha, level, noise.g)


def implicit_gamma_grad(alpha: np.ndarray, g: np.ndarray) -> np.ndarray:
    """
    dg/dalpha = -(dF/dalpha) / (dF/dg) for F the Gamma(alpha, 1) CDF.

    dF/dalpha is a central difference with step 1e-4 * max(1, alpha);
    dF/dg is the Gamma density.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    h = np.minimum(1e-4 * np.maximum(1.0, alpha), 0.5 * alpha)
    dcdf_dalpha = (
        numerics.reg_incomplete_gamma(alpha + h, g) - numerics.reg_incomplete_gamma(alpha - h, g)
    ) / (2.0 * h)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        density = np.exp(numerics.gamma_log_density(alpha, g))
        grad = -dcdf_dalpha / density
    return np.where(np.isfinite(grad) & (density > 0.0), grad, 0.0)


class ImplicitGamma(Function):
    """Gamma variates as a function of alpha with implicit local derivative."""

    def forward(self, alpha):
        return self.options["g"]

    def backward(self, grad):
        return (grad * self.options["dg"],)


def sample_dirichlet(
    q: DirichletParams, rng: np.random.Generator | None = None, noise: GammaNoise | None = None
) -> tuple[Node, GammaNoise]:
    """
    Reparameterized Dirichlet draw w = g / Σg with g_k ~ Gamma(alpha_k, 1).

    Args:
        q: Dirichlet parameters (alpha as a Node to get gradients).
        rng: Source of fresh noise, ignored when ``noise`` is given.
        noise: A previous record to replay.

    Returns:
        The simplex sample node and its noise record.
    """
    alpha = as_node(q.alpha)
    if noise is None:
        noise = draw_gamma(alpha.value, rng)
        g = noise.g
    else:
        g = replay_gamma(noise, alpha.value)
    gamma = ImplicitGamma.apply(alpha, g=g, dg=implicit_gamma_grad(alpha.value, g))
    return gamma / dc.sum(gamma, axis=-1, keepdims=True), noise


def sample_latents(
    q_w: DirichletParams,
    q_pos: GaussianParams,
    q_neg: GaussianParams,
    rng: np.random.Generator | None = None,
    noise: LatentNoise | None = None,
) -> LatentSample:
    """Draw one shared w and one z per response, or replay a noise record."""
    w, gamma_noise = sample_dirichlet(q_w, rng, None if noise is None else noise.gamma)
    z_pos, eps_pos = sample_gaussian(q_pos, rng, None if noise is None else noise.eps_pos)
    z_neg, eps_neg = sample_gaussian(q_neg, rng, None if noise is None else noise.eps_neg)
    return LatentSample(w, z_pos, z_neg, LatentNoise(gamma_noise, eps_pos, eps_neg))
