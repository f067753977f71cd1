"""
Finite-difference checks of every differentiable primitive and of the full
training loss under frozen latent noise.
"""

import logging
from typing import Callable, NamedTuple

import numpy as np

from src import diffcore as dc
from src.config import ModelHyper, SupVariant
from src.diffcore import GradCheckReport, Node, ParamStore, flipped_derivative, grad_check
from src.distributions import DirichletParams, draw_gamma, sample_dirichlet
from src.losses import PreferenceBatch, baseline_bt_loss, total_loss
from src.model import BaselineRm, VrmModel

logger = logging.getLogger(__name__)

PRIMITIVE_TOLERANCE = 1e-6
LOSS_TOLERANCE = 1e-4


class CheckResult(NamedTuple):
    name: str
    report: GradCheckReport
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.report.passes(self.tolerance)


def _store(seed: int, **shapes: tuple[int, ...]) -> ParamStore:
    rng = np.random.default_rng(seed)
    store = ParamStore(seed)
    for name, shape in shapes.items():
        store.add(name, rng.uniform(-1.0, 1.0, size=shape))
    return store


def _positive_store(seed: int, **shapes: tuple[int, ...]) -> ParamStore:
    rng = np.random.default_rng(seed)
    store = ParamStore(seed)
    for name, shape in shapes.items():
        store.add(name, rng.uniform(0.5, 3.0, size=shape))
    return store


def _frozen_dirichlet(params: ParamStore, seed: int) -> Callable[[ParamStore], Node]:
    alpha = params["alpha"].value.copy()
    noise = draw_gamma(alpha, np.random.default_rng(seed))
    weights = np.random.default_rng(seed + 1).uniform(-1.0, 1.0, size=alpha.shape)

    def f(p: ParamStore) -> Node:
        w, _ = sample_dirichlet(DirichletParams(p["alpha"]), noise=noise)
        return dc.sum(w * weights)

    return f


def primitive_checks(seed: int = 0) -> list[tuple[str, Callable[[ParamStore], Node], ParamStore]]:
    """Scalar test functions exercising each primitive, with their parameters."""
    rng = np.random.default_rng(seed)
    c = rng.uniform(-1.0, 1.0, size=(3, 4))
    v = rng.uniform(-1.0, 1.0, size=(3,))
    return [
        ("Add", lambda p: dc.sum((p["a"] + p["b"]) * c), _store(seed, a=(3, 4), b=(4,))),
        ("Sub", lambda p: dc.sum((p["a"] - p["b"]) * c), _store(seed, a=(3, 4), b=(3, 4))),
        ("Neg", lambda p: dc.sum(-p["a"] * c), _store(seed, a=(3, 4))),
        ("Mul", lambda p: dc.sum(p["a"] * p["b"] * c), _store(seed, a=(3, 4), b=(3, 4))),
        ("Div", lambda p: dc.sum(p["a"] / p["b"]), _positive_store(seed, a=(3, 4), b=(3, 4))),
        ("MatMul", lambda p: dc.sum(dc.matmul(p["a"], p["b"]) * v[:, None]), _store(seed, a=(3, 4), b=(4, 2))),
        ("Affine", lambda p: dc.sum(dc.affine(p["x"], p["w"], p["b"]) * v[:, None]), _store(seed, x=(3, 4), w=(4, 2), b=(2,))),
        ("Dot", lambda p: dc.sum(dc.dot(p["a"], p["b"]) * v), _store(seed, a=(3, 4), b=(3, 4))),
        ("Tanh", lambda p: dc.sum(dc.tanh(p["a"]) * c), _store(seed, a=(3, 4))),
        ("Softplus", lambda p: dc.sum(dc.softplus(p["a"]) * c), _store(seed, a=(3, 4))),
        ("Exp", lambda p: dc.sum(dc.exp(p["a"]) * c), _store(seed, a=(3, 4))),
        ("Log", lambda p: dc.sum(dc.log(p["a"]) * c), _positive_store(seed, a=(3, 4))),
        ("Abs", lambda p: dc.sum(dc.absolute(p["a"]) * c), _positive_store(seed, a=(3, 4))),
        ("ClampMin", lambda p: dc.sum(dc.clamp_min(p["a"], -2.0) * c), _store(seed, a=(3, 4))),
        ("Sum", lambda p: dc.sum(dc.sum(p["a"], axis=-1) * v), _store(seed, a=(3, 4))),
        ("Mean", lambda p: dc.sum(dc.mean(p["a"], axis=-1) * v), _store(seed, a=(3, 4))),
        ("Concat", lambda p: dc.sum(dc.concat(p["a"], p["b"]) * _fixed(seed, (3, 6))), _store(seed, a=(3, 4), b=(3, 2))),
        ("Take", lambda p: dc.sum(dc.take(p["a"], [0, 2, 2]) * _fixed(seed, (3, 3))), _store(seed, a=(3, 4))),
        ("Sigmoid", lambda p: dc.sum(dc.sigmoid(p["a"]) * c), _store(seed, a=(3, 4))),
        ("LogSigmoid", lambda p: dc.sum(dc.log_sigmoid(p["a"]) * c), _store(seed, a=(3, 4))),
        ("Softmax", lambda p: dc.sum(dc.softmax(p["a"]) * c), _store(seed, a=(3, 4))),
        ("LogGamma", lambda p: dc.sum(dc.log_gamma(p["a"]) * c), _positive_store(seed, a=(3, 4))),
        ("Digamma", lambda p: dc.sum(dc.digamma(p["a"]) * c), _positive_store(seed, a=(3, 4))),
    ]


def _fixed(seed: int, shape: tuple[int, ...]) -> np.ndarray:
    return np.random.default_rng(seed + 7).uniform(-1.0, 1.0, size=shape)


def _loss_batch(hyper: ModelHyper, size: int, seed: int) -> PreferenceBatch:
    rng = np.random.default_rng(seed)
    s_tilde = rng.dirichlet(np.ones(hyper.k), size=size)
    return PreferenceBatch(
        x=rng.standard_normal((size, hyper.d_x)),
        y_pos=rng.standard_normal((size, hyper.d_y)),
        y_neg=rng.standard_normal((size, hyper.d_y)),
        s_tilde=s_tilde,
        has_scores=np.arange(size) % 2 == 0,
    )


def loss_checks(seed: int = 0) -> list[tuple[str, Callable[[ParamStore], Node], ParamStore]]:
    """The full variational loss (every supervision variant) and the baseline loss."""
    hyper = ModelHyper(k=3, j=2, hidden=4, head_hidden=3, layers=1, d_x=3, d_y=2)
    batch = _loss_batch(hyper, 4, seed)
    checks = []
    for variant in SupVariant:
        model = VrmModel.initialize(hyper, seed)
        for name, node in model.params:
            if name.endswith((".b", ".b1", ".b2")):
                node.value = np.random.default_rng(seed + 3).uniform(-0.5, 0.5, size=node.shape)
        noise = total_loss(model, batch, np.random.default_rng(seed + 1), lam=0.5, variant=variant).terms.sample.noise

        def f(p: ParamStore, model=model, variant=variant, noise=noise) -> Node:
            return total_loss(model, batch, lam=0.5, variant=variant, noise=noise).total

        checks.append((f"total_loss[{variant}]", f, model.params))
    baseline = BaselineRm.initialize(hyper, seed)
    checks.append(("baseline_bt_loss", lambda p: baseline_bt_loss(baseline, batch).total, baseline.params))
    return checks


def run_checks(seed: int = 0, inject_fault: str | None = None, h: float = 1e-5) -> list[CheckResult]:
    """
    Run the primitive and full-loss checks.

    Args:
        seed: Seed of the test inputs.
        inject_fault: Class name of a primitive whose local derivative is
            negated during the run.
        h: Finite-difference step.
    """
    checks = [(name, f, params, PRIMITIVE_TOLERANCE) for name, f, params in primitive_checks(seed)]
    gamma_params = _positive_store(seed, alpha=(2, 3))
    checks.append(("ImplicitGamma", _frozen_dirichlet(gamma_params, seed), gamma_params, LOSS_TOLERANCE))
    checks += [(name, f, params, LOSS_TOLERANCE) for name, f, params in loss_checks(seed)]

    results = []
    for name, f, params, tolerance in checks:
        if inject_fault is None:
            report = grad_check(f, params, h)
        else:
            with flipped_derivative(inject_fault):
                report = grad_check(f, params, h)
        result = CheckResult(name, report, tolerance)
        logger.log(
            logging.INFO if result.passed else logging.ERROR,
            "%s: max relative error %.3e (%s)", name, report.max_error, "ok" if result.passed else "FAIL",
        )
        results.append(result)
    return results
