"""Analytic oracle for modality-drop gradients on a tiny logistic net.

The net is deliberately minimal: one sigmoid output over a weighted sum of
K modality groups, o = sigmoid(lam * sum_k delta_k w^(k).x^(k)), with
binary cross-entropy loss. It is small enough that the expectation of the
gradient over all 2^K drop patterns can be enumerated exactly, which gives
an independent target for two claimed properties of training with modality
drops:

* to first order in lam, the expected gradient for modality k is the full
  gradient scaled by its keep probability, minus a coupling term
  lam^2 * o(1-o) * x_i^(k) * p_k * sum_{m!=k} (1-p_m) w^(m).x^(m)
  that ties w^(k) to the other modalities' scores;
* the coupling term's batch mean vanishes for independent zero-mean inputs,
  and for positively correlated inputs it drives cross-modality weight
  products positive (learning one modality's weight pulls the others the
  same way, which is what lets a path stand in for a missing one).

Enumeration cost grows as 2^K, so group count and widths are capped.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .numerics import SeededRng

__all__ = [
    "ToyConfig",
    "ToyParams",
    "DerivationCheck",
    "sigmoid",
    "toy_init",
    "toy_forward",
    "toy_loss",
    "toy_gradients",
    "drop_patterns",
    "pattern_probability",
    "expected_gradient",
    "first_order_gradient",
    "compare_gradients",
    "independent_scenario",
    "correlated_scenario",
    "run_expected_sgd",
    "cross_modality_products",
]

MAX_GROUPS = 3
MAX_WIDTH = 4


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.clip(np.asarray(z, dtype=np.float64), -60.0, 60.0)
    return 1.0 / (1.0 + np.exp(-z))


@dataclass(frozen=True)
class ToyConfig:
    """Input widths per modality group and the pre-sigmoid scale lam."""

    dims: tuple
    lam: float = 1.0

    def __post_init__(self):
        if not 1 <= len(self.dims) <= MAX_GROUPS:
            raise ValueError(
                f"group count must be in [1, {MAX_GROUPS}], got {len(self.dims)}"
            )
        for d in self.dims:
            if not 1 <= d <= MAX_WIDTH:
                raise ValueError(
                    f"group width must be in [1, {MAX_WIDTH}], got {d}"
                )
        if self.lam <= 0:
            raise ValueError("lam must be positive")

    @property
    def n_groups(self) -> int:
        return len(self.dims)


@dataclass
class ToyParams:
    weights: list   # one (d_k,) weight vector per group

    def copy(self) -> "ToyParams":
        return ToyParams([w.copy() for w in self.weights])


def toy_init(rng: SeededRng, config: ToyConfig,
             scale: float = 0.5) -> ToyParams:
    return ToyParams([rng.split(k).normal(size=d) * scale
                      for k, d in enumerate(config.dims)])


def _scores(params: ToyParams, xs) -> list:
    return [np.asarray(x, dtype=np.float64) @ w
            for x, w in zip(xs, params.weights)]


def toy_forward(params: ToyParams, xs, lam: float,
                delta=None) -> np.ndarray:
    """Sigmoid outputs, shape (B,). delta is (B, K) or a length-K pattern."""
    scores = _scores(params, xs)
    s = np.zeros_like(scores[0])
    for k, t in enumerate(scores):
        if delta is None:
            s += t
        else:
            d = np.asarray(delta, dtype=np.float64)
            s += (d[:, k] if d.ndim == 2 else d[k]) * t
    return sigmoid(lam * s)


def toy_loss(o: np.ndarray, y: np.ndarray) -> float:
    o = np.clip(np.asarray(o, dtype=np.float64), 1e-15, 1.0 - 1e-15)
    y = np.asarray(y, dtype=np.float64)
    return float(-(y * np.log(o) + (1.0 - y) * np.log(1.0 - o)).mean())


def toy_gradients(params: ToyParams, xs, y, lam: float,
                  delta=None) -> list:
    """Batch-mean loss gradients per group; dropped groups get exact zeros."""
    o = toy_forward(params, xs, lam, delta=delta)
    resid = o - np.asarray(y, dtype=np.float64)
    b_size = resid.shape[0]
    grads = []
    for k, x in enumerate(xs):
        w_resid = resid
        if delta is not None:
            d = np.asarray(delta, dtype=np.float64)
            w_resid = resid * (d[:, k] if d.ndim == 2 else d[k])
        grads.append(lam * (np.asarray(x, dtype=np.float64).T @ w_resid)
                     / b_size)
    return grads


def drop_patterns(n_groups: int):
    """All 2^K keep/drop patterns as tuples of 0/1."""
    return list(itertools.product((0.0, 1.0), repeat=n_groups))


def pattern_probability(pattern, p_keeps) -> float:
    prob = 1.0
    for d, p in zip(pattern, p_keeps):
        prob *= p if d == 1.0 else (1.0 - p)
    return prob


def expected_gradient(params: ToyParams, xs, y, p_keeps,
                      lam: float) -> list:
    """Exact expectation of the gradient over independent Bernoulli drops,
    by enumerating every drop pattern."""
    p_keeps = np.asarray(p_keeps, dtype=np.float64)
    if p_keeps.shape != (len(params.weights),):
        raise ValueError("need one keep probability per group")
    out = [np.zeros_like(w) for w in params.weights]
    for pattern in drop_patterns(len(params.weights)):
        prob = pattern_probability(pattern, p_keeps)
        if prob == 0.0:
            continue
        grads = toy_gradients(params, xs, y, lam, delta=pattern)
        for k in range(len(out)):
            out[k] += prob * grads[k]
    return out


def first_order_gradient(params: ToyParams, xs, y, p_keeps,
                         lam: float):
    """First-order (in lam) form of the expected gradient.

    Returns (approximation, coupling) per group, where approximation is
    p_k * full gradient + coupling and coupling is the cross-modality term.
    """
    p_keeps = np.asarray(p_keeps, dtype=np.float64)
    scores = _scores(params, xs)
    o = toy_forward(params, xs, lam)
    resid = o - np.asarray(y, dtype=np.float64)
    slope = o * (1.0 - o)
    b_size = resid.shape[0]
    approx, coupling = [], []
    for k, x in enumerate(xs):
        x = np.asarray(x, dtype=np.float64)
        other = np.zeros(b_size)
        for m, t in enumerate(scores):
            if m != k:
                other += (1.0 - p_keeps[m]) * t
        term1 = p_keeps[k] * lam * (x.T @ resid) / b_size
        term2 = -lam**2 * p_keeps[k] * (x.T @ (slope * other)) / b_size
        approx.append(term1 + term2)
        coupling.append(term2)
    return approx, coupling


@dataclass
class DerivationCheck:
    """Agreement between the enumerated and first-order gradients."""

    rel_deviation: float    # |exact - approx| / |exact|, stacked over groups
    coupling_share: float   # |coupling| / |exact|
    exact: list
    approx: list
    coupling: list


def compare_gradients(params: ToyParams, xs, y, p_keeps,
                      lam: float) -> DerivationCheck:
    exact = expected_gradient(params, xs, y, p_keeps, lam)
    approx, coupling = first_order_gradient(params, xs, y, p_keeps, lam)
    flat_exact = np.concatenate(exact)
    flat_approx = np.concatenate(approx)
    flat_coupling = np.concatenate(coupling)
    denom = max(float(np.linalg.norm(flat_exact)), 1e-300)
    return DerivationCheck(
        rel_deviation=float(np.linalg.norm(flat_exact - flat_approx)) / denom,
        coupling_share=float(np.linalg.norm(flat_coupling)) / denom,
        exact=exact,
        approx=approx,
        coupling=coupling,
    )


# --------------------------------------------------------------------------
# scenarios


def independent_scenario(rng: SeededRng, config: ToyConfig, n: int):
    """Zero-mean unit-variance inputs, labels independent of everything."""
    xs = [rng.split(0, k).normal(size=(n, d))
          for k, d in enumerate(config.dims)]
    y = (rng.split(1).uniform(size=n) < 0.5).astype(np.float64)
    return xs, y


def correlated_scenario(rng: SeededRng, config: ToyConfig, n: int,
                        noise: float = 0.5):
    """All inputs share a latent z; the label is sign(z). Every input is
    positively correlated with every other and with the label."""
    z = rng.split(0).normal(size=n)
    xs = [z[:, None] + noise * rng.split(1, k).normal(size=(n, d))
          for k, d in enumerate(config.dims)]
    y = (z > 0).astype(np.float64)
    return xs, y


def run_expected_sgd(params: ToyParams, xs, y, p_keeps, lam: float,
                     steps: int, learning_rate: float) -> ToyParams:
    """Gradient descent on the exact drop-averaged objective (full-batch,
    enumerated expectation each step)."""
    params = params.copy()
    for _ in range(steps):
        grads = expected_gradient(params, xs, y, p_keeps, lam)
        for w, g in zip(params.weights, grads):
            w -= learning_rate * g
    return params


def cross_modality_products(params: ToyParams) -> np.ndarray:
    """All pairwise products w_i^(k) * w_j^(m) across distinct groups."""
    prods = []
    k_count = len(params.weights)
    for k in range(k_count):
        for m in range(k + 1, k_count):
            prods.append(np.outer(params.weights[k],
                                  params.weights[m]).ravel())
    if not prods:
        return np.empty(0)
    return np.concatenate(prods)
