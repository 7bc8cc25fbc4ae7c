"""Dense numeric kernels shared by every other module.

All arrays are float64 ("Matrix" below means a 2-D C-contiguous float64
ndarray). Double precision is required: gradient checks downstream assert
relative errors below 1e-4 against central finite differences, which single
precision cannot reach.

Determinism contract: with a fixed seed and a fixed platform/thread count,
every function here is bit-reproducible across runs. Matrix products delegate
to numpy's BLAS, which satisfies that contract for a fixed build; the naive
triple-loop reference lives in the test suite, not here.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "as_matrix",
    "as_vector",
    "matmul",
    "apply_tanh",
    "apply_softmax_rows",
    "SeededRng",
    "bernoulli_mask",
    "gaussian_kernel",
    "gaussian_smooth_temporal",
]


def _require_finite(name: str, arr: np.ndarray) -> None:
    # Matrix invariant: no NaN/Inf may leave a public operation.
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting anything else."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    return np.ascontiguousarray(a)


def as_vector(x, name: str = "vector") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {a.shape}")
    return np.ascontiguousarray(a)


def matmul(a, b) -> np.ndarray:
    """Matrix product a @ b with explicit shape checking.

    Summation runs in a fixed order for a given platform (BLAS row-major
    accumulation), so repeated calls with identical inputs are bit-identical.
    """
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ValueError(
            f"inner dimensions do not match: {a.shape} x {b.shape}"
        )
    out = a @ b
    _require_finite("matmul result", out)
    return out


def apply_tanh(x) -> np.ndarray:
    """Elementwise hyperbolic tangent."""
    x = np.asarray(x, dtype=np.float64)
    _require_finite("tanh input", x)
    return np.tanh(x)


def apply_softmax_rows(x) -> np.ndarray:
    """Row-wise softmax with max-subtraction so large logits cannot overflow.

    Every output row sums to 1 within 1e-12 for inputs up to magnitude ~1e3.
    """
    x = as_matrix(x, "softmax input")
    _require_finite("softmax input", x)
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


class SeededRng:
    """Deterministic random source with splittable substreams.

    PCG64 seeded through a SeedSequence. ``split(*keys)`` derives an
    independent child stream addressed by the integer key path, so e.g.
    the dropout draw for (stage, epoch, batch) has its own stream that does
    not depend on how many draws any other consumer made. Identical
    (seed, path) always reproduces the same draw sequence.
    """

    def __init__(self, seed: int, _path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(int(k) for k in _path)
        if any(k < 0 for k in self.path):
            raise ValueError("stream keys must be non-negative integers")
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def split(self, *keys: int) -> "SeededRng":
        """Child stream at this stream's path extended by ``keys``."""
        return SeededRng(self.seed, self.path + keys)

    def uniform(self, size=None) -> np.ndarray:
        return self.generator.random(size)

    def normal(self, scale: float = 1.0, size=None) -> np.ndarray:
        return self.generator.normal(0.0, scale, size)

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, path={self.path})"


def bernoulli_mask(rng: SeededRng, n, p_keep: float) -> np.ndarray:
    """0/1 mask with independent entries, each 1 with probability p_keep.

    ``n`` may be an int or a shape tuple. Returned as float64 so masks can
    be multiplied straight into activations.
    """
    if not 0.0 <= p_keep <= 1.0:
        raise ValueError(f"keep probability must be in [0, 1], got {p_keep}")
    # rng.uniform is in [0, 1), so p_keep=1 keeps everything and p_keep=0
    # keeps nothing, with no edge-case draws.
    return (rng.uniform(size=n) < p_keep).astype(np.float64)


def gaussian_kernel(sigma: float, window: int) -> np.ndarray:
    """Normalized 1-D Gaussian kernel of odd length ``window``."""
    if window % 2 != 1 or window < 1:
        raise ValueError(f"window must be odd and positive, got {window}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    offsets = np.arange(window, dtype=np.float64) - window // 2
    k = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_smooth_temporal(seq, sigma: float, window: int) -> np.ndarray:
    """Per-dimension temporal smoothing of a T x d sequence.

    Near the boundaries the kernel is renormalized over the taps that fall
    inside the sequence, so a constant sequence stays constant all the way
    to the edges.
    """
    seq = as_matrix(seq, "sequence")
    _require_finite("sequence", seq)
    t_len = seq.shape[0]
    if t_len < 1:
        raise ValueError("sequence must have at least one frame")
    kernel = gaussian_kernel(sigma, window)
    half = window // 2
    num = np.zeros_like(seq)
    den = np.zeros(t_len, dtype=np.float64)
    for i, w in enumerate(kernel):
        off = i - half
        t0 = max(0, -off)
        t1 = min(t_len, t_len - off)
        if t0 >= t1:
            continue
        num[t0:t1] += w * seq[t0 + off : t1 + off]
        den[t0:t1] += w
    return num / den[:, None]
