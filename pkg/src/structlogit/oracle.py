"""Biased multiclass logistic regression oracles.

Each training round reduces the structured objective to independent
per-region multiclass problems that differ from vanilla logistic
regression only by a per-row additive bias inside the partition
function:

    maximize sum_k [ s_k(y_k) + b_k(y_k) - logsumexp_y(s_k(y) + b_k(y)) ]

where ``s_k = f(x_k)`` are the classifier's scores.  Five classifier
families share this interface: zero, constant offsets, linear, a
one-hidden-layer MLP, and gradient-boosted trees (see ``gbt``).  Every
fitter either starts from the zero scorer or falls back to it, so a fit
never ends below the zero baseline on its own objective.

Log-sum-exp is always computed with max subtraction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import io
import struct

import numpy as np

__all__ = [
    "BiasedLogRegProblem", "FitConfig", "ZeroClassifier",
    "ConstantClassifier", "LinearClassifier", "MlpClassifier",
    "logistic_objective", "logistic_gradient", "predict_scores",
    "fit_zero", "fit_constant", "fit_linear", "fit_mlp",
    "save_classifier", "load_classifier", "KINDS",
]

KINDS = ("zero", "const", "linear", "boost", "mlp")


@dataclass
class BiasedLogRegProblem:
    """Rows of (features, gold label, per-label bias)."""

    features: np.ndarray
    gold: np.ndarray
    biases: np.ndarray
    num_labels: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.gold = np.asarray(self.gold, dtype=np.int64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        K = self.features.shape[0]
        if self.features.ndim != 2 or K < 1:
            raise ValueError(f"features must be (K, d), got "
                             f"{self.features.shape}")
        if self.num_labels < 2:
            raise ValueError("num_labels must be >= 2")
        if self.gold.shape != (K,):
            raise ValueError(f"gold shape {self.gold.shape}, want ({K},)")
        if self.biases.shape != (K, self.num_labels):
            raise ValueError(f"biases shape {self.biases.shape}, want "
                             f"({K}, {self.num_labels})")
        if self.gold.min() < 0 or self.gold.max() >= self.num_labels:
            raise ValueError("gold labels out of range")
        if not (np.all(np.isfinite(self.features))
                and np.all(np.isfinite(self.biases))):
            raise ValueError("non-finite features or biases")

    @property
    def num_rows(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class FitConfig:
    """Hyperparameters for the fitters.

    MLP training follows heavy-ball SGD: velocity = 0.1 * grad + 0.9 *
    velocity, params += lr * velocity, on minibatches of
    ``mlp_batch`` rows.  Boosting subsamples rows each round, requires
    every leaf to hold at least ``gbt_min_leaf_frac`` of all rows, and
    shrinks optimized leaf values by ``gbt_shrinkage``.
    """

    seed: int = 0
    warm_start: bool = True
    linear_max_iter: int = 50
    linear_tol: float = 1e-10
    mlp_hidden: int = 32
    mlp_epochs: int = 5
    mlp_batch: int = 1000
    mlp_lr: float = 0.25
    gbt_rounds: int = 10
    gbt_max_depth: int = 4
    gbt_subsample: float = 0.5
    gbt_shrinkage: float = 0.25
    gbt_min_leaf_frac: float = 0.05
    gbt_max_leaf_value: float = 4.0


class ZeroClassifier:
    """Scores identically zero; the baseline every fitter must meet."""

    kind = "zero"

    def __init__(self, num_labels: int, dim: int):
        self.num_labels = int(num_labels)
        self.dim = int(dim)

    def scores(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.zeros((X.shape[0], self.num_labels))


class ConstantClassifier:
    """Per-label offsets, independent of the features."""

    kind = "const"

    def __init__(self, offsets: np.ndarray, dim: int):
        self.offsets = np.asarray(offsets, dtype=np.float64)
        self.num_labels = self.offsets.shape[0]
        self.dim = int(dim)

    def scores(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.broadcast_to(self.offsets,
                               (X.shape[0], self.num_labels)).copy()


class LinearClassifier:
    """Scores ``W x`` with one weight row per label."""

    kind = "linear"

    def __init__(self, W: np.ndarray):
        self.W = np.asarray(W, dtype=np.float64)
        self.num_labels, self.dim = self.W.shape

    def scores(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return X @ self.W.T


class MlpClassifier:
    """One hidden sigmoid layer: scores = W sigma(U x)."""

    kind = "mlp"

    def __init__(self, U: np.ndarray, W: np.ndarray):
        self.U = np.asarray(U, dtype=np.float64)
        self.W = np.asarray(W, dtype=np.float64)
        if self.U.shape[0] != self.W.shape[1]:
            raise ValueError("hidden sizes of U and W disagree")
        self.num_labels = self.W.shape[0]
        self.dim = self.U.shape[1]

    def hidden(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return _sigmoid(X @ self.U.T)

    def scores(self, X: np.ndarray) -> np.ndarray:
        return self.hidden(X) @ self.W.T


def _sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def _log_softmax_rows(z: np.ndarray) -> np.ndarray:
    mx = z.max(axis=1, keepdims=True)
    return z - (mx + np.log(np.exp(z - mx).sum(axis=1, keepdims=True)))


def logistic_objective(clf, problem: BiasedLogRegProblem) -> float:
    """Biased log-likelihood, summed over rows.  Higher is better."""
    z = clf.scores(problem.features) + problem.biases
    logp = _log_softmax_rows(z)
    val = float(logp[np.arange(problem.num_rows), problem.gold].sum())
    if not np.isfinite(val):
        raise RuntimeError("non-finite logistic objective")
    return val


def _residuals(clf, problem: BiasedLogRegProblem) -> np.ndarray:
    """indicator(gold) - softmax(scores + biases), one row per example."""
    z = clf.scores(problem.features) + problem.biases
    p = np.exp(_log_softmax_rows(z))
    p[np.arange(problem.num_rows), problem.gold] -= 1.0
    return -p


def logistic_gradient(clf, problem: BiasedLogRegProblem) -> dict:
    """Gradient of the objective w.r.t. all parameters, by name."""
    r = _residuals(clf, problem)
    if clf.kind == "const":
        return {"offsets": r.sum(axis=0)}
    if clf.kind == "linear":
        return {"W": r.T @ problem.features}
    if clf.kind == "mlp":
        h = clf.hidden(problem.features)
        dW = r.T @ h
        back = (r @ clf.W) * h * (1.0 - h)
        return {"U": back.T @ problem.features, "W": dW}
    raise ValueError(f"no parametric gradient for kind {clf.kind!r}")


def predict_scores(clf, x: np.ndarray) -> np.ndarray:
    """Scores of a single feature vector as a flat (num_labels,)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected one feature vector, got shape {x.shape}")
    return clf.scores(x[None, :])[0]


def fit_zero(problem: BiasedLogRegProblem,
             config: FitConfig | None = None,
             init=None) -> ZeroClassifier:
    return ZeroClassifier(problem.num_labels, problem.dim)


def fit_constant(problem: BiasedLogRegProblem,
                 config: FitConfig | None = None,
                 init=None) -> ConstantClassifier:
    """Batch L-BFGS over the per-label offsets.

    The objective is invariant to a common shift, so the result is
    centered to mean zero.
    """
    from scipy.optimize import minimize

    config = config or FitConfig()
    L = problem.num_labels
    c0 = np.zeros(L)
    if init is not None and init.kind == "const" and config.warm_start:
        c0 = init.offsets.copy()

    def negobj(c):
        return -logistic_objective(ConstantClassifier(c, problem.dim),
                                   problem)

    def neggrad(c):
        clf = ConstantClassifier(c, problem.dim)
        return -logistic_gradient(clf, problem)["offsets"]

    res = minimize(negobj, c0, jac=neggrad, method="L-BFGS-B",
                   options=dict(maxiter=config.linear_max_iter,
                                ftol=config.linear_tol,
                                gtol=config.linear_tol))
    c = res.x - res.x.mean()
    out = ConstantClassifier(c, problem.dim)
    zero = ZeroClassifier(L, problem.dim)
    if logistic_objective(out, problem) < logistic_objective(zero, problem):
        return ConstantClassifier(np.zeros(L), problem.dim)
    return out


def fit_linear(problem: BiasedLogRegProblem,
               config: FitConfig | None = None,
               init=None) -> LinearClassifier:
    """Batch L-BFGS on the biased likelihood, warm-startable."""
    from scipy.optimize import minimize

    config = config or FitConfig()
    L, d = problem.num_labels, problem.dim
    if init is not None and init.kind == "linear" and config.warm_start:
        w0 = init.W.ravel().copy()
    else:
        w0 = np.zeros(L * d)

    def negobj(w):
        clf = LinearClassifier(w.reshape(L, d))
        return -logistic_objective(clf, problem)

    def neggrad(w):
        clf = LinearClassifier(w.reshape(L, d))
        return -logistic_gradient(clf, problem)["W"].ravel()

    res = minimize(negobj, w0, jac=neggrad, method="L-BFGS-B",
                   options=dict(maxiter=config.linear_max_iter,
                                ftol=config.linear_tol,
                                gtol=config.linear_tol))
    clf = LinearClassifier(res.x.reshape(L, d))
    zero = ZeroClassifier(L, d)
    if logistic_objective(clf, problem) < logistic_objective(zero, problem):
        res = minimize(negobj, np.zeros(L * d), jac=neggrad,
                       method="L-BFGS-B",
                       options=dict(maxiter=config.linear_max_iter,
                                    ftol=config.linear_tol,
                                    gtol=config.linear_tol))
        clf = LinearClassifier(res.x.reshape(L, d))
    return clf


def fit_mlp(problem: BiasedLogRegProblem,
            config: FitConfig | None = None,
            init=None) -> MlpClassifier:
    """Heavy-ball minibatch SGD on the biased likelihood.

    velocity = 0.1 * minibatch mean gradient + 0.9 * velocity, then
    params += lr * velocity.  If the trained net ends below the zero
    baseline on the full objective, the output layer is zeroed.
    """
    config = config or FitConfig()
    L, d = problem.num_labels, problem.dim
    rng = np.random.default_rng(config.seed)
    if init is not None and init.kind == "mlp" and config.warm_start:
        U = init.U.copy()
        W = init.W.copy()
    else:
        h = config.mlp_hidden
        U = rng.normal(scale=1.0 / np.sqrt(d), size=(h, d))
        W = rng.normal(scale=1.0 / np.sqrt(h), size=(L, h))
    vU = np.zeros_like(U)
    vW = np.zeros_like(W)
    K = problem.num_rows
    bs = min(config.mlp_batch, K)
    for _ in range(config.mlp_epochs):
        perm = rng.permutation(K)
        for lo in range(0, K, bs):
            rows = perm[lo:lo + bs]
            sub = BiasedLogRegProblem(problem.features[rows],
                                      problem.gold[rows],
                                      problem.biases[rows], L)
            clf = MlpClassifier(U, W)
            g = logistic_gradient(clf, sub)
            scale = 1.0 / rows.shape[0]
            vU = 0.1 * (g["U"] * scale) + 0.9 * vU
            vW = 0.1 * (g["W"] * scale) + 0.9 * vW
            U = U + config.mlp_lr * vU
            W = W + config.mlp_lr * vW
    clf = MlpClassifier(U, W)
    zero = ZeroClassifier(L, d)
    if logistic_objective(clf, problem) < logistic_objective(zero, problem):
        clf = MlpClassifier(U, np.zeros_like(W))
    return clf


# ---------------------------------------------------------------------------
# serialization: little-endian binary, one classifier per blob
#
#   magic "SLCF" | u32 version=1 | u8 kind | u32 num_labels | u32 dim |
#   kind-specific payload (f8 arrays in row-major order; boosted trees
#   as per-class tree lists, each tree in preorder with parallel
#   feature/threshold/left/right/value arrays, feature -1 marking a
#   leaf).
# ---------------------------------------------------------------------------

_MAGIC = b"SLCF"
_VERSION = 1
_KIND_TAGS = {k: i for i, k in enumerate(KINDS)}


def _write_arr(buf, arr, dtype):
    arr = np.ascontiguousarray(arr, dtype=dtype)
    buf.write(struct.pack("<I", arr.size))
    buf.write(arr.tobytes())


def _read_arr(buf, dtype, shape=None):
    (n,) = struct.unpack("<I", _take(buf, 4))
    itemsize = np.dtype(dtype).itemsize
    arr = np.frombuffer(_take(buf, n * itemsize), dtype=dtype).copy()
    return arr if shape is None else arr.reshape(shape)


def _take(buf, n):
    data = buf.read(n)
    if len(data) != n:
        raise ValueError("truncated classifier blob")
    return data


def save_classifier(clf) -> bytes:
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<IBII", _VERSION, _KIND_TAGS[clf.kind],
                          clf.num_labels, clf.dim))
    if clf.kind == "zero":
        pass
    elif clf.kind == "const":
        _write_arr(buf, clf.offsets, "<f8")
    elif clf.kind == "linear":
        _write_arr(buf, clf.W, "<f8")
    elif clf.kind == "mlp":
        buf.write(struct.pack("<I", clf.U.shape[0]))
        _write_arr(buf, clf.U, "<f8")
        _write_arr(buf, clf.W, "<f8")
    elif clf.kind == "boost":
        buf.write(struct.pack("<I", len(clf.trees)))
        for per_class in clf.trees:
            buf.write(struct.pack("<I", len(per_class)))
            for tree in per_class:
                _write_arr(buf, tree.feature, "<i4")
                _write_arr(buf, tree.threshold, "<f8")
                _write_arr(buf, tree.left, "<i4")
                _write_arr(buf, tree.right, "<i4")
                _write_arr(buf, tree.value, "<f8")
    else:
        raise ValueError(f"unknown kind {clf.kind!r}")
    return buf.getvalue()


def load_classifier(data) -> object:
    buf = io.BytesIO(data) if isinstance(data, (bytes, bytearray)) else data
    if _take(buf, 4) != _MAGIC:
        raise ValueError("bad classifier magic")
    version, tag, L, d = struct.unpack("<IBII", _take(buf, 13))
    if version != _VERSION:
        raise ValueError(f"unsupported classifier version {version}")
    if tag >= len(KINDS):
        raise ValueError(f"unknown classifier kind tag {tag}")
    kind = KINDS[tag]
    if kind == "zero":
        return ZeroClassifier(L, d)
    if kind == "const":
        return ConstantClassifier(_read_arr(buf, "<f8", (L,)), d)
    if kind == "linear":
        return LinearClassifier(_read_arr(buf, "<f8", (L, d)))
    if kind == "mlp":
        (h,) = struct.unpack("<I", _take(buf, 4))
        U = _read_arr(buf, "<f8", (h, d))
        W = _read_arr(buf, "<f8", (L, h))
        return MlpClassifier(U, W)
    from .gbt import BoostedTreesClassifier, RegressionTree
    (nclass,) = struct.unpack("<I", _take(buf, 4))
    trees = []
    for _ in range(nclass):
        (ntree,) = struct.unpack("<I", _take(buf, 4))
        per_class = []
        for _ in range(ntree):
            feature = _read_arr(buf, "<i4")
            threshold = _read_arr(buf, "<f8")
            left = _read_arr(buf, "<i4")
            right = _read_arr(buf, "<i4")
            value = _read_arr(buf, "<f8")
            per_class.append(RegressionTree(feature, threshold, left,
                                            right, value))
        trees.append(per_class)
    return BoostedTreesClassifier(L, d, trees)
