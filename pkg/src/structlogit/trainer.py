"""Alternating training: biased logistic oracles + message passing.

Minimizing the summed smoothed losses over examples is equivalent, for
fixed messages, to maximizing one tied biased logistic regression per
region kind whose row biases

    b_a = (Delta_a + messages into a - messages out of a) / eps

fold the current dual state into the per-region partition functions.
Training alternates: fit the unary classifier on all node rows, rebuild
scores, run a fixed budget of message-passing sweeps per example, then
the same for the pairwise classifier.  The joint objective

    J = sum_k [ -F_k(gold) + dual(theta_k, lam_k) ]

never increases under message passing, nor under a fit step whose
oracle does not regress; L-BFGS and warm-started boosting guarantee
that, minibatch SGD does not.

Edge rows are a single multiclass problem over the L*L joint label
``y_i * L + y_j``; rows across examples share one classifier per kind
(example-major, region-index order).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import oracle as _oracle
from .data import Dataset, Example
from .gbt import fit_gbt
from .graph import RegionGraph
from .inference import (Messages, Potentials, SmoothingConfig,
                        compute_marginals, decode, dual_objective,
                        run_message_passing)
from .loss import LossTables, build_theta, energy, hamming_tables
from .oracle import (BiasedLogRegProblem, FitConfig, ZeroClassifier,
                     fit_constant, fit_linear, fit_mlp, fit_zero,
                     load_classifier, save_classifier)

__all__ = [
    "BiasTables", "Model", "TrainConfig", "compute_biases", "model_scores",
    "assemble_tied_problem", "train", "predict", "univariate_error",
    "save_model", "load_model",
]

_FITTERS = {
    "zero": fit_zero,
    "const": fit_constant,
    "linear": fit_linear,
    "mlp": fit_mlp,
    "boost": fit_gbt,
}


@dataclass
class BiasTables:
    """Per-region logistic biases, same layout as Potentials."""

    nodes: np.ndarray
    edges: np.ndarray


@dataclass
class Model:
    """Tied unary and pairwise classifiers plus the smoothing scale."""

    unary: object
    pairwise: object
    eps: float
    num_labels: int
    d_unary: int
    d_pairwise: int


@dataclass
class TrainConfig:
    eps: float = 0.1
    outer_iters: int = 20
    mp_iters: int = 25
    unary_kind: str = "linear"
    pairwise_kind: str = "linear"
    seed: int = 0
    agreement_tol: float = 1e-6
    test_mp_iters: int = 200
    unary_fit: FitConfig = field(default_factory=FitConfig)
    pairwise_fit: FitConfig = field(default_factory=lambda: FitConfig(
        mlp_lr=0.05))
    track_joint: bool = False
    n_jobs: int = 1

    def __post_init__(self):
        for kind in (self.unary_kind, self.pairwise_kind):
            if kind not in _FITTERS:
                raise ValueError(f"unknown classifier kind {kind!r}")
        if not (self.eps > 0 and np.isfinite(self.eps)):
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.outer_iters < 0 or self.mp_iters < 0:
            raise ValueError("iteration counts must be >= 0")


def compute_biases(graph: RegionGraph, lam: Messages, delta: LossTables,
                   eps: float) -> BiasTables:
    """Logistic-regression biases of one example at the current messages.

    Node regions receive what their incident edges send, negatively;
    edge regions receive their own messages, positively.  Dividing by
    eps makes ``eps * (scores + biases)`` exactly the reparameterized
    tables of loss-augmented inference.
    """
    bn = delta.nodes.copy()
    np.subtract.at(bn, graph.edge_i, lam.lam[:, 0, :])
    np.subtract.at(bn, graph.edge_j, lam.lam[:, 1, :])
    be = delta.edges + lam.lam[:, 0, :, None] + lam.lam[:, 1, None, :]
    return BiasTables(bn / eps, be / eps)


def model_scores(model: Model, ex: Example) -> Potentials:
    """Score tables g of one example under the model's classifiers."""
    L = model.num_labels
    nodes = model.unary.scores(ex.unary)
    edges = model.pairwise.scores(ex.pairwise).reshape(
        ex.graph.num_edges, L, L)
    return Potentials(nodes, edges)


def _edge_gold(graph: RegionGraph, gold: np.ndarray, L: int) -> np.ndarray:
    return gold[graph.edge_i] * L + gold[graph.edge_j]


def assemble_tied_problem(ds: Dataset, lams: list, deltas: list, kind: str,
                          eps: float) -> BiasedLogRegProblem:
    """Stack the per-region rows of every example into one problem.

    Rows are example-major and, inside an example, in region index
    order.  ``kind`` is "unary" (node rows, L labels) or "pairwise"
    (edge rows, L*L joint labels).
    """
    if kind not in ("unary", "pairwise"):
        raise ValueError(f"kind must be 'unary' or 'pairwise', got {kind!r}")
    L = ds.num_labels
    feats, golds, biases = [], [], []
    for ex, lam, delta in zip(ds, lams, deltas):
        bt = compute_biases(ex.graph, lam, delta, eps)
        if kind == "unary":
            feats.append(ex.unary)
            golds.append(ex.gold)
            biases.append(bt.nodes)
        else:
            feats.append(ex.pairwise)
            golds.append(_edge_gold(ex.graph, ex.gold, L))
            biases.append(bt.edges.reshape(ex.graph.num_edges, L * L))
    return BiasedLogRegProblem(np.concatenate(feats),
                               np.concatenate(golds),
                               np.concatenate(biases),
                               L if kind == "unary" else L * L)


def _fit_seed(base: int, iteration: int, role: int) -> int:
    ss = np.random.SeedSequence((base, iteration, role))
    return int(ss.generate_state(1)[0])


def _map(fn, items, n_jobs: int):
    if n_jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, items))


def train(train_ds: Dataset, test_ds: Dataset | None,
          config: TrainConfig) -> tuple[Model, list]:
    """Alternating oracle fits and message passing.

    Returns the model and one curve row per outer iteration:
    ``(iteration, train_error, test_error)`` (test error None without a
    test set).  With ``track_joint`` the rows gain a fourth element, the
    list of joint objective values recorded after each of the four
    substeps.
    """
    if len(train_ds) == 0:
        raise ValueError("empty training set")
    for k, ex in enumerate(train_ds):
        if ex.gold is None:
            raise ValueError(f"training example {k} has no labels")

    L = train_ds.num_labels
    eps = config.eps
    unary = ZeroClassifier(L, train_ds.d_unary)
    pairwise = ZeroClassifier(L * L, train_ds.d_pairwise)
    model = Model(unary, pairwise, eps, L, train_ds.d_unary,
                  train_ds.d_pairwise)

    lams = [Messages.zeros(ex.graph) for ex in train_ds]
    deltas = [hamming_tables(ex.graph, ex.gold) for ex in train_ds]
    mp_cfg = SmoothingConfig(epsilon=eps, max_iters=config.mp_iters,
                             agreement_tol=config.agreement_tol)

    def thetas():
        return [build_theta(ex.graph, model_scores(model, ex), delta, eps)
                for ex, delta in zip(train_ds, deltas)]

    def joint(ths):
        total = 0.0
        for ex, lam, th in zip(train_ds, lams, ths):
            total -= energy(ex.graph, model_scores(model, ex), ex.gold, eps)
            total += dual_objective(ex.graph, th, lam, eps)
        return total

    def mp_pass(ths):
        def one(args):
            ex, lam, th = args
            out, _, _ = run_message_passing(ex.graph, th, lam, mp_cfg)
            return out
        new = _map(one, list(zip(train_ds, lams, ths)), config.n_jobs)
        lams[:] = new

    curves = []
    for it in range(1, config.outer_iters + 1):
        trace = []
        for role, kind_name in ((0, "unary"), (1, "pairwise")):
            kind = config.unary_kind if role == 0 else config.pairwise_kind
            fit_cfg = replace(
                config.unary_fit if role == 0 else config.pairwise_fit,
                seed=_fit_seed(config.seed, it, role))
            prob = assemble_tied_problem(train_ds, lams, deltas, kind_name,
                                         eps)
            init = model.unary if role == 0 else model.pairwise
            try:
                fitted = _FITTERS[kind](prob, fit_cfg, init=init)
            except Exception as e:
                raise RuntimeError(
                    f"iteration {it}: {kind_name} oracle ({kind}) failed: "
                    f"{e}") from e
            if role == 0:
                model.unary = fitted
            else:
                model.pairwise = fitted
            ths = thetas()
            if config.track_joint:
                trace.append(joint(ths))
            mp_pass(ths)
            if config.track_joint:
                trace.append(joint(ths))

        train_err = univariate_error(
            _map(lambda ex: predict(model, ex,
                                    mp_iters=config.test_mp_iters,
                                    tol=config.agreement_tol),
                 list(train_ds), config.n_jobs),
            [ex.gold for ex in train_ds])
        test_err = None
        if test_ds is not None and len(test_ds) > 0:
            preds = _map(lambda ex: predict(model, ex,
                                            mp_iters=config.test_mp_iters,
                                            tol=config.agreement_tol),
                         list(test_ds), config.n_jobs)
            test_err = univariate_error(preds,
                                        [ex.gold for ex in test_ds])
        row = (it, train_err, test_err)
        if config.track_joint:
            row = row + (trace,)
        curves.append(row)
    return model, curves


def predict(model: Model, ex: Example, mp_iters: int = 200,
            tol: float = 1e-6) -> np.ndarray:
    """Labels by fresh inference on the model scores (no loss term)."""
    scores = model_scores(model, ex)
    theta = Potentials(model.eps * scores.nodes, model.eps * scores.edges)
    cfg = SmoothingConfig(epsilon=model.eps, max_iters=mp_iters,
                          agreement_tol=tol)
    lam, _, _ = run_message_passing(ex.graph, theta, Messages.zeros(ex.graph),
                                    cfg)
    return decode(ex.graph, compute_marginals(ex.graph, theta, lam,
                                              model.eps))


def univariate_error(predicted, gold) -> float:
    """Fraction of mislabeled variables, pooled over all examples."""
    if isinstance(predicted, np.ndarray):
        predicted = [predicted]
    if isinstance(gold, np.ndarray):
        gold = [gold]
    if len(predicted) != len(gold):
        raise ValueError("prediction and gold counts differ")
    wrong = 0
    total = 0
    for p, g in zip(predicted, gold):
        p = np.asarray(p)
        g = np.asarray(g)
        if p.shape != g.shape:
            raise ValueError("labeling length mismatch")
        wrong += int((p != g).sum())
        total += p.size
    if total == 0:
        raise ValueError("no variables to score")
    return wrong / total


_MODEL_MAGIC = b"SLMD"
_MODEL_VERSION = 1


def save_model(model: Model, path: str) -> None:
    ub = save_classifier(model.unary)
    pb = save_classifier(model.pairwise)
    with open(path, "wb") as fh:
        fh.write(_MODEL_MAGIC)
        fh.write(struct.pack("<IdIII", _MODEL_VERSION, model.eps,
                             model.num_labels, model.d_unary,
                             model.d_pairwise))
        for blob in (ub, pb):
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)


def load_model(path: str) -> Model:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file")
    version, eps, L, du, dp = struct.unpack_from("<IdIII", data, 4)
    if version != _MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    off = 4 + struct.calcsize("<IdIII")
    blobs = []
    for _ in range(2):
        (n,) = struct.unpack_from("<Q", data, off)
        off += 8
        blobs.append(load_classifier(data[off:off + n]))
        off += n
    return Model(blobs[0], blobs[1], eps, L, du, dp)
