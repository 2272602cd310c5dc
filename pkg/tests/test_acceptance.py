"""End-to-end behavioral acceptance: inference identities, oracle
optimality, the full denoising benchmark table, and the image pipeline.

Each test prints one [PASS]/[FAIL] line with the measured numbers
(visible with ``pytest -s``) and then asserts.  The benchmark table
trains real models; at the default reduced scale (8+8 images, 50x50)
the module takes roughly fifteen minutes on one core.  Setting
``STRUCTLOGIT_FULL_SCALE=1`` switches to the full protocol (16+16
images, 100x100) with tighter error bands; expect more than an hour.
"""

import os
import time

import numpy as np
import pytest
from scipy.special import logsumexp

from structlogit import (
    GenConfig,
    Messages,
    Potentials,
    SmoothingConfig,
    build_theta,
    entropy_cap,
    exhaustive_l1,
    gen_denoising,
    hamming_tables,
    smoothed_loss,
)
from structlogit.data import Dataset, Example, extract_image_features, \
    load_dataset, load_pnm, save_dataset, write_label_image
from structlogit.gbt import fit_gbt
from structlogit.graph import RegionGraph, build_grid
from structlogit.inference import (agreement_residual, brute_smoothed_value,
                                   compute_marginals, dual_objective,
                                   run_message_passing, star_update)
from structlogit.loss import energy
from structlogit.oracle import (KINDS, BiasedLogRegProblem, FitConfig,
                                LinearClassifier, MlpClassifier,
                                fit_linear, logistic_gradient,
                                logistic_objective)
from structlogit.trainer import (TrainConfig, assemble_tied_problem, predict,
                                 train, univariate_error)

from conftest import random_theta, random_tree

FULL_SCALE = os.environ.get("STRUCTLOGIT_FULL_SCALE", "") == "1"

# The benchmark protocol: eps 0.1, 20 outer iterations, 25 sweeps per
# half-step, error read at iteration 20.  At the reduced scale each
# MLP epoch sees an 8x smaller row pool, so the epoch count is raised
# to keep the error bands reachable.
if FULL_SCALE:
    _SCALE = dict(num=16, size=100, relax=0.0, mlp_epochs=5)
else:
    _SCALE = dict(num=8, size=50, relax=0.02, mlp_epochs=80)

_KIND_INDEX = {k: i for i, k in enumerate(KINDS)}


def _report(ok: bool, name: str, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


def _cell_seed(base: int, ui: int, pi: int) -> int:
    return int(np.random.SeedSequence((base, ui, pi)).generate_state(1)[0])


class TestInferenceIdentities:
    def test_single_node_closed_form(self):
        # on one variable the smoothed value has the closed form
        # rho * logsumexp(theta / rho); the reference maximizer must
        # find the same number across three decades of rho
        rng = np.random.default_rng(0)
        t0 = time.perf_counter()
        worst = 0.0
        for _ in range(100):
            L = int(rng.integers(2, 7))
            rho = float(np.exp(rng.uniform(np.log(0.01), np.log(10.0))))
            g = RegionGraph(1, L, [])
            theta = Potentials(rng.normal(scale=2.0, size=(1, L)),
                               np.zeros((0, L, L)))
            closed = rho * logsumexp(theta.nodes[0] / rho)
            worst = max(worst, abs(closed
                                   - brute_smoothed_value(g, theta, rho)))
        took = time.perf_counter() - t0
        ok = worst <= 1e-6 and took < 10.0
        _report(ok, "single-node closed form",
                f"worst |closed - brute| = {worst:.2e} over 100 instances "
                f"({took:.1f}s)")

    def test_converged_dual_matches_brute(self):
        rng = np.random.default_rng(1)
        t0 = time.perf_counter()
        worst_v = worst_r = 0.0
        for _ in range(50):
            g = RegionGraph(3, 2, [(0, 1), (1, 2)])
            theta = Potentials(rng.normal(size=(3, 2)),
                               rng.normal(size=(2, 2, 2)))
            cfg = SmoothingConfig(epsilon=0.1, max_iters=2000,
                                  agreement_tol=1e-10)
            lam, _, _ = run_message_passing(g, theta, Messages.zeros(g), cfg)
            dual = dual_objective(g, theta, lam, 0.1)
            mu = compute_marginals(g, theta, lam, 0.1)
            worst_v = max(worst_v,
                          abs(dual - brute_smoothed_value(g, theta, 0.1)))
            worst_r = max(worst_r, agreement_residual(g, mu))
        took = time.perf_counter() - t0
        ok = worst_v <= 1e-4 and worst_r <= 1e-8 and took < 30.0
        _report(ok, "converged dual equals brute value",
                f"worst |dual - brute| = {worst_v:.2e}, worst agreement "
                f"residual = {worst_r:.2e} over 50 chains ({took:.1f}s)")

    def test_star_updates_never_increase_dual(self):
        rng = np.random.default_rng(2)
        worst = -np.inf
        count = 0
        for trial in range(20):
            g = build_grid(5, 5, 2)
            eps = float(rng.choice([0.05, 0.1, 0.5, 1.0]))
            theta = Potentials(rng.normal(scale=2.0, size=(25, 2)),
                               rng.normal(scale=2.0, size=(g.num_edges,
                                                           2, 2)))
            lam = Messages.zeros(g)
            lam.lam[:] = rng.normal(size=lam.lam.shape)
            before = dual_objective(g, theta, lam, eps)
            for _ in range(50):
                v = int(rng.integers(g.num_vars))
                lam = star_update(g, theta, lam, v, eps)
                after = dual_objective(g, theta, lam, eps)
                worst = max(worst, after - before)
                before = after
                count += 1
        ok = worst <= 1e-9
        _report(ok, "star updates never increase the dual",
                f"worst increase = {worst:.2e} over {count} updates")

    def test_smoothed_loss_sandwich(self):
        rng = np.random.default_rng(3)
        worst_lo = worst_hi = -np.inf
        for trial in range(50):
            n = int(rng.integers(2, 11))
            g = random_tree(rng, n, 2)
            scores = random_theta(rng, g, scale=1.5)
            gold = rng.integers(0, 2, size=n)
            eps = float(rng.choice([0.05, 0.1, 0.3]))
            l1 = exhaustive_l1(g, gold, scores, eps)
            l = smoothed_loss(g, gold, scores, eps)
            cap = entropy_cap(g)
            worst_lo = max(worst_lo, l1 - l)
            worst_hi = max(worst_hi, l - (l1 + eps * cap))
        ok = worst_lo <= 1e-6 and worst_hi <= 1e-6
        _report(ok, "smoothing sandwich on trees",
                f"worst l1 - l = {worst_lo:.2e}, worst l - (l1 + eps*cap) "
                f"= {worst_hi:.2e} over 50 trees")


class TestOracleOptimality:
    def test_joint_objective_stationary_after_linear_fit(self):
        # the alternating scheme treats each fit as exact block
        # minimization, so after fitting both roles at fixed messages
        # the actual joint objective must be flat in every direction
        tr, _ = gen_denoising(GenConfig(num_train=1, num_test=0, width=3,
                                        height=3, blur_sigma=1.0, seed=5))
        ex = tr[0]
        g = ex.graph
        eps = 0.1
        L = g.num_labels
        rng = np.random.default_rng(42)
        lam = Messages.zeros(g)
        lam.lam[:] = 0.3 * rng.standard_normal(lam.lam.shape)
        delta = hamming_tables(g, ex.gold)
        ds = Dataset([ex], tr.num_labels, tr.d_unary, tr.d_pairwise)

        cfg = FitConfig(linear_max_iter=5000, linear_tol=1e-15,
                        warm_start=False)
        Wu = fit_linear(assemble_tied_problem(ds, [lam], [delta], "unary",
                                              eps), cfg).W
        Wp = fit_linear(assemble_tied_problem(ds, [lam], [delta], "pairwise",
                                              eps), cfg).W

        def joint(wu, wp):
            scores = Potentials(ex.unary @ wu.T,
                                (ex.pairwise @ wp.T).reshape(g.num_edges,
                                                             L, L))
            th = build_theta(g, scores, delta, eps)
            return (-energy(g, scores, ex.gold, eps)
                    + dual_objective(g, th, lam, eps))

        p0 = np.concatenate([Wu.ravel(), Wp.ravel()])
        nu = Wu.size

        def joint_flat(p):
            return joint(p[:nu].reshape(Wu.shape), p[nu:].reshape(Wp.shape))

        h = 1e-5
        worst = 0.0
        for _ in range(10):
            u = rng.standard_normal(p0.size)
            u /= np.linalg.norm(u)
            dd = (joint_flat(p0 + h * u) - joint_flat(p0 - h * u)) / (2 * h)
            worst = max(worst, abs(dd))
        ok = worst <= 1e-5
        _report(ok, "joint objective stationary after linear fits",
                f"worst |directional derivative| = {worst:.2e} "
                f"over 10 directions")

    def test_logistic_gradients_match_central_differences(self):
        worst = 0.0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            K, d, L, hdim = 40, 4, 3, 8
            prob = BiasedLogRegProblem(rng.normal(size=(K, d)),
                                       rng.integers(0, L, size=K),
                                       rng.normal(size=(K, L)), L)
            clfs = [LinearClassifier(rng.normal(size=(L, d))),
                    MlpClassifier(rng.normal(size=(hdim, d)),
                                  rng.normal(size=(L, hdim)))]
            for clf in clfs:
                grads = logistic_gradient(clf, prob)
                for name, ga in grads.items():
                    tensor = getattr(clf, name)
                    gn = np.empty_like(ga)
                    h = 1e-6
                    for idx in np.ndindex(tensor.shape):
                        orig = tensor[idx]
                        tensor[idx] = orig + h
                        up = logistic_objective(clf, prob)
                        tensor[idx] = orig - h
                        dn = logistic_objective(clf, prob)
                        tensor[idx] = orig
                        gn[idx] = (up - dn) / (2 * h)
                    rel = (np.linalg.norm(ga - gn)
                           / max(np.linalg.norm(gn), 1e-8))
                    worst = max(worst, rel)
        ok = worst <= 1e-4
        _report(ok, "logistic gradients match central differences",
                f"worst relative error = {worst:.2e} over 20 seeds, "
                f"linear and mlp")

    def test_boosted_trees_leaf_floor_and_monotone_rounds(self):
        rng = np.random.default_rng(7)
        K, d, L = 400, 5, 3
        X = rng.normal(size=(K, d))
        y = ((X[:, 0] * X[:, 1] > 0).astype(int)
             + (X[:, 2] > 0.5).astype(int))
        prob = BiasedLogRegProblem(X, y, 0.3 * rng.normal(size=(K, L)), L)

        floor = int(np.ceil(0.05 * K))
        min_cover = K
        n_trees = 0
        clf = None
        objs = []
        for r in range(8):
            clf = fit_gbt(prob, FitConfig(gbt_rounds=1, gbt_subsample=1.0,
                                          seed=r), init=clf)
            objs.append(logistic_objective(clf, prob))
            for per_class in clf.trees:
                tree = per_class[-1]
                counts = np.bincount(tree.leaf_of(X),
                                     minlength=len(tree.feature))
                leaves = tree.feature < 0
                min_cover = min(min_cover, int(counts[leaves].min()))
                n_trees += 1
        drops = [b - a for a, b in zip(objs, objs[1:])]
        worst_drop = min(drops) if drops else 0.0
        ok = min_cover >= floor and worst_drop >= -1e-9
        _report(ok, "boosted trees leaf floor and monotone rounds",
                f"smallest leaf covers {min_cover} rows (floor {floor}) "
                f"over {n_trees} trees; worst round-to-round objective "
                f"change = {worst_drop:+.2e}")


@pytest.fixture(scope="module")
def table_curves():
    """Test-error curves of the benchmark cells, trained on demand.

    Cell seeds derive from (base 0, unary index, pairwise index) so
    every cell is reproducible in isolation.
    """
    cfg = GenConfig(num_train=_SCALE["num"], num_test=_SCALE["num"],
                    width=_SCALE["size"], height=_SCALE["size"],
                    blur_sigma=10.0, seed=2)
    tr, te = gen_denoising(cfg)
    cache = {}

    def curve(unary: str, pairwise: str) -> list:
        key = (unary, pairwise)
        if key not in cache:
            kw = {}
            if "mlp" in key:
                ep = _SCALE["mlp_epochs"]
                kw = dict(unary_fit=FitConfig(mlp_epochs=ep),
                          pairwise_fit=FitConfig(mlp_lr=0.05, mlp_epochs=ep))
            tc = TrainConfig(outer_iters=20,
                             unary_kind=unary, pairwise_kind=pairwise,
                             seed=_cell_seed(0, _KIND_INDEX[unary],
                                             _KIND_INDEX[pairwise]), **kw)
            _, curves = train(tr, te, tc)
            cache[key] = [row[2] for row in curves]
        return cache[key]

    return curve


class TestDenoisingBenchmark:
    def test_denoising_error_table(self, table_curves):
        # test error at iteration 20 for the seven reported cells
        r = _SCALE["relax"]
        e = {key: table_curves(*key)[19]
             for key in [("zero", "zero"), ("const", "const"),
                         ("linear", "linear"), ("boost", "boost"),
                         ("mlp", "mlp"), ("linear", "zero"),
                         ("linear", "const")]}
        checks = [
            ("Zero/Zero", e["zero", "zero"],
             0.45 - r <= e["zero", "zero"] <= 0.55 + r,
             f"in [{0.45 - r:.2f}, {0.55 + r:.2f}]"),
            ("Const./Const.", e["const", "const"],
             0.45 - r <= e["const", "const"] <= 0.55 + r,
             f"in [{0.45 - r:.2f}, {0.55 + r:.2f}]"),
            ("Linear/Linear", e["linear", "linear"],
             e["linear", "linear"] <= 0.09 + r, f"<= {0.09 + r:.2f}"),
            ("Boost./Boost.", e["boost", "boost"],
             e["boost", "boost"] <= 0.03 + r, f"<= {0.03 + r:.2f}"),
            ("MLP/MLP", e["mlp", "mlp"],
             e["mlp", "mlp"] <= 0.03 + r, f"<= {0.03 + r:.2f}"),
            ("Linear/Zero > Linear/Const.", e["linear", "zero"],
             e["linear", "zero"] > e["linear", "const"],
             f"{e['linear', 'zero']:.3f} > {e['linear', 'const']:.3f}"),
        ]
        detail = "; ".join(f"{name}={val:.4f} ({want})"
                           for name, val, _, want in checks)
        _report(all(ok for _, _, ok, _ in checks),
                "denoising error table", detail)

    def test_boosting_converges_in_half_the_iterations(self, table_curves):
        lin = table_curves("linear", "linear")
        boo = table_curves("boost", "boost")

        def first_within(curve):
            band = curve[-1] * 1.1
            return next(i for i, v in enumerate(curve, 1) if v <= band)

        tb, tl = first_within(boo), first_within(lin)
        ok = tb <= tl / 2
        _report(ok, "boosting converges in half the iterations",
                f"boosting within 10% of final at iteration {tb}, "
                f"linear at {tl} (need {tb} <= {tl / 2:.1f})")


class TestImagePipeline:
    def test_image_pipeline_end_to_end(self, tmp_path):
        # color pixmaps in, label maps out, with a dataset file and a
        # trained model in between
        rng = np.random.default_rng(11)
        W, H = 8, 6
        names = []
        for k in range(3):
            gold = np.zeros((H, W), dtype=np.uint8)
            x0, y0 = 1 + k, 1 + (k % 2)
            gold[y0:y0 + 3, x0:x0 + 4] = 1
            rgb = np.empty((H, W, 3), dtype=np.uint8)
            base = np.where(gold == 1, 200, 60)
            for c, jitter in enumerate((12, 8, 15)):
                rgb[:, :, c] = np.clip(
                    base + rng.integers(-jitter, jitter, size=(H, W)),
                    0, 255)
            img = tmp_path / f"img_{k}.ppm"
            lab = tmp_path / f"lab_{k}.pgm"
            img.write_bytes(b"P6\n%d %d\n255\n" % (W, H) + rgb.tobytes())
            lab.write_bytes(b"P5\n%d %d\n255\n" % (W, H)
                            + (gold * 255).tobytes())
            names.append((img, lab))

        examples = []
        for img, lab in names:
            rgb = load_pnm(str(img))
            ex = extract_image_features(rgb)
            gold = np.rint(load_pnm(str(lab))).astype(int).ravel()
            examples.append(Example(ex.graph, ex.unary, ex.pairwise, gold,
                                    ex.dims))
        ds = Dataset(examples, 2, examples[0].unary.shape[1],
                     examples[0].pairwise.shape[1])
        path = tmp_path / "toy.txt"
        save_dataset(ds, str(path))
        back = load_dataset(str(path))
        assert len(back) == 3

        tc = TrainConfig(outer_iters=1, mp_iters=5, test_mp_iters=40,
                         unary_kind="linear", pairwise_kind="linear",
                         seed=0)
        model, curves = train(back, None, tc)
        preds = [predict(model, ex, mp_iters=40) for ex in back]
        err = univariate_error(preds, [ex.gold for ex in back])

        out = tmp_path / "pred_0.pgm"
        write_label_image(preds[0], back[0].dims, 2, str(out))
        again = np.rint(load_pnm(str(out))).astype(int).ravel()
        ok = (again == preds[0]).all() and 0.0 <= err <= 0.5
        _report(ok, "image pipeline end to end",
                f"3 pixmaps -> dataset -> 1 training iteration -> "
                f"predictions, train error {err:.3f}, label image "
                f"round-trips exactly")
