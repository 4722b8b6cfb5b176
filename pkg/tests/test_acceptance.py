"""Acceptance criteria, one test each, run at the stated tolerances.

Every test reports a PASS/FAIL line through the ``verdict`` fixture before
asserting, so the summary at the end of a pytest run lists all criteria.
Criterion 9 needs the MovieLens-1M files and is skipped unless
``RAID_ML1M_DIR`` points at a directory holding ``ratings.dat`` and
``users.dat``.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from raid.attack import evaluate_attack
from raid.barycenter import (
    BarycenterSolution,
    dual_objective,
    primal_objective,
    recover_alpha,
    solve_barycenter,
)
from raid.data import build_splits, ingest
from raid.ot import Histogram, cost_matrix, exact_ot_oracle, sinkhorn, w2_squared
from raid.ranking import evaluate_model
from raid.synthetic import gaussian_classes, preference_world
from raid.train import (
    EmbeddingModel,
    InteractionSet,
    TrainConfig,
    ce_gradient,
    ce_loss,
    class_couplings,
    class_histograms,
    defend_embeddings,
    defense_gradient,
    defense_loss,
    dp_perturb,
    train_raid,
)

ML1M_DIR = os.environ.get("RAID_ML1M_DIR")


def random_hist(rng, n, d):
    return Histogram(rng.normal(size=(n, d)), rng.dirichlet(np.ones(n)))


# --- 1. Sinkhorn against the exact solver ----------------------------------------


def test_c01_sinkhorn_matches_exact_oracle(verdict):
    rng = np.random.default_rng(1)
    instances = []
    for _ in range(100):
        n, m, d = rng.integers(1, 6), rng.integers(1, 6), rng.integers(1, 4)
        P, Q = random_hist(rng, n, d), random_hist(rng, m, d)
        instances.append((P.weights, Q.weights, cost_matrix(P.atoms, Q.atoms)))
    start = time.perf_counter()
    worst = 0.0
    for a, b, C in instances:
        approx = sinkhorn(a, b, C).cost(C)
        exact = exact_ot_oracle(a, b, C)[1]
        worst = max(worst, abs(approx - exact) / exact)
    elapsed = time.perf_counter() - start
    ok = worst <= 0.02 and elapsed < 5.0
    verdict(1, ok, f"worst rel err {worst:.2e}, {elapsed:.2f}s")
    assert ok


# --- 2. W2 is a metric -------------------------------------------------------------


def test_c02_w2_metric_axioms(verdict):
    rng = np.random.default_rng(2)
    worst_sym, worst_tri = 0.0, -np.inf
    for _ in range(100):
        d = rng.integers(1, 4)
        P, Q, R = (random_hist(rng, rng.integers(1, 6), d) for _ in range(3))
        pq, qp = w2_squared(P, Q), w2_squared(Q, P)
        worst_sym = max(worst_sym, abs(pq - qp))
        pr, qr = w2_squared(P, R), w2_squared(Q, R)
        slack = np.sqrt(max(pr, 0)) - np.sqrt(max(pq, 0)) - np.sqrt(max(qr, 0))
        worst_tri = max(worst_tri, slack)
    ok = worst_sym <= 1e-9 and worst_tri <= 1e-7
    verdict(2, ok, f"max asymmetry {worst_sym:.1e}, max triangle excess {worst_tri:.1e}")
    assert ok


# --- 3. dual solver ------------------------------------------------------------------


def test_c03_dual_solver_properties(verdict):
    rng = np.random.default_rng(3)
    monotone, normalized = True, True
    for _ in range(50):
        K, n_support, d = rng.integers(1, 4), rng.integers(1, 9), rng.integers(1, 4)
        hists = [random_hist(rng, rng.integers(1, 7), d) for _ in range(K)]
        support = rng.normal(size=(n_support, d))
        sol = solve_barycenter(hists, support, tau=float(rng.uniform(0.1, 2.0)), steps=200)
        monotone &= bool(np.all(np.diff(sol.history) >= 0))
        normalized &= abs(sol.alpha.sum() - 1) <= 1e-12
        g = rng.normal(size=(K, n_support))
        normalized &= abs(recover_alpha(g, sol.lam, sol.tau).sum() - 1) <= 1e-12

    hists = [random_hist(rng, n, 2) for n in (4, 5, 6)]
    support = rng.normal(size=(6, 2))
    concave = True
    for _ in range(100):
        g, h = rng.normal(size=(3, 6)), rng.normal(size=(3, 6))
        fg, fh = dual_objective(g, hists, support), dual_objective(h, hists, support)
        mid = dual_objective(0.5 * (g + h), hists, support)
        concave &= mid >= 0.5 * (fg + fh) - 1e-9
    ok = monotone and normalized and concave
    verdict(3, ok, f"monotone={monotone} normalized={normalized} concave={concave}")
    assert ok


# --- 4. barycenter of identical classes -----------------------------------------------


def test_c04_identical_classes_are_their_own_barycenter(verdict):
    rng = np.random.default_rng(4)
    h = random_hist(rng, 5, 2)
    start = time.perf_counter()
    sol = solve_barycenter([h, h, h], h.atoms, tau=1e-3, steps=2000)
    elapsed = time.perf_counter() - start
    diameter = np.sqrt(cost_matrix(h.atoms, h.atoms).max())
    dist = w2_squared(sol.histogram(), h)
    ok = dist <= 1e-3 * diameter**2 and elapsed < 10.0
    verdict(4, ok, f"W2^2 {dist:.2e} vs bound {1e-3 * diameter**2:.2e}, {elapsed:.2f}s")
    assert ok


# --- 5. primal cross-check --------------------------------------------------------------


def w2_squared_1d(x, a, y, b):
    """W2^2 on the line via quantile functions: an oracle independent of any LP."""
    ix, iy = np.argsort(x), np.argsort(y)
    x, a, y, b = x[ix], a[ix], y[iy], b[iy]
    cuts = np.unique(np.concatenate([[0.0], np.cumsum(a), np.cumsum(b)]).clip(0, 1))
    mids = 0.5 * (cuts[1:] + cuts[:-1])
    qx = x[np.minimum(np.searchsorted(np.cumsum(a), mids), len(x) - 1)]
    qy = y[np.minimum(np.searchsorted(np.cumsum(b), mids), len(y) - 1)]
    return float(np.sum(np.diff(cuts) * (qx - qy) ** 2))


def test_c05_primal_matches_grid_search(verdict):
    rng = np.random.default_rng(5)
    tau, grid = 0.1, np.round(np.arange(0, 1.0001, 0.01), 2)
    simplex = np.array([(p, q, round(1 - p - q, 2)) for p in grid for q in grid if p + q <= 1 + 1e-9])
    worst = 0.0
    for _ in range(5):
        hists = [Histogram(rng.normal(c, 1.0, size=(3, 1)), rng.dirichlet(np.ones(3))) for c in (-1.5, 1.5)]
        support = np.sort(rng.normal(0, 2, size=(3, 1)), axis=0)
        lam = np.array([0.5, 0.5])

        def primal(alpha):
            cost = sum(l * w2_squared_1d(h.atoms[:, 0], h.weights, support[:, 0], alpha)
                       for l, h in zip(lam, hists))
            pos = alpha[alpha > 0]
            return cost + tau * np.sum(pos * np.log(pos))

        best = min(primal(alpha) for alpha in simplex)
        # supergradient ascent closes the duality gap at a 1/sqrt(t) rate
        sol = solve_barycenter(hists, support, lam=lam, tau=tau, steps=20000)
        value = primal_objective(sol.alpha, hists, support, lam=lam, tau=tau)
        assert value == pytest.approx(primal(sol.alpha), abs=1e-9)
        worst = max(worst, abs(value - best) / abs(best))
    ok = worst <= 0.05
    verdict(5, ok, f"worst relative gap to grid optimum {worst:.2%}")
    assert ok


# --- 6. defense gradient ------------------------------------------------------------------


def test_c06_defense_gradient_finite_differences(verdict):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(600 + seed)
        P, labels = rng.normal(size=(5, 4)), np.array([1, 1, 2, 2, 2])
        bary = BarycenterSolution(rng.normal(size=(4, 4)), rng.dirichlet(np.ones(4)), np.zeros((2, 4)),
                                  0.0, np.full(2, 0.5), 1.0)
        couplings = [T for T, _ in class_couplings(class_histograms(P, labels), bary, method="exact")]
        grad = defense_gradient(P, labels, bary, couplings)

        def loss(X):
            return defense_loss(class_histograms(X, labels), bary, method="exact")

        fd = np.zeros_like(P)
        for idx in np.ndindex(*P.shape):
            e = np.zeros_like(P)
            e[idx] = 1e-6
            fd[idx] = (loss(P + e) - loss(P - e)) / 2e-6
        worst = max(worst, np.linalg.norm(grad - fd) / np.linalg.norm(fd))
    ok = worst <= 1e-4
    verdict(6, ok, f"worst relative error {worst:.1e}")
    assert ok


# --- 7. recommendation loss gradient ----------------------------------------------------


def test_c07_ce_gradient_finite_differences(verdict):
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(700 + seed)
        model = EmbeddingModel(rng.normal(0, 0.5, (6, 4)), rng.normal(0, 0.5, (8, 4)))
        pairs = sorted({(int(rng.integers(6)), int(rng.integers(8))) for _ in range(16)})
        batch = InteractionSet(pairs[::2], pairs[1::2])
        grads = dict(zip("PQ", ce_gradient(model, batch)))
        for name, grad in grads.items():
            table = getattr(model, name)
            fd = np.zeros_like(grad)
            for idx in np.ndindex(*table.shape):
                old = table[idx]
                table[idx] = old + 1e-6
                up = ce_loss(model, batch)
                table[idx] = old - 1e-6
                down = ce_loss(model, batch)
                table[idx] = old
                fd[idx] = (up - down) / 2e-6
            worst = max(worst, np.linalg.norm(grad - fd) / np.linalg.norm(fd))
    ok = worst <= 1e-5
    verdict(7, ok, f"worst relative error {worst:.1e}")
    assert ok


# --- 8. defense on a frozen synthetic recommender -----------------------------------------

DEFENSE = dict(eta=1.0, tau=1.0, xi=4, e2=50, mu=5.0, sinkhorn_eps_scale=0.1, seed=0)


def synthetic_defense_report():
    X, y = gaussian_classes(n_per_class=200, dim=8, shift=2.0, sigma=0.5, seed=0)
    before = evaluate_attack(X, y, seed=0)
    defended, _ = defend_embeddings(X, y, TrainConfig(**DEFENSE))
    after = evaluate_attack(defended, y, seed=0)
    return before, after


@pytest.fixture(scope="module")
def synthetic_run():
    start = time.perf_counter()
    before, after = synthetic_defense_report()
    return before, after, time.perf_counter() - start


def test_c08_synthetic_defense_efficacy(verdict, synthetic_run):
    before, after, elapsed = synthetic_run
    ok = before.bacc >= 0.90 and 0.45 <= after.bacc <= 0.55 and elapsed < 120
    verdict(8, ok, f"BAcc {before.bacc:.3f} -> {after.bacc:.3f}, {elapsed:.1f}s")
    assert ok


# --- 9. MovieLens-1M ------------------------------------------------------------------------


def ml1m_reports():
    root = Path(ML1M_DIR)
    ds = ingest(root / "ratings.dat", root / "users.dat", seed=0)
    labels = ds.labels("gender")
    reports = {}
    for name, eta in (("none", 0.0), ("raid", TrainConfig().eta)):
        model, _ = train_raid(ds.train, ds.num_users, ds.num_items, labels,
                              TrainConfig(eta=eta, embedding_dim=32, seed=0))
        known = labels > 0
        reports[name] = (evaluate_attack(model.P[known], labels[known], seed=1),
                         evaluate_model(model, ds.train, ds.test_items))
    return reports


@pytest.fixture(scope="module")
def ml1m_run():
    if not ML1M_DIR:
        pytest.skip("set RAID_ML1M_DIR to a MovieLens-1M directory to run")
    start = time.perf_counter()
    reports = ml1m_reports()
    return reports, time.perf_counter() - start


def test_c09_movielens_desk_scale(verdict, ml1m_run):
    reports, elapsed = ml1m_run
    (atk0, rec0), (atk1, rec1) = reports["none"], reports["raid"]
    invariants = all(
        all(np.diff([r.hr[k] for k in sorted(r.hr)]) >= 0)
        and all(np.diff([r.ndcg[k] for k in sorted(r.ndcg)]) >= 0)
        and all(r.ndcg[k] <= r.hr[k] for k in r.hr)
        for r in (rec0, rec1))
    checks = {
        "a": atk0.bacc >= 0.60,
        "b": atk1.bacc <= 0.55,
        "c": rec1.ndcg[10] >= 0.80 * rec0.ndcg[10],
        "d": invariants,
        "time": elapsed <= 1800,
    }
    ok = all(checks.values())
    verdict(9, ok, f"BAcc {atk0.bacc:.3f} -> {atk1.bacc:.3f}, NDCG@10 {rec0.ndcg[10]:.4f} -> "
                   f"{rec1.ndcg[10]:.4f}, {elapsed:.0f}s, failed={[k for k, v in checks.items() if not v]}")
    assert ok


# --- 10. RAID against output perturbation at matched privacy ---------------------------------


def test_c10_raid_beats_dp_at_matched_bacc(verdict):
    ratings, labels = preference_world(seed=0)
    ds = build_splits(ratings, seed=0, user_attributes={str(u + 1): {"gender": int(c)}
                                                        for u, c in enumerate(labels)})
    y = ds.labels("gender")
    base = dict(mu=10.0, e1=20, e2=20, embedding_dim=16, seed=0)

    def fit(eta):
        return train_raid(ds.train, ds.num_users, ds.num_items, y, TrainConfig(eta=eta, **base))[0]

    raid = fit(10.0)
    plain = fit(0.0)
    raid_bacc = evaluate_attack(raid.P, y, seed=1).bacc
    raid_ndcg = evaluate_model(raid, ds.train, ds.test_items).ndcg[10]

    def dp(sigma):
        model = dp_perturb(plain, sigma, seed=0)
        return evaluate_attack(model.P, y, seed=1).bacc, model

    # attack accuracy falls as the noise grows; bisect for the matching sigma
    lo, hi = 0.0, 4.0
    for _ in range(14):
        sigma = 0.5 * (lo + hi)
        bacc, model = dp(sigma)
        if abs(bacc - raid_bacc) <= 0.005:
            break
        lo, hi = (sigma, hi) if bacc > raid_bacc else (lo, sigma)
    dp_ndcg = evaluate_model(model, ds.train, ds.test_items).ndcg[10]
    matched = abs(bacc - raid_bacc) <= 0.01
    ok = matched and raid_ndcg > dp_ndcg
    verdict(10, ok, f"BAcc raid {raid_bacc:.3f} / dp {bacc:.3f} at sigma {sigma:.3f}; "
                    f"NDCG@10 raid {raid_ndcg:.4f} vs dp {dp_ndcg:.4f}")
    assert ok


# --- 11. determinism ----------------------------------------------------------------------------


def test_c11_reruns_are_byte_identical(verdict, synthetic_run):
    before, after, _ = synthetic_run
    again_before, again_after = synthetic_defense_report()
    same = before.to_json() == again_before.to_json() and after.to_json() == again_after.to_json()
    detail = "synthetic defense reports identical" if same else "synthetic defense reports differ"
    if ML1M_DIR:
        first = ml1m_reports()
        second = ml1m_reports()
        same_ml = all(a.to_json() == b.to_json() for k in first for a, b in zip(first[k], second[k]))
        same &= same_ml
        detail += f"; MovieLens reports {'identical' if same_ml else 'differ'}"
    else:
        detail += "; MovieLens part skipped (RAID_ML1M_DIR unset)"
    verdict(11, same, detail)
    assert same
