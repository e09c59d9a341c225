"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -s` to see the per-criterion lines
as they complete. Criteria 8 and 11 are the slow ones (a full pipeline run
and a million-vector clustering benchmark).
"""

import math
import resource
import time

import numpy as np
import pytest
from scipy import integrate

from conftest import make_prototypes
from h2t.anomaly import fit_forest, normality_scores
from h2t.attention import (AttentionConfig, mha_forward, positional_encoding,
                           positional_encoding_batch)
from h2t.evaluation import (auroc, average_precision, benjamini_hochberg,
                            compare_methods, cross_entropy_and_grad)
from h2t.feature_store import (ClassSpec, PatchRecord, SyntheticSpec,
                               generate_synthetic_cohort,
                               paired_unit_archetypes, read_slide_features,
                               save_manifest, write_slide_features)
from h2t.pam import PatternAssignmentMap, colocalization
from h2t.pipeline import PipelineConfig, run_pipeline
from h2t.projection import project
from h2t.prototypes import (assign_patterns, full_objective, kmeans_plus_plus,
                            minibatch_kmeans, normalize_rows)


def check(criterion, name, ok, detail=""):
    line = f"[acceptance {criterion:>2}] {name}: {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f"  ({detail})"
    print(line, flush=True)
    assert ok, line


# -- 1 ----------------------------------------------------------------------

def test_01_format_round_trip(tmp_path):
    rng = np.random.default_rng(1001)
    start = time.perf_counter()
    ok = True
    for i in range(1000):
        n = int(rng.integers(1, 60))
        dim = int(rng.integers(1, 17))
        cells = rng.permutation(4 * n)[:n]
        records = [
            PatchRecord(int(c % 128), int(c // 128),
                        rng.standard_normal(dim).astype(np.float32))
            for c in cells
        ]
        first = tmp_path / "a.h2t"
        second = tmp_path / "b.h2t"
        write_slide_features(records, first)
        write_slide_features(read_slide_features(first), second)
        if first.read_bytes() != second.read_bytes():
            ok = False
            break
    elapsed = time.perf_counter() - start
    check(1, "format round-trip, 1000 slides", ok and elapsed < 30.0,
          f"{elapsed:.1f}s")


# -- 2 ----------------------------------------------------------------------

def _lloyd_oracle(points, k, seed, iters=200):
    """Textbook Lloyd from the same seeded initialization, with the same
    deterministic dead-centroid repair, tracking the best iterate."""
    rng = np.random.default_rng(seed)
    centroids = kmeans_plus_plus(points, k, rng)
    best, best_obj = centroids.copy(), full_objective(points, centroids)
    for _ in range(iters):
        d2 = ((points[:, None, :] - centroids[None]) ** 2).sum(-1)
        assign = d2.argmin(1)
        updated = centroids.copy()
        dead = []
        for j in range(k):
            members = assign == j
            if members.any():
                updated[j] = points[members].mean(axis=0)
            else:
                dead.append(j)
        if dead:
            dist = np.sqrt(d2[np.arange(len(points)), assign])
            order = np.argsort(-dist, kind="stable")
            for rank, j in enumerate(dead):
                updated[j] = points[order[rank % len(order)]]
        if np.array_equal(updated, centroids):
            break
        centroids = updated
        obj = full_objective(points, centroids)
        if obj < best_obj:
            best_obj, best = obj, centroids.copy()
    return best, best_obj


def test_02_clustering_small_instance_oracle():
    rng = np.random.default_rng(2002)
    worst = 0.0
    mismatches = 0
    trials = 0
    while trials < 200:
        n = int(rng.integers(2, 13))
        k = int(rng.integers(2, 4))
        if k > n:
            continue
        trials += 1
        dim = int(rng.integers(1, 5))
        points = rng.standard_normal((n, dim))
        seed = int(rng.integers(1 << 30))
        fitted, _ = minibatch_kmeans(points, k, epochs=80, batch_size=n,
                                     rng=np.random.default_rng(seed))
        oracle, oracle_obj = _lloyd_oracle(points, k, seed)
        fit_obj = full_objective(points, fitted)
        assign_fit = ((points[:, None, :] - fitted[None]) ** 2).sum(-1).argmin(1)
        assign_oracle = ((points[:, None, :] - oracle[None]) ** 2).sum(-1).argmin(1)
        worst = max(worst, abs(fit_obj - oracle_obj))
        if abs(fit_obj - oracle_obj) > 1e-9 or not np.array_equal(assign_fit, assign_oracle):
            mismatches += 1
    check(2, "clustering vs exhaustive Lloyd oracle, 200 instances",
          mismatches == 0, f"max objective gap {worst:.2e}")


# -- 3 ----------------------------------------------------------------------

def test_03_projection_identities():
    rng = np.random.default_rng(3003)
    ok = True
    for _ in range(100):
        n = int(rng.integers(4, 50))
        dim = int(rng.integers(2, 10))
        k = int(rng.integers(2, 6))
        protos = make_prototypes(rng.standard_normal((k, dim)))
        records = [PatchRecord(i, 0, rng.standard_normal(dim).astype(np.float32))
                   for i in range(n)]
        plain = project(records, protos, "h").matrix
        if not np.array_equal(plain, project(records, protos, "h-t", 0.0).matrix):
            ok = False
        if not np.array_equal(plain, project(records, protos, "h-k", n).matrix):
            ok = False
        top1 = project(records, protos, "h-k", 1).matrix
        feats = normalize_rows(
            np.stack([r.feature.astype(np.float64) for r in records]))
        assign, dist = assign_patterns(feats, protos.centroids)
        for i in range(k):
            members = np.flatnonzero(assign == i)
            if members.size:
                nearest = members[np.argmin(dist[members])]
                if not np.array_equal(top1[i], feats[nearest].astype(np.float32)):
                    ok = False
            elif top1[i].any():
                ok = False
    check(3, "projection filter identities, 100 slides", ok)


# -- 4 ----------------------------------------------------------------------

def test_04_attention_correspondence():
    rng = np.random.default_rng(4004)
    worst = 0.0
    done = 0
    while done < 50:
        k = int(rng.integers(2, 5))
        dim = int(rng.integers(6, 12))
        centroids = normalize_rows(rng.standard_normal((k, dim)))
        clusters = [
            normalize_rows(centroids[i] + 0.05 * rng.standard_normal(
                (int(rng.integers(2, 6)), dim)))
            for i in range(k)
        ]
        y = np.concatenate(clusters)
        scores = centroids @ y.T
        top2 = np.sort(scores, axis=1)[:, -2:]
        if (top2[:, 1] - top2[:, 0]).min() < 0.01:
            continue  # enforce distinct scores with a visible gap
        done += 1
        protos = make_prototypes(centroids)
        records = [PatchRecord(i, 0, row.astype(np.float32))
                   for i, row in enumerate(y)]
        pooled = project(records, protos, "h-k", 1).matrix
        out = mha_forward(protos.centroids.astype(np.float64), y,
                          AttentionConfig.identity(dim, beta=1e6))
        worst = max(worst, float(np.abs(out - pooled).max()))
    check(4, "saturated attention equals top-1 pooling, 50 instances",
          worst <= 1e-4, f"max gap {worst:.2e}")


# -- 5 ----------------------------------------------------------------------

def test_05_positional_encoding():
    origin = positional_encoding(0, 0, 8)
    ok = bool(np.abs(origin - np.array([0, 1, 0, 1, 0, 1, 0, 1])).max() <= 1e-9)
    worked = positional_encoding(0, 5, 4)
    expected = np.array([0.0, 1.0, np.sin(5 / 100.0), np.cos(5 / 1000.0)])
    ok = ok and bool(np.abs(worked - expected).max() <= 1e-9)
    rng = np.random.default_rng(5005)
    positions = rng.integers(0, 10000, size=(100_000, 2))
    enc = positional_encoding_batch(positions, 16)
    ok = ok and bool(enc.min() >= -1.0 and enc.max() <= 1.0)
    check(5, "positional encoding analytic values + range", ok)


# -- 6 ----------------------------------------------------------------------

def _pcm_fast_oracle(cells, k, gamma):
    height, width = cells.shape
    sums = np.zeros((k, k))
    counts = np.zeros((k, k), dtype=np.int64)
    for y in range(height):
        for x in range(width):
            center = cells[y, x]
            if center < 0:
                continue
            u = [0] * k
            for dy in range(-gamma, gamma + 1):
                for dx in range(-gamma, gamma + 1):
                    if dy == 0 and dx == 0:
                        continue
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < height and 0 <= nx < width and cells[ny, nx] >= 0:
                        u[cells[ny, nx]] += 1
            for j in range(k):
                if u[j] >= 1:
                    sums[center, j] += u[j]
                    counts[center, j] += 1
    out = np.zeros((k, k))
    nonzero = counts > 0
    out[nonzero] = sums[nonzero] / counts[nonzero]
    return out


def test_06_colocalization_oracle():
    uniform = PatternAssignmentMap(np.zeros((3, 3), np.int16), 1)
    ok = colocalization(uniform, 1).values[0, 0] == (4 * 3 + 4 * 5 + 8) / 9
    board = PatternAssignmentMap(np.array([[0, 1], [1, 0]], np.int16), 2)
    ok = ok and np.array_equal(colocalization(board, 1).values,
                               np.array([[1.0, 2.0], [2.0, 1.0]]))
    rng = np.random.default_rng(6006)
    worst = 0.0
    for _ in range(500):
        k = int(rng.integers(1, 6))
        h = int(rng.integers(1, 21))
        w = int(rng.integers(1, 21))
        cells = rng.integers(0, k, size=(h, w)).astype(np.int16)
        cells[rng.random((h, w)) < 0.25] = -1
        pam = PatternAssignmentMap(cells, k)
        gamma = int(rng.integers(1, 3))
        gap = np.abs(colocalization(pam, gamma).values
                     - _pcm_fast_oracle(cells, k, gamma)).max()
        worst = max(worst, float(gap))
    check(6, "co-localization vs brute-force oracle, 500 maps",
          ok and worst == 0.0, f"max gap {worst:.1e}")


# -- 7 ----------------------------------------------------------------------

def _auroc_pairs(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (len(pos) * len(neg))


def _ap_thresholds(scores, labels):
    n_pos = labels.sum()
    ap, prev = 0.0, 0.0
    for threshold in sorted(set(scores.tolist()), reverse=True):
        kept = scores >= threshold
        tp = int((labels[kept] == 1).sum())
        recall = tp / n_pos
        ap += (recall - prev) * (tp / int(kept.sum()))
        prev = recall
    return ap


def test_07_metric_oracles():
    rng = np.random.default_rng(7007)
    auroc_ok = ap_ok = True
    for _ in range(1000):
        n = int(rng.integers(3, 40))
        scores = rng.integers(0, 10, size=n).astype(float)
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            continue
        if auroc(scores, labels) != _auroc_pairs(scores, labels):
            auroc_ok = False
        if abs(average_precision(scores, labels) - _ap_thresholds(scores, labels)) > 1e-12:
            ap_ok = False

    grad_ok = True
    for _ in range(20):
        n, dim, classes = 6, 3, 3
        x = rng.standard_normal((n, dim))
        y = rng.integers(0, classes, size=n)
        weight = 0.4 * rng.standard_normal((classes, dim))
        bias = 0.4 * rng.standard_normal(classes)
        _, d_w, d_b = cross_entropy_and_grad(weight, bias, x, y)
        eps = 1e-6
        for r in range(classes):
            for c in range(dim):
                up = weight.copy(); up[r, c] += eps
                down = weight.copy(); down[r, c] -= eps
                numeric = (cross_entropy_and_grad(up, bias, x, y)[0]
                           - cross_entropy_and_grad(down, bias, x, y)[0]) / (2 * eps)
                if abs(numeric - d_w[r, c]) > 1e-4 * max(1.0, abs(numeric)):
                    grad_ok = False
    check(7, "AUROC/AP oracles exact + gradient finite differences",
          auroc_ok and ap_ok and grad_ok)


# -- 8 ----------------------------------------------------------------------

def _class_mixture(flip_even, tilt_first_pairs, within_tilt=3.0, pair_tilt=0.08):
    mix = np.empty(8)
    for pair in range(4):
        total = 1.0 + pair_tilt * (1 if (pair < 2) == tilt_first_pairs else -1)
        high = within_tilt / (within_tilt + 1.0)
        even, odd = (high, 1 - high) if flip_even else (1 - high, high)
        mix[2 * pair] = total * even
        mix[2 * pair + 1] = total * odd
    return tuple(mix / mix.sum())


def test_08_end_to_end_synthetic_study(tmp_path):
    start = time.perf_counter()
    arch = paired_unit_archetypes(4, 24, 0.20, seed=7)
    spec = SyntheticSpec(
        archetypes=arch,
        classes=[ClassSpec("classA", _class_mixture(True, True)),
                 ClassSpec("classB", _class_mixture(False, False))],
        slides_per_class={"discovery": 60, "evaluation": 40},
        patches_per_slide=128,
        noise_sigma=0.08,
        grid_width=16,
        grid_height=16,
    )
    cohort_dir = tmp_path / "cohort"
    manifest = generate_synthetic_cohort(spec, seed=779, out_dir=cohort_dir)
    assert len(manifest.slides) == 200
    disc_path = cohort_dir / "discovery.json"
    eval_path = cohort_dir / "evaluation.json"
    save_manifest(manifest.subset(lambda e: e.cohort == "discovery"), disc_path)
    save_manifest(manifest.subset(lambda e: e.cohort == "evaluation"), eval_path)

    config = PipelineConfig(
        discovery_manifest=str(disc_path),
        evaluation_manifest=str(eval_path),
        out_root=str(tmp_path / "out"),
        seed=779,
        task_name="synthetic-2class",
        task_labels=("classA", "classB"),
        k=4,
        epochs=25,
        variants=(("h-w", None),),
        gammas=(1,),
        folds=5,
    )
    result = run_pipeline(config)
    summary = result.report.summary
    hw = summary["h-w"]["test_auroc"][0]
    hist = summary["hist"]["test_auroc"][0]
    elapsed = time.perf_counter() - start
    check(8, "end-to-end synthetic study",
          hw >= 0.95 and hw > hist and elapsed < 120.0,
          f"h-w {hw:.3f} vs hist {hist:.3f}, {elapsed:.0f}s")


# -- 9 ----------------------------------------------------------------------

def test_09_anomaly_outlier_detection():
    worst = 1.0
    for seed in range(10):
        rng = np.random.default_rng(9000 + seed)
        inliers = rng.standard_normal((256, 12))
        outliers = rng.standard_normal((30, 12)) + 10.0
        forest = fit_forest(inliers, n_trees=100, subsample=256, seed=seed)
        queries = np.vstack([rng.standard_normal((100, 12)), outliers])
        labels = np.array([0] * 100 + [1] * 30)
        scores = normality_scores(forest, queries)
        worst = min(worst, auroc(1.0 - scores, labels))
    check(9, "isolation forest flags 10-sigma outliers, 10 seeds",
          worst >= 0.95, f"min AUROC {worst:.3f}")


# -- 10 ---------------------------------------------------------------------

def _t_tail_quadrature(t_value, df):
    const = math.gamma((df + 1) / 2) / (math.sqrt(df * math.pi) * math.gamma(df / 2))
    tail, _ = integrate.quad(
        lambda u: const * (1 + u * u / df) ** (-(df + 1) / 2), t_value, np.inf)
    return tail


def test_10_statistics_oracles():
    rng = np.random.default_rng(10010)
    worst = 0.0
    for _ in range(50):
        folds = int(rng.integers(3, 8))
        scores = {
            "m1": rng.normal(0.9, 0.02, size=folds),
            "m2": rng.normal(0.9, 0.02, size=folds),
            "m3": rng.normal(0.88, 0.02, size=folds),
        }
        cmp = compare_methods(scores)
        names = cmp.methods
        for i in range(3):
            for j in range(3):
                if i == j:
                    continue
                diff = np.asarray(scores[names[i]]) - np.asarray(scores[names[j]])
                t_value = diff.mean() / (diff.std(ddof=1) / math.sqrt(folds))
                want = min(max(_t_tail_quadrature(t_value, folds - 1), 1e-12), 1.0)
                worst = max(worst, abs(cmp.raw[i, j] - want))
    bh_ok = True
    for _ in range(1000):
        p = rng.uniform(0.0, 1.0, size=int(rng.integers(1, 25)))
        adjusted = benjamini_hochberg(p)
        if (adjusted < p - 1e-15).any() or (adjusted > 1.0).any():
            bh_ok = False
        order = np.argsort(p, kind="mergesort")
        if (np.diff(adjusted[order]) < -1e-15).any():
            bh_ok = False
    check(10, "paired-t p-values vs quadrature + BH monotonicity",
          worst <= 1e-6 and bh_ok, f"max p gap {worst:.1e}")


# -- 11 ---------------------------------------------------------------------

def test_11_clustering_performance():
    from h2t.prototypes import fit_features

    rng = np.random.default_rng(11011)
    features = rng.standard_normal((1_000_000, 128), dtype=np.float32)
    features[:, 0] += 0.05  # keep rows away from exact zero norm
    start = time.perf_counter()
    pset = fit_features(features, 16, epochs=25, batch_size=4096, seed=1)
    elapsed = time.perf_counter() - start
    peak_gb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024 ** 2
    log = pset.objective_log
    monotone = all(b <= a + 1e-6 for a, b in zip(log, log[1:]))
    check(11, "1e6 x 128 clustering, k=16, 25 epochs",
          elapsed < 300.0 and peak_gb < 4.0 and monotone,
          f"{elapsed:.0f}s, peak {peak_gb:.2f} GB")
