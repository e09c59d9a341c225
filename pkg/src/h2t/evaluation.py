"""Linear probing and evaluation: stratified folds, an Adam-trained softmax
probe, ranking metrics (AUROC as the Mann-Whitney statistic, step-wise
average precision, macro variants, Pearson r), and paired right-tailed
t-tests with Benjamini-Hochberg correction for method comparison.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as _scipy_stats

from .errors import ConfigError, DataError, NumericError

P_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# Stratified folds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldPlan:
    assignments: dict               # slide_id -> fold index
    n_folds: int
    strata: tuple                   # ((label, cohort), ...) in assignment order

    def fold_of(self, slide_id):
        return self.assignments[slide_id]


def make_folds(manifest, n_folds, seed) -> FoldPlan:
    """Stratified fold assignment over (label, cohort) strata.

    Within each stratum slide ids are sorted, shuffled with the seeded
    generator, and dealt round-robin, so per-stratum fold sizes differ by at
    most one and the plan is a pure function of (manifest, n_folds, seed).
    """
    if n_folds < 2:
        raise ConfigError("n_folds must be >= 2")
    strata = {}
    for entry in manifest.slides:
        strata.setdefault((entry.label, entry.cohort), []).append(entry.slide_id)
    rng = np.random.default_rng(seed)
    assignments = {}
    for key in sorted(strata):
        ids = sorted(strata[key])
        if len(ids) < n_folds:
            raise DataError(
                f"stratum {key} has {len(ids)} slides, fewer than {n_folds} folds"
            )
        order = rng.permutation(len(ids))
        for position, idx in enumerate(order):
            assignments[ids[idx]] = position % n_folds
    return FoldPlan(assignments, n_folds, tuple(sorted(strata)))


# ---------------------------------------------------------------------------
# Softmax linear probe trained with Adam
# ---------------------------------------------------------------------------

def _softmax_rows(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    expo = np.exp(shifted)
    return expo / expo.sum(axis=1, keepdims=True)


def cross_entropy_and_grad(weight, bias, x, y_idx):
    """Mean softmax cross-entropy plus analytic gradients (dW, db)."""
    logits = x @ weight.T + bias
    probs = _softmax_rows(logits)
    n = len(x)
    loss = -np.log(np.clip(probs[np.arange(n), y_idx], 1e-300, None)).mean()
    grad = probs.copy()
    grad[np.arange(n), y_idx] -= 1.0
    grad /= n
    return loss, grad.T @ x, grad.sum(axis=0)


@dataclass
class LinearProbe:
    weight: np.ndarray              # classes x features
    bias: np.ndarray
    classes: tuple
    loss_log: list = field(default_factory=list)
    best_epoch: int | None = None
    selection_metric: str | None = None

    def predict_proba(self, x):
        return _softmax_rows(np.asarray(x, dtype=np.float64) @ self.weight.T + self.bias)

    def scores(self, x):
        """Positive-class probability for binary probes (classes[1])."""
        return self.predict_proba(x)[:, 1]


def train_probe(features, labels, *, epochs=50, lr=1e-3, batch_size=32, seed=0,
                classes=None, validation=None) -> LinearProbe:
    """Train a single linear layer with Adam (beta1 0.9, beta2 0.999,
    eps 1e-8) on softmax cross-entropy, seeded shuffling each epoch.

    ``validation`` is an optional (features, labels) pair; when present the
    returned probe is the epoch checkpoint with the highest validation
    metric (AUROC for two classes, macro AUROC otherwise), ties going to the
    earlier epoch. Without validation the final epoch is returned.
    """
    x = np.asarray(features, dtype=np.float64)
    if not np.isfinite(x).all():
        raise NumericError("non-finite probe features")
    labels = list(labels)
    if classes is None:
        classes = tuple(sorted(set(labels)))
    if len(classes) < 2:
        raise DataError("probe training needs at least 2 classes")
    missing = set(labels) - set(classes)
    if missing:
        raise DataError(f"labels outside declared classes: {sorted(missing)}")
    if len(set(labels)) < 2:
        raise DataError("single-class training set")
    index = {c: i for i, c in enumerate(classes)}
    y = np.array([index[lab] for lab in labels], dtype=np.int64)

    n, n_feat = x.shape
    n_cls = len(classes)
    weight = np.zeros((n_cls, n_feat))
    bias = np.zeros(n_cls)
    m_w = np.zeros_like(weight); v_w = np.zeros_like(weight)
    m_b = np.zeros_like(bias); v_b = np.zeros_like(bias)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0

    metric_name = "auroc" if n_cls == 2 else "macro_auroc"
    if validation is not None:
        val_x = np.asarray(validation[0], dtype=np.float64)
        val_y = np.array([index[lab] for lab in validation[1]], dtype=np.int64)
    best = None

    rng = np.random.default_rng(seed)
    loss_log = []
    for epoch in range(epochs):
        perm = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, batch_size):
            sel = perm[start:start + batch_size]
            loss, d_w, d_b = cross_entropy_and_grad(weight, bias, x[sel], y[sel])
            batch_losses.append(loss)
            step += 1
            m_w = beta1 * m_w + (1 - beta1) * d_w
            v_w = beta2 * v_w + (1 - beta2) * d_w ** 2
            m_b = beta1 * m_b + (1 - beta1) * d_b
            v_b = beta2 * v_b + (1 - beta2) * d_b ** 2
            corr1 = 1 - beta1 ** step
            corr2 = 1 - beta2 ** step
            weight -= lr * (m_w / corr1) / (np.sqrt(v_w / corr2) + eps)
            bias -= lr * (m_b / corr1) / (np.sqrt(v_b / corr2) + eps)
        loss_log.append(float(np.mean(batch_losses)))
        if validation is not None:
            probs = _softmax_rows(val_x @ weight.T + bias)
            try:
                if n_cls == 2:
                    metric = auroc(probs[:, 1], (val_y == 1).astype(int))
                else:
                    metric = macro_auroc(probs, val_y)
            except DataError:
                metric = float("nan")
            if best is None or (np.isfinite(metric)
                                and (not np.isfinite(best[0]) or metric > best[0])):
                best = (metric, epoch, weight.copy(), bias.copy())

    if validation is not None and best is not None:
        _, best_epoch, weight, bias = best
        return LinearProbe(weight, bias, classes, loss_log, best_epoch, metric_name)
    return LinearProbe(weight, bias, classes, loss_log, None, None)


# ---------------------------------------------------------------------------
# Ranking metrics
# ---------------------------------------------------------------------------

def _average_ranks(values):
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels):
    """Mann-Whitney AUROC: P(score+ > score-) + half credit for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUROC needs both classes present")
    ranks = _average_ranks(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels):
    """Step-wise AP: sum of (recall step) * precision over descending-score
    thresholds, ties grouped at a single threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise DataError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    ap = 0.0
    tp = fp = 0
    prev_recall = 0.0
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        tp += int(sorted_labels[i:j + 1].sum())
        fp += (j - i + 1) - int(sorted_labels[i:j + 1].sum())
        recall = tp / n_pos
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return float(ap)


def _per_class(metric, prob_matrix, y_idx, n_classes):
    values = []
    for c in range(n_classes):
        try:
            values.append(metric(prob_matrix[:, c], (y_idx == c).astype(int)))
        except DataError as exc:
            warnings.warn(f"class {c} skipped: {exc}")
    if not values:
        raise DataError("no class had both outcomes present")
    return float(np.mean(values))


def mean_ap(prob_matrix, y_idx):
    """Unweighted mean of per-class average precision (one-vs-rest)."""
    return _per_class(average_precision, np.asarray(prob_matrix), np.asarray(y_idx),
                      np.asarray(prob_matrix).shape[1])


def macro_auroc(prob_matrix, y_idx):
    """Unweighted mean of per-class one-vs-rest AUROC."""
    return _per_class(auroc, np.asarray(prob_matrix), np.asarray(y_idx),
                      np.asarray(prob_matrix).shape[1])


def pearson(a, b):
    """Product-moment correlation; raises on zero variance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) != len(b) or len(a) < 2:
        raise DataError("pearson needs two equal-length sequences of length >= 2")
    da = a - a.mean()
    db = b - b.mean()
    denom = np.sqrt((da ** 2).sum() * (db ** 2).sum())
    if denom < 1e-300:
        raise NumericError("zero variance input to pearson")
    return float((da * db).sum() / denom)


# ---------------------------------------------------------------------------
# Paired right-tailed t-tests with Benjamini-Hochberg correction
# ---------------------------------------------------------------------------

def paired_right_tailed_p(a, b):
    """p-value for "mean of a exceeds mean of b" from paired fold scores.

    Zero-variance differences use the documented conventions: positive mean
    shift -> p floored at 1e-12, zero shift -> 0.5 with a warning, negative
    shift -> 1 - 1e-12.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or len(a) < 2:
        raise DataError("paired test needs >= 2 folds with equal counts")
    diff = a - b
    sd = diff.std(ddof=1)
    if sd < 1e-30:
        if abs(diff.mean()) < 1e-30:
            warnings.warn("zero-variance, zero-shift differences: p reported as 0.5")
            return 0.5
        return P_FLOOR if diff.mean() > 0 else 1.0 - P_FLOOR
    t_stat = diff.mean() / (sd / np.sqrt(len(diff)))
    p = float(_scipy_stats.t.sf(t_stat, df=len(diff) - 1))
    return min(max(p, P_FLOOR), 1.0)


def benjamini_hochberg(p_values):
    """Step-up BH adjustment; never decreases a p-value and preserves order."""
    p = np.asarray(p_values, dtype=np.float64)
    m = len(p)
    order = np.argsort(p, kind="mergesort")
    adjusted = np.empty(m, dtype=np.float64)
    running = 1.0
    for rank in range(m - 1, -1, -1):
        idx = order[rank]
        running = min(running, p[idx] * m / (rank + 1))
        adjusted[idx] = running
    return np.minimum(adjusted, 1.0)


@dataclass
class MethodComparison:
    methods: tuple
    raw: np.ndarray                 # raw[i, j] = p for "method i > method j"
    adjusted: np.ndarray            # BH-adjusted over all ordered pairs

    def to_rows(self, digits=3):
        rows = []
        for i, a in enumerate(self.methods):
            for j, b in enumerate(self.methods):
                if i != j:
                    rows.append((a, b, round(float(self.raw[i, j]), digits),
                                 round(float(self.adjusted[i, j]), digits)))
        return rows


def compare_methods(fold_scores) -> MethodComparison:
    """All-pairs paired right-tailed t-tests over per-fold scores, corrected
    with Benjamini-Hochberg across every ordered pair."""
    methods = tuple(fold_scores)
    counts = {len(v) for v in fold_scores.values()}
    if len(counts) != 1:
        raise DataError("methods have unequal fold counts")
    n = len(methods)
    raw = np.full((n, n), np.nan)
    pairs = []
    for i in range(n):
        for j in range(n):
            if i != j:
                raw[i, j] = paired_right_tailed_p(fold_scores[methods[i]],
                                                  fold_scores[methods[j]])
                pairs.append((i, j))
    flat = np.array([raw[i, j] for i, j in pairs])
    adj_flat = benjamini_hochberg(flat)
    adjusted = np.full((n, n), np.nan)
    for (i, j), value in zip(pairs, adj_flat):
        adjusted[i, j] = value
    return MethodComparison(methods, raw, adjusted)


# ---------------------------------------------------------------------------
# Experiment protocol: fold-wise probing with a held-out evaluation cohort
# ---------------------------------------------------------------------------

@dataclass
class TaskConfig:
    name: str
    labels: tuple                   # class order; for binary, labels[1] is positive
    discovery_cohorts: tuple
    evaluation_cohorts: tuple
    n_folds: int = 5
    seed: int = 0
    probe_epochs: int = 50
    probe_lr: float = 1e-3
    probe_batch: int = 32
    standardize: bool = False


@dataclass
class ExperimentReport:
    task: TaskConfig
    fold_rows: dict                 # method -> list of per-fold metric dicts
    summary: dict                   # method -> {metric: (mean, std)}
    p_values: MethodComparison | None
    selection_metric: str

    def to_json(self):
        doc = {
            "task": {
                "name": self.task.name,
                "labels": list(self.task.labels),
                "discovery_cohorts": list(self.task.discovery_cohorts),
                "evaluation_cohorts": list(self.task.evaluation_cohorts),
                "n_folds": self.task.n_folds,
                "seed": self.task.seed,
                "selection": f"best validation {self.selection_metric} epoch",
            },
            "folds": self.fold_rows,
            "summary": {
                method: {metric: {"mean": mean, "std": std}
                         for metric, (mean, std) in metrics.items()}
                for method, metrics in self.summary.items()
            },
        }
        if self.p_values is not None:
            doc["p_values_test_auroc"] = [
                {"better": a, "than": b, "p": raw, "p_adjusted": adj}
                for a, b, raw, adj in self.p_values.to_rows()
            ]
        return json.dumps(doc, indent=2) + "\n"

    def to_text(self):
        metrics = ("valid_auroc", "valid_map", "test_auroc", "test_map")
        lines = [f"task: {self.task.name}   labels: {', '.join(self.task.labels)}"]
        lines.append(f"model selection: best validation {self.selection_metric} epoch")
        header = f"{'method':<14}{'fold':>5}" + "".join(f"{m:>14}" for m in metrics)
        lines.append(header)
        lines.append("-" * len(header))
        for method, rows in self.fold_rows.items():
            for row in rows:
                lines.append(f"{method:<14}{row['fold']:>5}"
                             + "".join(f"{row[m]:>14.4f}" for m in metrics))
            mean_std = self.summary[method]
            cells = "".join(
                f"{mean_std[m][0]:.4f}+-{mean_std[m][1]:.3f}".rjust(14) for m in metrics
            )
            lines.append(f"{method:<14}{'mean':>5}{cells}")
        if self.p_values is not None:
            lines.append("")
            lines.append("paired right-tailed t-tests on test AUROC (BH adjusted, 3 digits)")
            for a, b, raw, adj in self.p_values.to_rows():
                lines.append(f"  {a} > {b}: p={raw:.3f} adjusted={adj:.3f}")
        return "\n".join(lines) + "\n"


def _metrics_for(probe, features, y_idx, n_cls):
    probs = probe.predict_proba(features)
    if n_cls == 2:
        roc = auroc(probs[:, 1], (y_idx == 1).astype(int))
    else:
        roc = macro_auroc(probs, y_idx)
    return roc, mean_ap(probs, y_idx)


def run_experiment(manifest, representations, task: TaskConfig) -> ExperimentReport:
    """Fold-wise linear probing with a held-out evaluation cohort.

    ``representations`` maps method name -> {slide_id: 1D feature vector}.
    For each fold the probe trains on the remaining discovery folds, the
    best epoch is picked on the held-out fold, and that checkpoint is scored
    on the evaluation cohort. Evaluation slides never appear in training.
    """
    labels = tuple(task.labels)
    n_cls = len(labels)
    if n_cls < 2:
        raise ConfigError("task needs at least two labels")
    discovery = manifest.subset(
        lambda e: e.cohort in task.discovery_cohorts and e.label in labels
    )
    evaluation = manifest.subset(
        lambda e: e.cohort in task.evaluation_cohorts and e.label in labels
    )
    if not discovery.slides:
        raise DataError("no discovery slides match the task")
    if not evaluation.slides:
        raise DataError("no evaluation slides match the task")

    for method, reps in representations.items():
        missing = [e.slide_id for e in discovery.slides + evaluation.slides
                   if e.slide_id not in reps]
        if missing:
            raise DataError(
                f"method {method!r} missing representations for {len(missing)} slides, e.g. {missing[:3]}"
            )

    plan = make_folds(discovery, task.n_folds, task.seed)
    label_index = {lab: i for i, lab in enumerate(labels)}
    eval_ids = {e.slide_id for e in evaluation.slides}
    train_ids_all = set()

    fold_rows = {}
    summary = {}
    test_scores = {}
    for method, reps in representations.items():
        disc_feats = {e.slide_id: np.asarray(reps[e.slide_id], dtype=np.float64).ravel()
                      for e in discovery.slides}
        eval_feats = np.stack([np.asarray(reps[e.slide_id], dtype=np.float64).ravel()
                               for e in evaluation.slides])
        eval_y = np.array([label_index[e.label] for e in evaluation.slides])
        rows = []
        for fold in range(task.n_folds):
            train_entries = [e for e in discovery.slides if plan.fold_of(e.slide_id) != fold]
            valid_entries = [e for e in discovery.slides if plan.fold_of(e.slide_id) == fold]
            train_ids_all.update(e.slide_id for e in train_entries)
            x_train = np.stack([disc_feats[e.slide_id] for e in train_entries])
            y_train = [e.label for e in train_entries]
            x_valid = np.stack([disc_feats[e.slide_id] for e in valid_entries])
            y_valid_idx = np.array([label_index[e.label] for e in valid_entries])
            x_eval = eval_feats

            if task.standardize:
                mu = x_train.mean(axis=0)
                sigma = x_train.std(axis=0)
                sigma[sigma < 1e-12] = 1.0
                x_train = (x_train - mu) / sigma
                x_valid = (x_valid - mu) / sigma
                x_eval = (eval_feats - mu) / sigma

            probe = train_probe(
                x_train, y_train, epochs=task.probe_epochs, lr=task.probe_lr,
                batch_size=task.probe_batch, seed=task.seed + fold, classes=labels,
                validation=(x_valid, [e.label for e in valid_entries]),
            )
            valid_auroc, valid_map = _metrics_for(probe, x_valid, y_valid_idx, n_cls)
            test_auroc, test_map = _metrics_for(probe, x_eval, eval_y, n_cls)
            rows.append({
                "fold": fold,
                "valid_auroc": valid_auroc, "valid_map": valid_map,
                "test_auroc": test_auroc, "test_map": test_map,
                "best_epoch": probe.best_epoch,
            })
        fold_rows[method] = rows
        summary[method] = {
            metric: (float(np.mean([r[metric] for r in rows])),
                     float(np.std([r[metric] for r in rows])))
            for metric in ("valid_auroc", "valid_map", "test_auroc", "test_map")
        }
        test_scores[method] = [r["test_auroc"] for r in rows]

    assert not (train_ids_all & eval_ids), "evaluation cohort leaked into training folds"

    p_values = compare_methods(test_scores) if len(representations) > 1 else None
    selection_metric = "auroc" if n_cls == 2 else "macro_auroc"
    return ExperimentReport(task, fold_rows, summary, p_values, selection_metric)
