"""Diagnostic probing and fairness/performance metrics.

Leakage of the protected variable is measured by logistic-regression
probes trained post hoc on the frozen 16-d representation, searching
both penalty norms over a log-spaced strength grid and selecting on
validation AUC.  Disparate impact uses the min-rate / max-rate
convention, which reduces to the unprivileged/privileged ratio in the
two-group case.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .model import HireabilityModel, predict


class UndefinedMetricError(ContractError):
    """The metric is undefined on this input (e.g. one class absent)."""


# ----------------------------------------------------------------- ranking

def _midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties given their average rank."""
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size, dtype=np.float64)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score+ > score-) + 0.5 P(tie)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("auc undefined: one class absent")
    ranks = _midranks(scores)
    r_pos = ranks[labels == 1].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def macro_ovr_auc(scores, labels) -> float:
    """Unweighted mean of one-vs-rest AUCs over the classes present."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    values = []
    for c in range(scores.shape[1]):
        if not np.any(labels == c):
            warnings.warn(f"class {c} absent from labels; skipped in macro AUC")
            continue
        values.append(auc(scores[:, c], (labels == c).astype(int)))
    if len(values) < 2:
        raise UndefinedMetricError("macro OvR AUC needs at least two classes present")
    return float(np.mean(values))


def accuracy(scores, labels) -> float:
    scores = np.asarray(scores)
    labels = np.asarray(labels).astype(int)
    pred = scores.argmax(axis=1) if scores.ndim == 2 else (scores >= 0.5).astype(int)
    return float((pred == labels).mean())


# --------------------------------------------------------------- fairness

def di_from_rates(rates) -> float:
    """Lowest group positive rate over the highest."""
    rates = [float(r) for r in rates]
    if not rates:
        raise UndefinedMetricError("disparate impact undefined: no groups")
    if max(rates) == 0:
        raise UndefinedMetricError("disparate impact undefined: all positive rates are 0")
    return min(rates) / max(rates)


def group_rates(outcomes, groups, expected_groups=None) -> dict:
    outcomes = np.asarray(outcomes, dtype=np.float64)
    groups = np.asarray(groups)
    keys = np.unique(groups) if expected_groups is None else list(expected_groups)
    rates = {}
    for g in keys:
        members = outcomes[groups == g]
        if members.size == 0:
            raise UndefinedMetricError(f"disparate impact undefined: group {g!r} is empty")
        rates[g] = float(members.mean())
    return rates


def disparate_impact(outcomes, groups, expected_groups=None) -> float:
    return di_from_rates(group_rates(outcomes, groups, expected_groups).values())


def audit_overlap(train_samples, test_samples, key: str = "video_id") -> float:
    """Fraction of test samples whose group appears in the train split."""
    if not test_samples:
        raise UndefinedMetricError("overlap audit undefined: empty test split")
    train_groups = {getattr(s, key) for s in train_samples}
    shared = sum(1 for s in test_samples if getattr(s, key) in train_groups)
    return shared / len(test_samples)


def naive_speaker_baseline(train_samples, test_samples, extra_samples=()) -> np.ndarray:
    """Score each test clip by its candidate's mean train label; clips of
    unseen candidates get the pooled train(+extra) mean label."""
    if not train_samples:
        raise ContractError("naive baseline requires a non-empty train split")
    sums: dict = {}
    for s in train_samples:
        tot, cnt = sums.get(s.video_id, (0.0, 0))
        sums[s.video_id] = (tot + s.y, cnt + 1)
    pool = list(train_samples) + list(extra_samples)
    fallback = float(np.mean([s.y for s in pool]))
    out = np.empty(len(test_samples))
    for i, s in enumerate(test_samples):
        if s.video_id in sums:
            tot, cnt = sums[s.video_id]
            out[i] = tot / cnt
        else:
            out[i] = fallback
    return out


# ----------------------------------------------------------------- probing

@dataclass
class ProbeConfig:
    penalty: str = "l2"                      # l1 | l2
    strengths: tuple = tuple(10.0 ** e for e in range(-4, 5))
    max_iter: int = 300
    tol: float = 1e-7
    seed: int = 0


@dataclass
class LogisticProbe:
    w: np.ndarray
    b: float
    penalty: str
    strength: float


@dataclass
class OvrProbe:
    probes: list
    penalty: str
    strength: float


def _soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def _sigmoid(x):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def _fit_binary(h, y, penalty, strength, cfg) -> LogisticProbe:
    """Full-batch gradient descent (l2) / proximal gradient (l1) on the
    regularized logistic loss; the intercept is never penalized."""
    n, d = h.shape
    aug = np.hstack([h, np.ones((n, 1))])
    lipschitz = np.linalg.norm(aug, 2) ** 2 / (4.0 * n)
    step = 1.0 / (lipschitz + (strength if penalty == "l2" else 0.0))
    rng = np.random.default_rng(cfg.seed)
    w = 1e-3 * rng.standard_normal(d)
    b = 0.0
    for _ in range(cfg.max_iter):
        p = _sigmoid(h @ w + b)
        gw = h.T @ (p - y) / n
        gb = float((p - y).mean())
        if penalty == "l2":
            new_w = w - step * (gw + strength * w)
        else:
            new_w = _soft_threshold(w - step * gw, step * strength)
        new_b = b - step * gb
        delta = np.linalg.norm(new_w - w) + abs(new_b - b)
        w, b = new_w, new_b
        if delta < cfg.tol:
            break
    return LogisticProbe(w=w, b=b, penalty=penalty, strength=strength)


def fit_probe(h_train, z_train, h_val, z_val, cfg: ProbeConfig | None = None):
    """Fit probes over the strength grid; keep the best validation AUC.

    Binary targets give a LogisticProbe, multiclass targets a one-vs-rest
    OvrProbe scored by macro OvR AUC.
    """
    cfg = cfg or ProbeConfig()
    if cfg.penalty not in ("l1", "l2"):
        raise ContractError(f"unknown probe penalty {cfg.penalty!r}")
    h_train = np.asarray(h_train, dtype=np.float64)
    h_val = np.asarray(h_val, dtype=np.float64)
    z_train = np.asarray(z_train).astype(int)
    z_val = np.asarray(z_val).astype(int)
    classes = np.unique(z_train)
    if classes.size < 2:
        raise ContractError("probe training data has a single class")
    best, best_auc = None, -np.inf
    for strength in cfg.strengths:
        if classes.size == 2:
            probe = _fit_binary(h_train, (z_train == classes.max()).astype(float),
                                cfg.penalty, strength, cfg)
            val_auc = auc(probe_scores(probe, h_val), (z_val == classes.max()).astype(int))
        else:
            probe = OvrProbe(probes=[_fit_binary(h_train, (z_train == c).astype(float),
                                                 cfg.penalty, strength, cfg)
                                     for c in range(classes.max() + 1)],
                             penalty=cfg.penalty, strength=strength)
            val_auc = macro_ovr_auc(probe_scores(probe, h_val), z_val)
        if val_auc > best_auc:
            best, best_auc = probe, val_auc
    return best


def probe_scores(probe, h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if isinstance(probe, OvrProbe):
        return np.stack([_sigmoid(h @ p.w + p.b) for p in probe.probes], axis=1)
    return _sigmoid(h @ probe.w + probe.b)


def diagnose(h_train, z_train, h_val, z_val, h_test, z_test,
             cfg: ProbeConfig | None = None) -> dict:
    """Best validation-selected probe over both penalty norms; reports its
    test AUC and accuracy."""
    base = cfg or ProbeConfig()
    multiclass = np.unique(np.asarray(z_train).astype(int)).size > 2
    best = None
    for penalty in ("l2", "l1"):
        pc = ProbeConfig(penalty=penalty, strengths=base.strengths,
                         max_iter=base.max_iter, tol=base.tol, seed=base.seed)
        probe = fit_probe(h_train, z_train, h_val, z_val, pc)
        scores_val = probe_scores(probe, h_val)
        val_auc = (macro_ovr_auc(scores_val, z_val) if multiclass
                   else auc(scores_val, (np.asarray(z_val) == np.asarray(z_train).max()).astype(int)))
        if best is None or val_auc > best["val_auc"]:
            scores_test = probe_scores(probe, h_test)
            test_auc = (macro_ovr_auc(scores_test, z_test) if multiclass
                        else auc(scores_test, (np.asarray(z_test) == np.asarray(z_train).max()).astype(int)))
            best = {"val_auc": val_auc, "auc": test_auc,
                    "acc": accuracy(scores_test, z_test),
                    "penalty": penalty, "strength": probe.strength}
    return best


# ----------------------------------------------------- representation dump

@dataclass
class Representations:
    h: np.ndarray
    y: np.ndarray
    z: np.ndarray          # -1 where absent
    video_id: list
    split: list


def extract_representations(model: HireabilityModel, samples) -> Representations:
    """Inference-mode 16-d representations paired with labels and groups."""
    if not getattr(model, "trained", False):
        raise ContractError("extract_representations: model has not been trained")
    h, _ = predict(model, samples)
    return Representations(
        h=h,
        y=np.array([s.y for s in samples], dtype=int),
        z=np.array([-1 if s.z is None else int(s.z) for s in samples], dtype=int),
        video_id=[s.video_id for s in samples],
        split=[s.split for s in samples])


# ------------------------------------------------------------------ report

@dataclass
class MetricsReport:
    model_name: str
    hire_acc: float
    hire_auc: float
    diag_auc: dict = field(default_factory=dict)     # target -> test AUC
    diag_acc: dict = field(default_factory=dict)
    di_labels: dict = field(default_factory=dict)    # target -> DI of ground truth
    di_predictions: dict = field(default_factory=dict)
    gmu_contributions: dict | None = None
    threshold: float = 0.5
    di_convention: str = "min-rate/max-rate"
    probe_note: str = "max over the logistic-regression grid (l1 and l2)"

    def to_csv(self, path) -> None:
        cols = ["model", "hire_acc", "hire_auc",
                "diag_auc_gender", "diag_auc_ethnicity",
                "diag_acc_gender", "diag_acc_ethnicity",
                "di_pred_gender", "di_pred_ethnicity",
                "di_label_gender", "di_label_ethnicity",
                "threshold", "di_convention", "probe_note"]
        get = lambda d, k: "" if k not in d else repr(float(d[k]))
        row = [self.model_name, repr(float(self.hire_acc)), repr(float(self.hire_auc)),
               get(self.diag_auc, "gender"), get(self.diag_auc, "ethnicity"),
               get(self.diag_acc, "gender"), get(self.diag_acc, "ethnicity"),
               get(self.di_predictions, "gender"), get(self.di_predictions, "ethnicity"),
               get(self.di_labels, "gender"), get(self.di_labels, "ethnicity"),
               repr(self.threshold), self.di_convention, self.probe_note]
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            fh.write(",".join(row) + "\n")

    def to_markdown(self) -> str:
        def cell(d, k):
            return f"{d[k]:.3f}" if k in d else "-"
        lines = [
            "| Model | Hireability ACC | Hireability AUC | AUC Gender | AUC Ethnicity "
            "| DI Gender | DI Ethnicity |",
            "|---|---|---|---|---|---|---|",
            f"| {self.model_name} | {self.hire_acc:.3f} | {self.hire_auc:.3f} "
            f"| {cell(self.diag_auc, 'gender')} | {cell(self.diag_auc, 'ethnicity')} "
            f"| {cell(self.di_predictions, 'gender')} | {cell(self.di_predictions, 'ethnicity')} |",
        ]
        return "\n".join(lines) + "\n"
