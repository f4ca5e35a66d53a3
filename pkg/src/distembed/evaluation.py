"""Node-classification scoring of frozen embeddings, plus a goodness-of-fit helper."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats


class EvaluationError(ValueError):
    pass


@dataclass
class LabeledSplit:
    train: np.ndarray
    test: np.ndarray
    labels: dict
    seed: int


@dataclass
class F1Report:
    micro_f1: float
    macro_f1: float
    precision: dict
    recall: dict
    f1: dict

    def as_dict(self) -> dict:
        return {"micro_f1": self.micro_f1, "macro_f1": self.macro_f1}


def make_split(labels: dict, fraction: float = 0.10, seed: int = 0) -> LabeledSplit:
    """Stratified train/test split; every class with two or more members gets a train vertex."""
    if not 0 < fraction < 1:
        raise EvaluationError(f"train fraction must lie strictly between 0 and 1, got {fraction}")
    classes = sorted(set(labels.values()))
    if len(classes) < 2:
        raise EvaluationError("need at least 2 classes among labeled vertices")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in classes:
        members = np.array(sorted(v for v, y in labels.items() if y == c), dtype=np.int64)
        members = members[rng.permutation(len(members))]
        k = max(1, round(fraction * len(members))) if len(members) >= 2 else 0
        train.extend(members[:k].tolist())
        test.extend(members[k:].tolist())
    if not test:
        raise EvaluationError("split leaves no test vertices")
    return LabeledSplit(np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(test, dtype=np.int64)),
                        dict(labels), seed)


class OneVsRestLogReg:
    """Binary logistic regressions, one per class, fit by full-batch gradient descent."""

    def __init__(self, l2: float = 1e-4, iters: int = 500, step: float = 0.1):
        self.l2 = l2
        self.iters = iters
        self.step = step
        self.classes: np.ndarray | None = None
        self.W: np.ndarray | None = None
        self.b: np.ndarray | None = None

    def fit(self, X: np.ndarray, y: np.ndarray) -> "OneVsRestLogReg":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        self.classes = np.unique(y)
        if len(self.classes) < 2:
            raise EvaluationError("all training labels are identical; need at least 2 classes")
        Y = (y[:, None] == self.classes[None, :]).astype(np.float64)
        n, d = X.shape
        W = np.zeros((d, len(self.classes)))
        b = np.zeros(len(self.classes))
        step = np.full(len(self.classes), self.step)
        prev = self._loss(X, Y, W, b)
        for _ in range(self.iters):
            z = X @ W + b
            r = _sigmoid(z) - Y
            gW = X.T @ r / n + self.l2 * W
            gb = r.mean(axis=0)
            W_new, b_new = W - step * gW, b - step * gb
            loss = self._loss(X, Y, W_new, b_new)
            worse = loss > prev
            # per class: keep the step if the loss did not rise, else halve it
            W = np.where(worse, W, W_new)
            b = np.where(worse, b, b_new)
            prev = np.where(worse, prev, loss)
            step = np.where(worse, step / 2, step)
        self.W, self.b = W, b
        return self

    def _loss(self, X, Y, W, b) -> np.ndarray:
        z = X @ W + b
        # log(1 + e^z) - y z, stably
        ll = np.logaddexp(0.0, z) - Y * z
        return ll.mean(axis=0) + 0.5 * self.l2 * (W * W).sum(axis=0)

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.W + self.b

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.decision_function(X), axis=1)]


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def f1_report(y_true, y_pred, classes=None) -> F1Report:
    """Micro and macro F1 for single-label predictions; never-predicted classes score 0."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if classes is None:
        classes = np.unique(np.concatenate([y_true, y_pred]))
    precision, recall, f1 = {}, {}, {}
    for c in classes:
        tp = int(np.sum((y_pred == c) & (y_true == c)))
        fp = int(np.sum((y_pred == c) & (y_true != c)))
        fn = int(np.sum((y_pred != c) & (y_true == c)))
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        key = c.item() if hasattr(c, "item") else c
        precision[key], recall[key] = p, r
        f1[key] = 2 * p * r / (p + r) if p + r else 0.0
    micro = float(np.mean(y_true == y_pred)) if len(y_true) else 0.0
    macro = float(np.mean(list(f1.values()))) if f1 else 0.0
    return F1Report(micro, macro, precision, recall, f1)


def normalize_rows(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    norm = np.linalg.norm(X, axis=1, keepdims=True)
    return X / np.where(norm > 0, norm, 1.0)


def evaluate_embeddings(U: np.ndarray, split: LabeledSplit, l2: float = 1e-4, iters: int = 500,
                        normalize: bool = True) -> F1Report:
    """Fit on the split's train vertices and score on its test vertices."""
    U = np.asarray(U)
    ids = np.concatenate([split.train, split.test])
    if len(ids) and ids.max() >= len(U):
        raise EvaluationError(f"no embedding for vertex {int(ids.max())}")
    bad = [int(v) for v in ids if not np.isfinite(U[v]).all()]
    if bad:
        raise EvaluationError(f"non-finite embedding row for vertex {bad[0]}")
    X = normalize_rows(U) if normalize else np.asarray(U, dtype=np.float64)
    y_train = np.array([split.labels[int(v)] for v in split.train])
    y_test = np.array([split.labels[int(v)] for v in split.test])
    model = OneVsRestLogReg(l2=l2, iters=iters).fit(X[split.train], y_train)
    return f1_report(y_test, model.predict(X[split.test]), classes=np.unique(list(split.labels.values())))


def chi_square_fit(counts, expected_probs, min_expected: float = 5.0) -> float:
    """Goodness-of-fit p-value; adjacent low-expectation cells are merged first."""
    counts = np.asarray(counts, dtype=np.float64)
    probs = np.asarray(expected_probs, dtype=np.float64)
    if counts.shape != probs.shape:
        raise ValueError("counts and expected probabilities differ in length")
    if abs(probs.sum() - 1.0) > 1e-9:
        raise ValueError(f"expected probabilities sum to {probs.sum()}, not 1")
    expected = probs * counts.sum()
    obs, exp = [], []
    acc_o = acc_e = 0.0
    for o, e in zip(counts, expected):
        acc_o += o
        acc_e += e
        if acc_e >= min_expected:
            obs.append(acc_o)
            exp.append(acc_e)
            acc_o = acc_e = 0.0
    if acc_e > 0 or acc_o > 0:
        if exp:
            obs[-1] += acc_o
            exp[-1] += acc_e
        else:
            obs.append(acc_o)
            exp.append(acc_e)
    if len(exp) < 2:
        raise EvaluationError("chi-square test undefined: fewer than 2 cells after merging")
    obs, exp = np.array(obs), np.array(exp)
    stat = float(((obs - exp) ** 2 / exp).sum())
    return float(stats.chi2.sf(stat, len(exp) - 1))
