"""Per-(exercise, component) quality prediction: four model families,
leave-one-subject-out evaluation, and the recursive-feature-elimination
baseline.

Binary target: 1 = acceptable quality (full score), 0 = not. F1 treats the
"incorrect" class (label 0) as positive, the clinically salient one;
macro-F1 is reported alongside. Feature standardization statistics are
always computed on training rows only and travel with the fitted model.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import nn
from .kinematics import extract_features, registry_ids
from .motion import MotionClip, Session, segment

ALGORITHMS = ("cart", "logistic", "svm", "mlp")

TRAINING_SIDES = ("dominant", "affected")


# ---------------------------------------------------------------------------
# dataset assembly


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        std = np.where(std == 0.0, 1.0, std)
        return cls(mean=mean, std=std)

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.std


@dataclass
class LabeledDataset:
    """Raw (unstandardized) summary vectors with provenance per row."""

    exercise: str
    component: str
    feature_ids: list[str]
    x: np.ndarray  # (N, n)
    y: np.ndarray  # (N,) binary, 1 = acceptable
    scores: np.ndarray  # (N,) raw 0..2
    subjects: list[str]
    groups: list[str]
    motion_ids: list[str]

    def __post_init__(self):
        n = self.x.shape[0]
        if not (len(self.y) == len(self.scores) == len(self.subjects) == n):
            raise ValueError("row metadata lengths inconsistent")
        if self.x.shape[1] != len(self.feature_ids):
            raise ValueError("feature count mismatches the registry")

    @property
    def n_features(self) -> int:
        return self.x.shape[1]

    def rows(self, mask: np.ndarray) -> "LabeledDataset":
        idx = np.flatnonzero(mask)
        return LabeledDataset(
            exercise=self.exercise,
            component=self.component,
            feature_ids=self.feature_ids,
            x=self.x[idx],
            y=self.y[idx],
            scores=self.scores[idx],
            subjects=[self.subjects[i] for i in idx],
            groups=[self.groups[i] for i in idx],
            motion_ids=[self.motion_ids[i] for i in idx],
        )


def build_dataset(
    sessions: Sequence[Session],
    exercise: str,
    component: str,
    sides: Sequence[str] = TRAINING_SIDES,
    binary_threshold: int = 2,
) -> LabeledDataset:
    """Extract one labeled row per repetition of the matching sessions."""
    ids = registry_ids(exercise, component)
    xs, ys, scores, subjects, groups, motion_ids = [], [], [], [], [], []
    for session in sessions:
        if session.exercise != exercise or session.side not in sides:
            continue
        for clip in segment(session):
            if clip.labels is None:
                continue
            xs.append(extract_features(clip, component))
            scores.append(clip.labels.score(component))
            ys.append(clip.labels.binary(component, binary_threshold))
            subjects.append(session.subject_id)
            groups.append(session.group)
            motion_ids.append(clip.motion_id)
    if not xs:
        raise ValueError(f"no labeled rows for {exercise}/{component} with sides {sides}")
    return LabeledDataset(
        exercise=exercise,
        component=component,
        feature_ids=ids,
        x=np.array(xs),
        y=np.array(ys, dtype=int),
        scores=np.array(scores, dtype=int),
        subjects=subjects,
        groups=groups,
        motion_ids=motion_ids,
    )


# ---------------------------------------------------------------------------
# CART with gini splits and minimal cost-complexity pruning


@dataclass
class TreeNode:
    counts: np.ndarray  # class counts at the node
    feature: Optional[int] = None
    threshold: Optional[float] = None  # goes left when x[feature] <= threshold
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @property
    def prediction(self) -> int:
        return int(np.argmax(self.counts))


def _gini(counts: np.ndarray) -> float:
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts / n
    return float(1.0 - np.sum(p * p))


def _best_split(x: np.ndarray, y: np.ndarray, n_classes: int):
    """Exhaustive gini scan; thresholds sit on data values (x <= v goes left)."""
    n = y.shape[0]
    parent = _gini(np.bincount(y, minlength=n_classes))
    best = None  # (impurity_decrease, feature, threshold)
    for f in range(x.shape[1]):
        order = np.argsort(x[:, f], kind="stable")
        xs = x[order, f]
        ys = y[order]
        onehot = np.zeros((n, n_classes))
        onehot[np.arange(n), ys] = 1.0
        left_counts = np.cumsum(onehot, axis=0)  # counts for splits after row i
        total = left_counts[-1]
        # valid split points: between distinct consecutive values
        cut = np.flatnonzero(xs[:-1] < xs[1:])
        for i in cut:
            lc = left_counts[i]
            rc = total - lc
            nl, nr = lc.sum(), rc.sum()
            score = parent - (nl / n) * _gini(lc) - (nr / n) * _gini(rc)
            if score > 1e-12 and (best is None or score > best[0] + 1e-12):
                best = (float(score), f, float(xs[i]))
    return best


def _grow_tree(x, y, n_classes, depth, max_depth) -> TreeNode:
    counts = np.bincount(y, minlength=n_classes).astype(float)
    node = TreeNode(counts=counts)
    if len(np.unique(y)) == 1 or y.shape[0] < 2:
        return node
    if max_depth is not None and depth >= max_depth:
        return node
    found = _best_split(x, y, n_classes)
    if found is None:
        return node
    _, f, thr = found
    mask = x[:, f] <= thr
    node.feature = f
    node.threshold = thr
    node.left = _grow_tree(x[mask], y[mask], n_classes, depth + 1, max_depth)
    node.right = _grow_tree(x[~mask], y[~mask], n_classes, depth + 1, max_depth)
    return node


def _subtree_stats(node: TreeNode, n_total: int):
    """(misclassification cost of the subtree, leaf count)."""
    if node.is_leaf:
        return (node.n - node.counts.max()) / n_total, 1
    lc, ln = _subtree_stats(node.left, n_total)
    rc, rn = _subtree_stats(node.right, n_total)
    return lc + rc, ln + rn


def _weakest_link(node: TreeNode, n_total: int, best=None):
    """Internal node with the smallest cost-complexity ratio g(t)."""
    if node.is_leaf:
        return best
    own_cost = (node.n - node.counts.max()) / n_total
    sub_cost, leaves = _subtree_stats(node, n_total)
    g = (own_cost - sub_cost) / max(leaves - 1, 1)
    if best is None or g < best[0] - 1e-15:
        best = (g, node)
    best = _weakest_link(node.left, n_total, best)
    return _weakest_link(node.right, n_total, best)


def _prune(root: TreeNode, ccp_alpha: float, n_total: int) -> TreeNode:
    while not root.is_leaf:
        g, node = _weakest_link(root, n_total)
        if g > ccp_alpha:
            break
        node.feature = None
        node.threshold = None
        node.left = None
        node.right = None
    return root


def _tree_depth(node: TreeNode) -> int:
    if node.is_leaf:
        return 0
    return 1 + max(_tree_depth(node.left), _tree_depth(node.right))


def _tree_predict(node: TreeNode, x: np.ndarray) -> tuple[int, float]:
    while not node.is_leaf:
        node = node.left if x[node.feature] <= node.threshold else node.right
    pred = node.prediction
    return pred, float(node.counts[pred] / node.n)


def _tree_to_dict(node: TreeNode) -> dict:
    doc = {"counts": node.counts.tolist()}
    if not node.is_leaf:
        doc.update(
            feature=node.feature,
            threshold=node.threshold,
            left=_tree_to_dict(node.left),
            right=_tree_to_dict(node.right),
        )
    return doc


def _tree_from_dict(doc: dict) -> TreeNode:
    node = TreeNode(counts=np.array(doc["counts"], dtype=float))
    if "feature" in doc:
        node.feature = int(doc["feature"])
        node.threshold = float(doc["threshold"])
        node.left = _tree_from_dict(doc["left"])
        node.right = _tree_from_dict(doc["right"])
    return node


# ---------------------------------------------------------------------------
# linear models


def _sigmoid(z):
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _fit_logistic(
    x: np.ndarray,
    y: np.ndarray,
    penalty: str = "l2",
    strength: float = 0.1,
    lr: float = 0.5,
    max_iter: int = 2000,
    tol: float = 1e-9,
):
    """Proximal full-batch gradient descent on penalized mean log-loss."""
    if penalty not in ("l1", "l2", "elasticnet"):
        raise ValueError(f"unknown penalty {penalty!r}")
    l1_ratio = {"l1": 1.0, "l2": 0.0, "elasticnet": 0.5}[penalty]
    n, d = x.shape
    w = np.zeros(d)
    b = 0.0
    for _ in range(max_iter):
        p = _sigmoid(x @ w + b)
        err = (p - y) / n
        grad_w = x.T @ err + strength * (1.0 - l1_ratio) * w
        grad_b = float(err.sum())
        w_new = w - lr * grad_w
        thresh = lr * strength * l1_ratio
        if thresh > 0:
            w_new = np.sign(w_new) * np.maximum(np.abs(w_new) - thresh, 0.0)
        b_new = b - lr * grad_b
        delta = max(np.max(np.abs(w_new - w)), abs(b_new - b))
        w, b = w_new, b_new
        if delta < tol:
            break
    return w, b


def _fit_linear_svm(x: np.ndarray, y: np.ndarray, c: float = 1.0, iters: int = 1500):
    """Deterministic full-batch Pegasos-style subgradient descent on hinge + L2."""
    n, d = x.shape
    lam = 1.0 / (c * n)
    s = np.where(y == 1, 1.0, -1.0)
    w = np.zeros(d)
    b = 0.0
    for t in range(1, iters + 1):
        lr = 1.0 / (lam * (t + 1))
        margins = s * (x @ w + b)
        viol = margins < 1.0
        grad_w = lam * w - (x[viol].T @ s[viol]) / n
        grad_b = -float(s[viol].sum()) / n
        w = w - lr * grad_w
        b = b - lr * grad_b
    return w, b


# ---------------------------------------------------------------------------
# the model wrapper


class SingleClassError(ValueError):
    pass


@dataclass
class Model:
    """A fitted per-(exercise, component) classifier."""

    algorithm: str
    exercise: str
    component: str
    feature_ids: list[str]
    scaler: Standardizer
    hyperparams: dict
    tree: Optional[TreeNode] = None
    coef: Optional[np.ndarray] = None
    intercept: float = 0.0
    mlp: Optional[nn.MlpParams] = None
    subset: Optional[list[int]] = None  # feature indices used by the model
    training_fold: Optional[str] = None

    def to_dict(self) -> dict:
        doc = {
            "algorithm": self.algorithm,
            "exercise": self.exercise,
            "component": self.component,
            "feature_ids": self.feature_ids,
            "scaler": {"mean": self.scaler.mean.tolist(), "std": self.scaler.std.tolist()},
            "hyperparams": {
                k: (list(v) if isinstance(v, tuple) else v)
                for k, v in self.hyperparams.items()
            },
            "subset": self.subset,
            "training_fold": self.training_fold,
        }
        if self.tree is not None:
            doc["tree"] = _tree_to_dict(self.tree)
        if self.coef is not None:
            doc["coef"] = self.coef.tolist()
            doc["intercept"] = self.intercept
        if self.mlp is not None:
            doc["mlp"] = nn.params_to_dict(self.mlp)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "Model":
        return cls(
            algorithm=doc["algorithm"],
            exercise=doc["exercise"],
            component=doc["component"],
            feature_ids=list(doc["feature_ids"]),
            scaler=Standardizer(
                mean=np.array(doc["scaler"]["mean"]), std=np.array(doc["scaler"]["std"])
            ),
            hyperparams=dict(doc["hyperparams"]),
            tree=_tree_from_dict(doc["tree"]) if "tree" in doc else None,
            coef=np.array(doc["coef"]) if "coef" in doc else None,
            intercept=float(doc.get("intercept", 0.0)),
            mlp=nn.params_from_dict(doc["mlp"]) if "mlp" in doc else None,
            subset=doc.get("subset"),
            training_fold=doc.get("training_fold"),
        )


_HYPERPARAM_KEYS = {
    "cart": {"ccp_alpha", "max_depth"},
    "logistic": {"penalty", "strength", "lr", "max_iter"},
    "svm": {"C", "iters"},
    "mlp": {"hidden", "lr", "max_epochs", "tol", "seed"},
}


def train(
    algorithm: str,
    dataset: LabeledDataset,
    hyperparams: Optional[dict] = None,
    subset: Optional[Sequence[int]] = None,
    training_fold: Optional[str] = None,
) -> Model:
    """Fit one model; standardization is computed from these rows only."""
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    hyperparams = dict(hyperparams or {})
    unknown = set(hyperparams) - _HYPERPARAM_KEYS[algorithm]
    if unknown:
        raise ValueError(f"unknown hyperparameter keys for {algorithm}: {sorted(unknown)}")
    if len(np.unique(dataset.y)) < 2:
        raise SingleClassError("training rows contain a single class")
    scaler = Standardizer.fit(dataset.x)
    x = scaler.transform(dataset.x)
    if subset is not None:
        subset = [int(i) for i in subset]
        x = x[:, subset]
    y = dataset.y
    model = Model(
        algorithm=algorithm,
        exercise=dataset.exercise,
        component=dataset.component,
        feature_ids=list(dataset.feature_ids),
        scaler=scaler,
        hyperparams=hyperparams,
        subset=subset,
        training_fold=training_fold,
    )
    if algorithm == "cart":
        root = _grow_tree(x, y, 2, 0, hyperparams.get("max_depth"))
        model.tree = _prune(root, float(hyperparams.get("ccp_alpha", 0.0)), y.shape[0])
    elif algorithm == "logistic":
        model.coef, model.intercept = _fit_logistic(
            x,
            y,
            penalty=hyperparams.get("penalty", "l2"),
            strength=float(hyperparams.get("strength", 0.1)),
            lr=float(hyperparams.get("lr", 0.5)),
            max_iter=int(hyperparams.get("max_iter", 2000)),
        )
    elif algorithm == "svm":
        model.coef, model.intercept = _fit_linear_svm(
            x, y, c=float(hyperparams.get("C", 1.0)), iters=int(hyperparams.get("iters", 1500))
        )
    else:
        spec = nn.MlpSpec(
            input_width=x.shape[1],
            hidden=tuple(hyperparams.get("hidden", (32,))),
            output_width=2,
            head="softmax",
            seed=int(hyperparams.get("seed", 0)),
        )
        model.mlp, history = nn.fit_classifier(
            spec,
            x,
            y,
            learning_rate=float(hyperparams.get("lr", 0.001)),
            tolerance=float(hyperparams.get("tol", 1e-4)),
            max_epochs=int(hyperparams.get("max_epochs", 200)),
        )
        model.hyperparams = {**hyperparams, "final_loss": history[-1] if history else None}
    return model


def predict(model: Model, x: np.ndarray, standardized: bool = False) -> tuple[int, float]:
    """(binary label, confidence of the predicted class)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != len(model.feature_ids):
        raise ValueError(f"vector length {x.shape[-1]} != registry size {len(model.feature_ids)}")
    if not standardized:
        x = model.scaler.transform(x)
    if model.subset is not None:
        x = x[..., model.subset]
    if model.algorithm == "cart":
        return _tree_predict(model.tree, x)
    if model.algorithm in ("logistic", "svm"):
        z = float(x @ model.coef + model.intercept)
        p1 = float(_sigmoid(np.array([z]))[0])
        label = int(p1 >= 0.5)
        return label, p1 if label == 1 else 1.0 - p1
    probs = nn.forward(model.mlp, x)
    label = int(np.argmax(probs))
    return label, float(probs[label])


def predict_batch(model: Model, x: np.ndarray, standardized: bool = False) -> np.ndarray:
    return np.array([predict(model, row, standardized=standardized)[0] for row in x])


# ---------------------------------------------------------------------------
# metrics


def f1(predictions: Sequence[int], labels: Sequence[int], positive: int = 0) -> float:
    """F1 with the given class treated as positive; 0/0 conventions yield 0."""
    predictions = np.asarray(predictions, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if predictions.shape != labels.shape or predictions.size == 0:
        raise ValueError("predictions and labels must be nonempty and equal length")
    tp = int(np.sum((predictions == positive) & (labels == positive)))
    fp = int(np.sum((predictions == positive) & (labels != positive)))
    fn = int(np.sum((predictions != positive) & (labels == positive)))
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2.0 * precision * recall / (precision + recall)


def macro_f1(predictions: Sequence[int], labels: Sequence[int]) -> float:
    return 0.5 * (f1(predictions, labels, positive=0) + f1(predictions, labels, positive=1))


# ---------------------------------------------------------------------------
# leave-one-subject-out evaluation


@dataclass
class FoldReport:
    """LOSO outcome for one (exercise, component, algorithm)."""

    algorithm: str
    exercise: str
    component: str
    chosen: dict
    fold_subjects: list[str]
    fold_f1: list[float]
    fold_macro_f1: list[float]
    fold_train_f1: list[float]
    fold_checksums: list[str]

    @property
    def mean_f1(self) -> float:
        return float(np.mean(self.fold_f1))

    @property
    def std_f1(self) -> float:
        return float(np.std(self.fold_f1))

    @property
    def mean_macro_f1(self) -> float:
        return float(np.mean(self.fold_macro_f1))


def _fold_checksum(x: np.ndarray, y: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(x).tobytes())
    h.update(np.ascontiguousarray(y).tobytes())
    return h.hexdigest()


def loso(
    dataset: LabeledDataset,
    algorithm: str,
    grid: Optional[Sequence[dict]] = None,
) -> FoldReport:
    """Leave-one-stroke-subject-out evaluation with grid selection.

    Healthy rows stay in every training fold; each fold holds out one stroke
    subject's rows entirely. The grid point is chosen by the mean
    training-fold F1 (first grid point wins ties), and the held-out F1 of
    that point is reported.
    """
    grid = list(grid) if grid is not None else default_grid(algorithm)
    subjects = np.array(dataset.subjects)
    groups = np.array(dataset.groups)
    stroke = sorted(set(subjects[groups == "stroke"]))
    if len(stroke) < 2:
        raise ValueError("LOSO needs at least 2 stroke subjects")
    per_point = []  # (mean_train_f1, fold test f1s, fold macro f1s, train f1s, checksums)
    for point in grid:
        fold_f1s, fold_macros, train_f1s, checksums = [], [], [], []
        for held_out in stroke:
            train_mask = subjects != held_out
            test_mask = ~train_mask
            train_rows = dataset.rows(train_mask)
            if len(np.unique(train_rows.y)) < 2:
                raise SingleClassError(f"fold {held_out}: single-class training rows")
            model = train(algorithm, train_rows, point, training_fold=held_out)
            train_x = model.scaler.transform(train_rows.x)
            train_pred = predict_batch(model, train_x, standardized=True)
            train_f1s.append(f1(train_pred, train_rows.y))
            test_rows = dataset.rows(test_mask)
            test_pred = predict_batch(model, test_rows.x)
            fold_f1s.append(f1(test_pred, test_rows.y))
            fold_macros.append(macro_f1(test_pred, test_rows.y))
            checksums.append(_fold_checksum(train_rows.x, train_rows.y))
        per_point.append((float(np.mean(train_f1s)), fold_f1s, fold_macros, train_f1s, checksums))
    best_idx = max(range(len(grid)), key=lambda i: (per_point[i][0], -i))
    _, fold_f1s, fold_macros, train_f1s, checksums = per_point[best_idx]
    return FoldReport(
        algorithm=algorithm,
        exercise=dataset.exercise,
        component=dataset.component,
        chosen=grid[best_idx],
        fold_subjects=stroke,
        fold_f1=fold_f1s,
        fold_macro_f1=fold_macros,
        fold_train_f1=train_f1s,
        fold_checksums=checksums,
    )


def default_grid(algorithm: str) -> list[dict]:
    """Desk-scale grids; `paper_grid` holds the full published search space."""
    if algorithm == "cart":
        return [{"ccp_alpha": a} for a in (0.0, 0.001, 0.01)]
    if algorithm == "logistic":
        return [
            {"penalty": p, "strength": s}
            for p in ("l1", "l2", "elasticnet")
            for s in (0.01, 0.1, 1.0)
        ]
    if algorithm == "svm":
        return [{"C": 1.0}]
    if algorithm == "mlp":
        return [
            {"hidden": h, "lr": lr}
            for h in ((32,), (64, 64))
            for lr in (0.01, 0.001)
        ]
    raise ValueError(f"unknown algorithm {algorithm!r}")


def paper_grid(algorithm: str) -> list[dict]:
    if algorithm == "mlp":
        widths = (16, 32, 64, 128, 256, 512)
        rates = (0.0001, 0.005, 0.001, 0.01, 0.1)
        return [
            {"hidden": (w,) * layers, "lr": lr}
            for layers in (1, 2, 3)
            for w in widths
            for lr in rates
        ]
    return default_grid(algorithm)


def write_report_csv(reports: Sequence[FoldReport], out_dir) -> None:
    """Two CSVs: algorithm-by-exercise means (components averaged) and the
    per-component breakdown."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    exercises = sorted({r.exercise for r in reports})
    algorithms = sorted({r.algorithm for r in reports})
    with (out_dir / "loso_summary.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["algorithm", *exercises, "overall"])
        for algo in algorithms:
            row = [algo]
            all_means = []
            for ex in exercises:
                rs = [r for r in reports if r.algorithm == algo and r.exercise == ex]
                means = [r.mean_f1 for r in rs]
                stds = [r.std_f1 for r in rs]
                all_means.extend(means)
                row.append(f"{np.mean(means):.4f} +/- {np.mean(stds):.4f}" if means else "")
            row.append(f"{np.mean(all_means):.4f}" if all_means else "")
            writer.writerow(row)
    with (out_dir / "loso_components.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["algorithm", "exercise", "component", "mean_f1", "std_f1", "mean_macro_f1", "chosen"]
        )
        for r in sorted(reports, key=lambda r: (r.algorithm, r.exercise, r.component)):
            writer.writerow(
                [r.algorithm, r.exercise, r.component,
                 f"{r.mean_f1:.4f}", f"{r.std_f1:.4f}", f"{r.mean_macro_f1:.4f}", repr(r.chosen)]
            )


# ---------------------------------------------------------------------------
# recursive feature elimination baseline


def rfe_select(
    dataset: LabeledDataset, k: int, strength: float = 0.01
) -> tuple[list[int], list[int]]:
    """Iteratively drop the smallest-|coefficient| feature of an L2 logistic fit.

    Returns (surviving feature indices in registry order, elimination order).
    """
    n = dataset.n_features
    if not 1 <= k <= n:
        raise ValueError(f"k must be within 1..{n}")
    scaler = Standardizer.fit(dataset.x)
    x_full = scaler.transform(dataset.x)
    remaining = list(range(n))
    eliminated: list[int] = []
    while len(remaining) > k:
        w, _ = _fit_logistic(x_full[:, remaining], dataset.y, penalty="l2", strength=strength)
        drop_pos = int(np.argmin(np.abs(w)))  # ties: lowest index, np.argmin convention
        eliminated.append(remaining.pop(drop_pos))
    return remaining, eliminated
