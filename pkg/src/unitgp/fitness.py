"""Wrapper and filter fitness: CV-scored classifiers and interval entropy.

Wrapper fitness augments the training partition with an individual's
constructed columns and scores a classifier by stratified k-fold
cross-validation; filter fitness ranks the constructed columns by how much
they reduce class entropy across equal-frequency intervals, independent of
any classifier. Missing values are imputed with medians computed on the
training fold only, never on validation rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.tree import DecisionTreeClassifier

from .data import Dataset
from .tree import evaluate

WRAPPER = "wrapper"
FILTER = "filter"


@dataclass(frozen=True)
class FitnessSpec:
    """Which fitness to use and with what knobs."""

    kind: str = WRAPPER
    classifier: str = "dt"  # dt | knn | nb (wrapper only)
    k_folds: int = 3
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in (WRAPPER, FILTER):
            raise ValueError(f"unknown fitness kind {self.kind!r}")
        if self.k_folds < 2:
            raise ValueError("k_folds must be >= 2")
        if self.kind == WRAPPER and self.classifier not in ("dt", "knn", "nb"):
            raise ValueError(f"unknown classifier {self.classifier!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> "FitnessSpec":
        return cls(
            kind=doc.get("kind", WRAPPER),
            classifier=doc.get("classifier", "dt"),
            k_folds=int(doc.get("k_folds", 3)),
            params=dict(doc.get("params", {})),
        )

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "classifier": self.classifier,
            "k_folds": self.k_folds,
            "params": dict(self.params),
        }


@dataclass(frozen=True)
class FitnessReport:
    """Score, the run baseline it is compared against, and their difference."""

    score: float
    baseline: float
    gain: float
    valid: bool = True


# -- classifiers ---------------------------------------------------------------


class DecisionTreeModel:
    """Gini-split binary decision tree (midpoint thresholds, majority leaves)."""

    def __init__(self, max_depth: int = 10, min_leaf: int = 5):
        self._est = DecisionTreeClassifier(
            criterion="gini", max_depth=max_depth, min_samples_leaf=min_leaf, random_state=0
        )

    def fit(self, X: np.ndarray, y: np.ndarray) -> "DecisionTreeModel":
        if len(y) == 0:
            raise ValueError("empty training set")
        self._est.fit(X, y)
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self._est.predict(X).astype(np.int64)


class KNNModel:
    """k-nearest-neighbours on z-scored features with fully pinned tie rules.

    Distance ties resolve toward the smaller training-row index, vote ties
    toward the smaller class label; zero-variance columns do not contribute
    to the distance.
    """

    def __init__(self, k: int = 5):
        self.k = k

    def fit(self, X: np.ndarray, y: np.ndarray) -> "KNNModel":
        if len(y) == 0:
            raise ValueError("empty training set")
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        self._keep = std > 0.0
        self._mean = mean[self._keep]
        self._std = std[self._keep]
        self._train = (X[:, self._keep] - self._mean) / self._std
        self._y = np.asarray(y, dtype=np.int64)
        self._n_classes = int(self._y.max()) + 1
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        k = min(self.k, len(self._y))
        Z = (X[:, self._keep] - self._mean) / self._std
        out = np.empty(len(Z), dtype=np.int64)
        block = 512
        for start in range(0, len(Z), block):
            chunk = Z[start : start + block]
            if self._train.shape[1] == 0:
                d2 = np.zeros((len(chunk), len(self._y)))
            else:
                d2 = ((chunk[:, None, :] - self._train[None, :, :]) ** 2).sum(axis=2)
            order = np.argsort(d2, axis=1, kind="stable")[:, :k]
            for i, neigh in enumerate(order):
                votes = np.bincount(self._y[neigh], minlength=self._n_classes)
                out[start + i] = int(np.argmax(votes))
        return out


class NaiveBayesModel:
    """Gaussian naive Bayes with per-feature variance floors."""

    def __init__(self, var_floor_scale: float = 1e-9):
        self.var_floor_scale = var_floor_scale

    def fit(self, X: np.ndarray, y: np.ndarray) -> "NaiveBayesModel":
        if len(y) == 0:
            raise ValueError("empty training set")
        y = np.asarray(y, dtype=np.int64)
        self._classes = np.arange(int(y.max()) + 1)
        n = len(y)
        global_var = X.var(axis=0)
        floor = self.var_floor_scale * global_var
        self._priors = np.array([(y == c).sum() / n for c in self._classes])
        means, variances = [], []
        for c in self._classes:
            rows = X[y == c]
            if len(rows) == 0:
                means.append(np.zeros(X.shape[1]))
                variances.append(np.maximum(floor, 0.0))
                continue
            means.append(rows.mean(axis=0))
            variances.append(np.maximum(rows.var(axis=0), floor))
        self._means = np.array(means)
        self._vars = np.array(variances)
        # a feature constant across the whole fold carries no signal
        self._usable = self._vars.max(axis=0) > 0.0
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore"):
            log_prior = np.log(self._priors)
        scores = np.tile(log_prior, (len(X), 1))
        for ci in range(len(self._classes)):
            mu = self._means[ci][self._usable]
            var = self._vars[ci][self._usable]
            Z = X[:, self._usable]
            ll = -0.5 * (((Z - mu) ** 2) / var + np.log(2.0 * np.pi * var))
            scores[:, ci] += ll.sum(axis=1)
        return np.argmax(scores, axis=1).astype(np.int64)


def make_classifier(spec: FitnessSpec):
    p = spec.params
    if spec.classifier == "dt":
        return DecisionTreeModel(max_depth=int(p.get("dt_max_depth", 10)), min_leaf=int(p.get("dt_min_leaf", 5)))
    if spec.classifier == "knn":
        return KNNModel(k=int(p.get("knn_k", 5)))
    return NaiveBayesModel()


def train_decision_tree(X, y, max_depth: int = 10, min_leaf: int = 5) -> DecisionTreeModel:
    return DecisionTreeModel(max_depth=max_depth, min_leaf=min_leaf).fit(np.asarray(X, float), np.asarray(y))


def train_knn(X, y, knn_k: int = 5) -> KNNModel:
    return KNNModel(k=knn_k).fit(np.asarray(X, float), np.asarray(y))


def train_naive_bayes(X, y) -> NaiveBayesModel:
    return NaiveBayesModel().fit(np.asarray(X, float), np.asarray(y))


def predict(model, X) -> np.ndarray:
    return model.predict(np.asarray(X, float))


# -- cross-validation -----------------------------------------------------------


def fold_assignment(y: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Stratified fold ids, deterministic under seed.

    Each class is shuffled and dealt evenly; leftover rows go to the currently
    smallest folds, keeping fold sizes within one row of each other and each
    fold's class counts within one of proportional.
    """
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    folds = np.empty(len(y), dtype=np.int64)
    fold_sizes = np.zeros(k, dtype=np.int64)
    for c in np.unique(y):
        rows = np.flatnonzero(y == c)
        rows = rows[rng.permutation(rows.size)]
        base, extra = divmod(rows.size, k)
        counts = np.full(k, base, dtype=np.int64)
        for _ in range(extra):
            smallest = int(np.argmin(fold_sizes + counts))
            counts[smallest] += 1
        pos = 0
        for f in range(k):
            folds[rows[pos : pos + counts[f]]] = f
            pos += counts[f]
        fold_sizes += counts
    return folds


def _impute_train_medians(X_train: np.ndarray):
    with np.errstate(all="ignore"):
        med = np.nanmedian(X_train, axis=0)
    med = np.where(np.isfinite(med), med, 0.0)
    return med


def _fill(X: np.ndarray, med: np.ndarray) -> np.ndarray:
    mask = np.isnan(X)
    if not mask.any():
        return X
    out = X.copy()
    out[mask] = np.take(med, np.nonzero(mask)[1])
    return out


def kfold_cv_arrays(spec: FitnessSpec, X: np.ndarray, y: np.ndarray, seed: int, folds=None) -> float:
    """Mean validation accuracy (a fraction in [0, 1]) over stratified folds."""
    if folds is None:
        folds = fold_assignment(y, spec.k_folds, seed)
    accs = []
    for f in range(spec.k_folds):
        val = folds == f
        tr = ~val
        med = _impute_train_medians(X[tr])
        model = make_classifier(spec).fit(_fill(X[tr], med), y[tr])
        pred = model.predict(_fill(X[val], med))
        accs.append(float((pred == y[val]).mean()))
    return float(np.mean(accs))


def kfold_cv_accuracy(spec: FitnessSpec, d: Dataset, seed: int) -> float:
    """Stratified k-fold CV accuracy of the spec's classifier on a dataset."""
    return kfold_cv_arrays(spec, d.X, d.y, seed)


# -- feature construction ---------------------------------------------------------


def augment(d: Dataset, individual) -> tuple[Dataset, bool]:
    """Append the individual's constructed columns to the dataset.

    Original columns are never altered; missing entries stay missing here
    (imputation happens at classifier-training time with fold statistics).
    Returns (dataset, valid); valid is False when some constructed column is
    entirely missing.
    """
    cols = [evaluate(t, d) for t in individual.trees]
    valid = all(np.isfinite(c).any() for c in cols)
    names = [f"gp_feat_{i}" for i in range(len(cols))]
    types = [t.return_type for t in individual.trees]
    return d.with_columns(names, types, cols), valid


def _interval_entropy(values: np.ndarray, y: np.ndarray, n_classes: int, bins: int) -> float | None:
    mask = np.isfinite(values)
    if not mask.any():
        return None
    v = values[mask]
    labels = y[mask]
    m = v.size
    order = np.argsort(v, kind="stable")
    sv = v[order]
    sl = labels[order]
    prov = (np.arange(m) * bins) // m
    # rows with equal values must share a bin or the score would depend on
    # more than the ordering
    new_group = np.empty(m, dtype=bool)
    new_group[0] = True
    new_group[1:] = sv[1:] != sv[:-1]
    group_first = np.flatnonzero(new_group)
    group_id = np.cumsum(new_group) - 1
    bin_ids = prov[group_first][group_id]

    joint = np.bincount(bin_ids * n_classes + sl, minlength=(bin_ids.max() + 1) * n_classes)
    joint = joint.reshape(-1, n_classes).astype(float)
    bin_totals = joint.sum(axis=1)
    keep = bin_totals > 0
    joint = joint[keep]
    bin_totals = bin_totals[keep]

    def entropy_bits(counts, total):
        p = counts / total
        nz = p > 0
        return float(-(p[nz] * np.log2(p[nz])).sum())

    h_global = entropy_bits(np.bincount(sl, minlength=n_classes).astype(float), float(m))
    if h_global == 0.0:
        return 0.0
    h_cond = sum(
        (bin_totals[b] / m) * entropy_bits(joint[b], bin_totals[b]) for b in range(len(bin_totals))
    )
    score = 1.0 - h_cond / h_global
    return float(min(max(score, 0.0), 1.0))


def entropy_fitness(individual, d: Dataset, bins: int = 20) -> float:
    """Mean interval-entropy score of the constructed columns, in [0, 1].

    1 means the feature's intervals separate the classes perfectly, 0 means
    they say nothing; constant columns score 0 and an individual with an
    all-missing column scores 0 outright.
    """
    n_classes = d.n_classes
    scores = []
    for t in individual.trees:
        s = _interval_entropy(evaluate(t, d), d.y, n_classes, bins)
        if s is None:
            return 0.0
        scores.append(s)
    return float(np.mean(scores))


# -- the fitness entry points -------------------------------------------------------


def compute_baseline(spec: FitnessSpec, train: Dataset, seed: int) -> float:
    """Run baseline: CV accuracy (in points) of base features, or 0 for filters."""
    if spec.kind == FILTER:
        return 0.0
    return 100.0 * kfold_cv_accuracy(spec, train, seed)


def fitness(individual, spec: FitnessSpec, train: Dataset, baseline: float, seed: int) -> FitnessReport:
    """Score one individual against the training partition.

    Wrapper: CV accuracy of the classifier on base + constructed columns, in
    accuracy points. Filter: the interval-entropy score. An invalid individual
    (an all-missing constructed column) scores 0.
    """
    if spec.kind == FILTER:
        bins = int(spec.params.get("entropy_bins", 20))
        scores = []
        for t in individual.trees:
            s = _interval_entropy(evaluate(t, train), train.y, train.n_classes, bins)
            if s is None:
                return FitnessReport(0.0, baseline, -baseline, valid=False)
            scores.append(s)
        score = float(np.mean(scores))
        return FitnessReport(score, baseline, score - baseline, valid=True)
    augmented, valid = augment(train, individual)
    if not valid:
        return FitnessReport(0.0, baseline, -baseline, valid=False)
    score = 100.0 * kfold_cv_arrays(spec, augmented.X, augmented.y, seed)
    return FitnessReport(score, baseline, score - baseline, valid=True)


class FitnessEvaluator:
    """Picklable fitness function bound to a training partition.

    Fold assignment is derived once from the seed, so evaluation is a pure
    function of the individual and identical across any number of workers.
    """

    def __init__(self, spec: FitnessSpec, train: Dataset, seed: int, baseline: float | None = None):
        self.spec = spec
        self.train = train
        self.seed = seed
        self.folds = fold_assignment(train.y, spec.k_folds, seed) if spec.kind == WRAPPER else None
        self.baseline = compute_baseline(spec, train, seed) if baseline is None else baseline

    def __call__(self, individual) -> FitnessReport:
        if self.spec.kind == FILTER:
            return fitness(individual, self.spec, self.train, self.baseline, self.seed)
        augmented, valid = augment(self.train, individual)
        if not valid:
            return FitnessReport(0.0, self.baseline, -self.baseline, valid=False)
        score = 100.0 * kfold_cv_arrays(self.spec, augmented.X, augmented.y, self.seed, folds=self.folds)
        return FitnessReport(score, self.baseline, score - self.baseline, valid=True)


def holdout_accuracy(spec: FitnessSpec, train: Dataset, test: Dataset) -> float:
    """Accuracy (fraction) on the test partition of a model fit on all of train."""
    med = _impute_train_medians(train.X)
    model = make_classifier(spec).fit(_fill(train.X, med), train.y)
    pred = model.predict(_fill(test.X, med))
    return float((pred == test.y).mean())


def test_gain(spec: FitnessSpec, train: Dataset, test: Dataset, individual) -> dict:
    """Test-set accuracy with and without the constructed columns, in points."""
    if spec.kind == FILTER:
        spec = FitnessSpec(kind=WRAPPER, classifier="dt", k_folds=spec.k_folds, params=spec.params)
    base = 100.0 * holdout_accuracy(spec, train, test)
    aug_train, valid_train = augment(train, individual)
    aug_test, valid_test = augment(test, individual)
    if not (valid_train and valid_test):
        return {"baseline_test_accuracy": base, "test_accuracy": base, "test_gain": 0.0, "valid": False}
    acc = 100.0 * holdout_accuracy(spec, aug_train, aug_test)
    return {"baseline_test_accuracy": base, "test_accuracy": acc, "test_gain": acc - base, "valid": True}
