"""Ridge teacher, clamped pseudo-labels, weighted student, and the bootstrap belief ensemble."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import nn
from .indices import index_matrix
from .synth import WavelengthGrid

FEATURE_KINDS = ("physics", "raw", "combined")

STUDENT_HYPER = nn.TrainConfig(epochs=30, batch_size=128, learning_rate=1e-3, optimizer="adam")
MEMBER_HYPER = nn.TrainConfig(epochs=200, batch_size=32, learning_rate=1e-3)


def extract_features(spectra, grid: WavelengthGrid, kind: str = "physics") -> np.ndarray:
    """Model inputs for one of the feature representations.

    ``raw`` is the VNIR bands only; the SWIR anchor is used by FAI but carries
    no bloom signal of its own.
    """
    spectra = np.atleast_2d(np.asarray(spectra, dtype=float))
    if kind == "physics":
        return index_matrix(spectra, grid)
    if kind == "raw":
        return spectra[:, grid.vnir_mask]
    if kind == "combined":
        return np.hstack([index_matrix(spectra, grid), spectra[:, grid.vnir_mask]])
    raise ValueError(f"unknown feature kind {kind!r}")


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X) -> "Standardizer":
        X = np.asarray(X, dtype=float)
        sd = X.std(axis=0)
        return cls(X.mean(axis=0), np.where(sd > 0, sd, 1.0))

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / self.scale


@dataclass
class RidgeModel:
    weights: np.ndarray
    intercept: float
    reg_strength: float

    def predict(self, X) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.weights + self.intercept


def fit_ridge(features, targets, reg_strength: float = 1.0) -> RidgeModel:
    """Closed-form ridge with an unpenalized intercept (solved on centered data)."""
    X = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if len(X) < 2:
        raise ValueError("ridge needs at least two rows")
    if reg_strength <= 0:
        raise ValueError("reg_strength must be positive")
    xm, ym = X.mean(axis=0), y.mean()
    Xc = X - xm
    A = Xc.T @ Xc + reg_strength * np.eye(X.shape[1])
    w = np.linalg.solve(A, Xc.T @ (y - ym))
    if not np.all(np.isfinite(w)):
        raise FloatingPointError("ridge solution is not finite")
    return RidgeModel(weights=w, intercept=float(ym - xm @ w), reg_strength=float(reg_strength))


def kfold_indices(n: int, folds: int, seed: int):
    order = np.random.default_rng(seed).permutation(n)
    return np.array_split(order, folds)


def ridge_cv(features, targets, reg_grid: Sequence[float], folds: int = 5, seed: int = 0) -> float:
    """Grid value with the lowest mean validation MSE; ties go to the larger value."""
    X = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    if folds < 2:
        raise ValueError("need at least two folds")
    if len(reg_grid) == 0:
        raise ValueError("empty regularization grid")
    if len(y) < folds:
        raise ValueError(f"{len(y)} samples cannot be split into {folds} folds")
    parts = kfold_indices(len(y), folds, seed)
    best, best_mse = None, np.inf
    for reg in sorted(reg_grid):
        errs = []
        for k in range(folds):
            val = parts[k]
            tr = np.concatenate([parts[j] for j in range(folds) if j != k])
            model = fit_ridge(X[tr], y[tr], reg)
            errs.append(np.mean((model.predict(X[val]) - y[val]) ** 2))
        mse = float(np.mean(errs))
        if mse <= best_mse:
            best, best_mse = reg, mse
    return float(best)


@dataclass
class PseudoLabeledSet:
    features: np.ndarray
    labels: np.ndarray
    clamp_range: tuple
    sample_weight: float = 1.0

    def __len__(self):
        return len(self.labels)


def pseudo_label(teacher: RidgeModel, pool_features, train_targets) -> PseudoLabeledSet:
    pool = np.atleast_2d(np.asarray(pool_features, dtype=float))
    if len(pool) == 0:
        raise ValueError("empty unlabeled pool")
    lo, hi = float(np.min(train_targets)), float(np.max(train_targets))
    labels = np.clip(teacher.predict(pool), lo, hi)
    return PseudoLabeledSet(features=pool, labels=labels, clamp_range=(lo, hi))


def student_specs(input_width: int, hidden=(64, 32), dropout: float = 0.3):
    return nn.mlp_specs([input_width, *hidden, 1], batch_norm=True, dropout=dropout)


def train_student(labeled: nn.WeightedDataset, pseudo: Optional[PseudoLabeledSet],
                  hyper: nn.TrainConfig = STUDENT_HYPER, specs=None) -> nn.Network:
    """Fit the student MLP on labeled rows (their own weights) plus pseudo-labeled rows."""
    if pseudo is not None and len(pseudo):
        data = nn.WeightedDataset(
            np.vstack([labeled.inputs, pseudo.features]),
            np.concatenate([labeled.targets, pseudo.labels]),
            np.concatenate([labeled.sample_weights, np.full(len(pseudo), pseudo.sample_weight)]),
        )
    else:
        data = labeled
    specs = specs or student_specs(data.inputs.shape[1])
    net = nn.init_network(specs, hyper.seed)
    return nn.train(net, data, hyper)


def labeled_set(features, targets, weight: float = 10.0) -> nn.WeightedDataset:
    return nn.WeightedDataset(features, targets, np.full(len(targets), float(weight)))


@dataclass
class BeliefEnsemble:
    members: list
    feature_kind: str = "physics"

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        shape = [(s.input_width, s.output_width) for s in self.members[0].specs]
        for m in self.members[1:]:
            if [(s.input_width, s.output_width) for s in m.specs] != shape:
                raise ValueError("ensemble members must share a layer shape")

    @property
    def size(self) -> int:
        return len(self.members)

    def member_predictions(self, features) -> np.ndarray:
        X = np.atleast_2d(np.asarray(features, dtype=float))
        if X.shape[1] != self.members[0].input_width:
            raise ValueError(
                f"features have width {X.shape[1]}, members expect {self.members[0].input_width}")
        return np.stack([m.predict(X) for m in self.members])


def member_specs(input_width: int, hidden: int = 32):
    return nn.mlp_specs([input_width, hidden, 1])


def fit_ensemble(features, targets, M: int = 10, hyper: nn.TrainConfig = MEMBER_HYPER,
                 seed: int = 0, hidden: int = 32, bootstrap: bool = True,
                 shared_seed: bool = False, feature_kind: str = "physics") -> BeliefEnsemble:
    """M networks, each on its own bootstrap resample with its own seed.

    ``bootstrap=False, shared_seed=True`` trains M identical members (used in tests).
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    X = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    n = len(y)
    children = np.random.SeedSequence(seed).spawn(M)
    members = []
    for m in range(M):
        ss = children[0] if shared_seed else children[m]
        rng = np.random.default_rng(ss)
        idx = rng.integers(0, n, size=n) if bootstrap else np.arange(n)
        member_seed = int(rng.integers(2**31)) if not shared_seed else int(ss.generate_state(1)[0])
        h = nn.TrainConfig(**{**hyper.__dict__, "seed": member_seed})
        net = nn.init_network(member_specs(X.shape[1], hidden), member_seed)
        members.append(nn.train(net, nn.WeightedDataset(X[idx], y[idx]), h))
    return BeliefEnsemble(members, feature_kind)


def belief_predict(ensemble: BeliefEnsemble, features):
    """Member mean and population (divide-by-M) standard deviation."""
    P = ensemble.member_predictions(features)
    mu = P.mean(axis=0)
    sigma = np.sqrt(np.mean((P - mu) ** 2, axis=0))
    sigma[np.all(P == P[0], axis=0)] = 0.0   # the float mean of equal values can be off by an ulp
    return mu, sigma


@dataclass
class BeliefModel:
    """Ensemble plus the feature pipeline that feeds it (spectra in, mu/sigma out)."""
    ensemble: BeliefEnsemble
    standardizer: Standardizer
    feature_kind: str = "physics"
    clamp_range: Optional[tuple] = None
    extra: dict = field(default_factory=dict)

    def features(self, spectra, grid: WavelengthGrid) -> np.ndarray:
        return self.standardizer.transform(extract_features(spectra, grid, self.feature_kind))

    def predict_spectra(self, spectra, grid: WavelengthGrid):
        return belief_predict(self.ensemble, self.features(spectra, grid))

    def predict_scene(self, scene):
        return self.predict_spectra(scene.spectra, scene.grid)


def fit_belief_model(spectra, grid: WavelengthGrid, targets, feature_kind: str = "physics",
                     M: int = 10, hyper: nn.TrainConfig = MEMBER_HYPER, seed: int = 0,
                     hidden: int = 32) -> BeliefModel:
    raw = extract_features(spectra, grid, feature_kind)
    std = Standardizer.fit(raw)
    ens = fit_ensemble(std.transform(raw), targets, M=M, hyper=hyper, seed=seed,
                       hidden=hidden, feature_kind=feature_kind)
    y = np.asarray(targets, dtype=float)
    return BeliefModel(ens, std, feature_kind, clamp_range=(float(y.min()), float(y.max())))


def save_belief_model(model: BeliefModel, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = []
    for i, m in enumerate(model.ensemble.members):
        name = f"member_{i:03d}.json"
        nn.save_network(m, d / name)
        names.append(name)
    manifest = {
        "format": "lakesense-belief",
        "version": 1,
        "feature_kind": model.feature_kind,
        "clamp_range": None if model.clamp_range is None else list(model.clamp_range),
        "standardizer": {"mean": model.standardizer.mean.tolist(),
                         "scale": model.standardizer.scale.tolist()},
        "members": names,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_belief_model(directory) -> BeliefModel:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest.get("format") != "lakesense-belief":
        raise ValueError("not a belief model manifest")
    members = [nn.load_network(d / name) for name in manifest["members"]]
    std = Standardizer(np.asarray(manifest["standardizer"]["mean"]),
                       np.asarray(manifest["standardizer"]["scale"]))
    cr = manifest["clamp_range"]
    return BeliefModel(BeliefEnsemble(members, manifest["feature_kind"]), std,
                       manifest["feature_kind"], None if cr is None else tuple(cr))
