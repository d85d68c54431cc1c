"""Feature scaling, PCA for the semantic embeddings, and ADASYN oversampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-8


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray
    epsilon: float = STD_FLOOR

    def apply(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.mean.size:
            raise ValueError(f"expected {self.mean.size} columns, got {X.shape[-1]}")
        return (X - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "epsilon": self.epsilon}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64),
                   float(d.get("epsilon", STD_FLOOR)))


def fit_standardizer(X: np.ndarray, epsilon: float = STD_FLOOR) -> Standardizer:
    """Column mean and population std of ``X`` (rows are observations).

    Columns whose std falls below ``epsilon`` keep the floor, so constant
    columns map to zero instead of dividing by zero.
    """
    X = np.asarray(X, dtype=np.float64)
    X = X.reshape(-1, X.shape[-1])
    if X.shape[0] < 2:
        raise ValueError(f"standardizer needs at least 2 rows, got {X.shape[0]}")
    mu = X.mean(axis=0)
    sd = np.sqrt(((X - mu) ** 2).mean(axis=0))
    sd = np.where(sd < epsilon, epsilon, sd)
    return Standardizer(mu, sd, epsilon)


# --- PCA -------------------------------------------------------------------------

def jacobi_eigh(A: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns eigenvalues in descending order and the matching eigenvectors as
    columns. Sweeps stop once the off-diagonal Frobenius norm drops below
    ``tol`` times the matrix norm.
    """
    A = np.array(A, dtype=np.float64)
    n = A.shape[0]
    if A.shape != (n, n) or not np.allclose(A, A.T, atol=1e-12 * max(1.0, np.abs(A).max())):
        raise ValueError("jacobi_eigh needs a symmetric square matrix")
    V = np.eye(n)
    scale = max(np.linalg.norm(A), np.finfo(float).tiny)
    for _ in range(max_sweeps):
        off = np.linalg.norm(A - np.diag(np.diag(A)))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-18 * scale:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                if theta == 0:
                    t = 1.0
                elif abs(theta) > 1e150:
                    # theta**2 would overflow; this is the limit of the formula below
                    t = 0.5 / theta
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # A <- J^T A J for the (p, q) rotation
                ap, aq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                ap, aq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * ap - s * aq
                A[q, :] = s * ap + c * aq
                A[p, q] = A[q, p] = 0.0
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    else:
        logger.warning("jacobi_eigh: no convergence after %d sweeps", max_sweeps)
    w = np.diag(A).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], V[:, order]


def _fix_signs(components: np.ndarray) -> np.ndarray:
    # make the largest-magnitude entry of every row positive
    idx = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(len(components)), idx])
    signs[signs == 0] = 1.0
    return components * signs[:, None]


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (R, D), orthonormal rows
    explained_variance: np.ndarray

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    def apply(self, X: np.ndarray) -> np.ndarray:
        return apply_pca(self, X)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "components": self.components.tolist(),
                "explained_variance": self.explained_variance.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "PcaModel":
        return cls(np.asarray(d["mean"], dtype=np.float64),
                   np.asarray(d["components"], dtype=np.float64).reshape(len(d["components"]), -1),
                   np.asarray(d["explained_variance"], dtype=np.float64))


def covariance(X: np.ndarray) -> np.ndarray:
    Xc = X - X.mean(axis=0)
    return Xc.T @ Xc / (X.shape[0] - 1)


def fit_pca(X: np.ndarray, n_components: int = 25, solver: str = "eigh") -> PcaModel:
    """Top principal axes of the sample covariance of ``X`` (N, D).

    ``solver`` picks LAPACK's symmetric eigensolver (``"eigh"``) or the
    in-house cyclic Jacobi routine (``"jacobi"``).
    """
    X = np.asarray(X, dtype=np.float64)
    N, D = X.shape
    if N < 2:
        raise ValueError("PCA needs at least 2 rows")
    if not 1 <= n_components <= min(N - 1, D):
        raise ValueError(f"n_components={n_components} out of range [1, {min(N - 1, D)}]")
    C = covariance(X)
    if solver == "eigh":
        w, V = np.linalg.eigh(C)
        order = np.argsort(-w, kind="stable")
        w, V = w[order], V[:, order]
    elif solver == "jacobi":
        w, V = jacobi_eigh(C)
    else:
        raise ValueError(f"unknown solver {solver!r}")
    comps = _fix_signs(V[:, :n_components].T.copy())
    var = np.clip(w[:n_components], 0.0, None)
    return PcaModel(X.mean(axis=0), comps, var)


def apply_pca(model: PcaModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != model.mean.size:
        raise ValueError(f"PCA expects {model.mean.size} columns, got {X.shape[-1]}")
    return (X - model.mean) @ model.components.T


# --- ADASYN ----------------------------------------------------------------------

@dataclass
class ResampleReport:
    counts_before: list[int]
    counts_after: list[int]
    synthetic: list[int]
    k_neighbors: int
    beta: float
    seed: int
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"counts_before": self.counts_before, "counts_after": self.counts_after,
                "synthetic": self.synthetic, "k_neighbors": self.k_neighbors,
                "beta": self.beta, "seed": self.seed, "warnings": list(self.warnings)}


def _knn(X: np.ndarray, queries: np.ndarray, k: int, self_index: np.ndarray | None = None,
         chunk: int = 1024) -> np.ndarray:
    """Indices of the k nearest rows of ``X`` for every query row (brute force, exact).

    ``self_index[i]`` is the row of ``X`` that query i came from; it is never
    returned as its own neighbour.
    """
    sq = np.einsum("ij,ij->i", X, X)
    out = np.empty((queries.shape[0], k), dtype=np.int64)
    for start in range(0, queries.shape[0], chunk):
        Q = queries[start:start + chunk]
        d = np.einsum("ij,ij->i", Q, Q)[:, None] - 2.0 * Q @ X.T + sq[None, :]
        if self_index is not None:
            d[np.arange(Q.shape[0]), self_index[start:start + chunk]] = np.inf
        # stable sort keeps ties ordered by index, so results are reproducible
        out[start:start + Q.shape[0]] = np.argsort(d, axis=1, kind="stable")[:, :k]
    return out


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    raw = weights * total
    base = np.floor(raw).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        order = np.argsort(-(raw - base), kind="stable")
        base[order[:short]] += 1
    return base


def adasyn(X: np.ndarray, y: np.ndarray, k: int = 5, beta: float = 1.0,
           seed: int = 7) -> tuple[np.ndarray, np.ndarray, ResampleReport]:
    """Adaptive synthetic oversampling of every class below the majority count.

    For a minority class with n_min rows, ``G = (n_maj - n_min) * beta``
    synthetic rows are shared out in proportion to how many of each row's k
    nearest neighbours (over all classes) belong to other classes. Each new
    row interpolates between a minority row and one of its k nearest
    same-class neighbours. Original rows come first and are returned
    unchanged; synthetic rows are appended class by class.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[1] < 1 or X.shape[0] != y.size:
        raise ValueError(f"adasyn expects X (N, D>=1) and matching y, got {X.shape} and {y.shape}")
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    n_classes = int(y.max()) + 1 if y.size else 0
    counts = np.bincount(y, minlength=n_classes)
    n_maj = int(counts.max())
    rng = np.random.default_rng(seed)
    report = ResampleReport(counts.tolist(), counts.tolist(), [0] * n_classes, k, beta, seed)

    k_all = min(k, X.shape[0] - 1)
    if k_all < k:
        report.warnings.append(f"k clamped to {k_all} for the all-class neighbourhood")
    new_X, new_y = [], []
    for c in range(n_classes):
        n_c = int(counts[c])
        G = int(np.floor((n_maj - n_c) * beta + 1e-9))
        if G <= 0 or n_c == 0:
            continue
        if n_c < 2:
            raise ValueError(f"class {c} has {n_c} sample; ADASYN needs at least 2")
        members = np.flatnonzero(y == c)
        Xc = X[members]

        neigh = _knn(X, Xc, k_all, self_index=members)
        ratios = np.mean(y[neigh] != c, axis=1)
        if ratios.sum() > 0:
            weights = ratios / ratios.sum()
        else:
            weights = np.full(n_c, 1.0 / n_c)
            report.warnings.append(f"class {c}: no other-class neighbours, allocating uniformly")
        per_row = _largest_remainder(weights, G)

        k_min = min(k, n_c - 1)
        if k_min < k:
            report.warnings.append(f"class {c}: k clamped to {k_min} for the same-class neighbourhood")
        own = _knn(Xc, Xc, k_min, self_index=np.arange(n_c))
        for i in np.flatnonzero(per_row):
            g = int(per_row[i])
            picks = own[i, rng.integers(k_min, size=g)]
            lam = rng.random(g)
            new_X.append(Xc[i] + lam[:, None] * (Xc[picks] - Xc[i]))
            new_y.append(np.full(g, c, dtype=np.int64))
        report.synthetic[c] = G
        report.counts_after[c] = n_c + G

    if new_X:
        return np.vstack([X] + new_X), np.concatenate([y] + new_y), report
    return X.copy(), y.copy(), report


# --- pipeline ------------------------------------------------------------------------

BLOCKS = ("eye", "ppg", "semantic")


@dataclass
class PrepConfig:
    pca_dim: int = 25  # 0 keeps the raw embedding width
    standardize: bool = True
    adasyn: bool = True
    adasyn_k: int = 5
    adasyn_beta: float = 1.0

    def validate(self) -> None:
        if self.pca_dim < 0:
            raise ValueError("pca_dim must be >= 0")
        if self.adasyn_k < 1:
            raise ValueError("adasyn_k must be >= 1")
        if not 0.0 <= self.adasyn_beta <= 1.0:
            raise ValueError("adasyn_beta must lie in [0, 1]")


class Preprocessor:
    """PCA on semantic rows followed by per-modality standardisation.

    Fitted on one set of samples only; ``fitted_ids`` records which, so
    callers can check that evaluation samples never leaked into the fit.
    """

    def __init__(self, config: PrepConfig | None = None):
        self.config = config or PrepConfig()
        self.pca: PcaModel | None = None
        self.scalers: dict[str, Standardizer] = {}
        self.fitted_ids: tuple[str, ...] = ()

    def fit(self, dataset) -> "Preprocessor":
        self.config.validate()
        self.fitted_ids = tuple(dataset.ids)
        sem = dataset.stack("semantic")
        if self.config.pca_dim:
            self.pca = fit_pca(sem.reshape(-1, sem.shape[-1]), self.config.pca_dim)
        self.scalers = {}
        if self.config.standardize:
            for m in BLOCKS:
                self.scalers[m] = fit_standardizer(self._reduce(m, dataset.stack(m)))
        return self

    def _reduce(self, m: str, block: np.ndarray) -> np.ndarray:
        if m == "semantic" and self.pca is not None:
            return apply_pca(self.pca, block)
        return block

    def transform(self, dataset) -> dict[str, np.ndarray]:
        out = {}
        for m in BLOCKS:
            x = self._reduce(m, dataset.stack(m))
            out[m] = self.scalers[m].apply(x) if m in self.scalers else x
        return out

    def output_dims(self, dataset) -> dict[str, int]:
        dims = dict(dataset.feature_dims)
        if self.pca is not None:
            dims["semantic"] = self.pca.n_components
        return dims

    def resample(self, arrays: dict[str, np.ndarray], labels: np.ndarray,
                 seed: int) -> tuple[dict[str, np.ndarray], np.ndarray, ResampleReport | None]:
        """ADASYN on the flattened (eye | ppg | semantic) vectors, then split back."""
        if not self.config.adasyn:
            return arrays, labels, None
        shapes = {m: arrays[m].shape[1:] for m in BLOCKS}
        flat = np.concatenate([arrays[m].reshape(len(labels), -1) for m in BLOCKS], axis=1)
        Xr, yr, report = adasyn(flat, labels, self.config.adasyn_k, self.config.adasyn_beta, seed)
        out, col = {}, 0
        for m in BLOCKS:
            width = int(np.prod(shapes[m]))
            out[m] = Xr[:, col:col + width].reshape((len(yr),) + shapes[m])
            col += width
        return out, yr, report

    def to_dicts(self) -> tuple[dict | None, dict]:
        pca = None if self.pca is None else self.pca.to_dict()
        scalers = {"config": vars(self.config).copy(),
                   "scalers": {m: s.to_dict() for m, s in self.scalers.items()}}
        return pca, scalers

    @classmethod
    def from_dicts(cls, pca: dict | None, scalers: dict) -> "Preprocessor":
        prep = cls(PrepConfig(**scalers["config"]))
        prep.pca = None if pca is None else PcaModel.from_dict(pca)
        prep.scalers = {m: Standardizer.from_dict(d) for m, d in scalers["scalers"].items()}
        return prep
