"""
RBF soft-margin SVM trained by sequential minimal optimisation.

The solver follows the libsvm formulation: it minimises
    1/2 a^T Q a - e^T a,   Q_ij = y_i y_j K(x_i, x_j)
subject to 0 <= a_i <= C_i and y^T a = 0, with C_i = C * class_weight[y_i].
The working pair is chosen by maximal violation for i and second-order
gain for j; kernel rows come from an LRU cache and bounded variables are
shrunk out of the active set between gradient reconstructions.

Public labels are {0, 1}; the solver works on {-1, +1}.
"""

import logging
import time
import warnings
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from utils.artifact_store import read_container, write_container
from utils.errors import ConvergenceWarning, ParameterError, TrainingError

logger = logging.getLogger(__name__)

TAU = 1e-12
SHRINK_INTERVAL = 1000
SCORE_CHUNK = 1024


@dataclass(frozen=True)
class SvmConfig:
    C: float = 1.0
    gamma: Optional[float] = None  # None -> scale_gamma(features)
    class_weight: Tuple[float, float] = (1.0, 1.0)  # (w_neg, w_pos)
    tolerance: float = 1e-3
    max_iter: Optional[int] = None  # None -> max(10**7, 100 * n)
    cache_mb: float = 200.0
    shrinking: bool = True

    def __post_init__(self):
        if not self.C > 0:
            raise ParameterError(f"C must be positive, got {self.C}")
        if self.gamma is not None and not self.gamma > 0:
            raise ParameterError(f"gamma must be positive, got {self.gamma}")
        if len(self.class_weight) != 2 or min(self.class_weight) < 0:
            raise ParameterError(f"class_weight must be two non-negative values, got {self.class_weight}")
        if not self.tolerance > 0:
            raise ParameterError(f"tolerance must be positive, got {self.tolerance}")
        if self.max_iter is not None and self.max_iter < 1:
            raise ParameterError(f"max_iter must be >= 1, got {self.max_iter}")


@dataclass(frozen=True)
class SvmModel:
    support_vectors: np.ndarray  # [m x u]
    dual_coeffs: np.ndarray  # alpha_i * y_i
    bias: float
    gamma: float
    config: SvmConfig
    n_iterations: int = 0
    converged: bool = True
    support_indices: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    @property
    def n_support(self) -> int:
        return len(self.dual_coeffs)


# ---------------------------------------------------------------------------
# Kernel
# ---------------------------------------------------------------------------

def rbf_kernel(x: np.ndarray, z: np.ndarray, gamma: float) -> float:
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x.shape != z.shape:
        raise ParameterError(f"dimension mismatch: {x.shape} vs {z.shape}")
    diff = x - z
    return float(np.exp(-gamma * np.dot(diff, diff)))


def rbf_kernel_matrix(A: np.ndarray, B: np.ndarray, gamma: float) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape[1] != B.shape[1]:
        raise ParameterError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]} features")
    sq = np.einsum("ij,ij->i", A, A)[:, None] + np.einsum("ij,ij->i", B, B)[None, :] - 2.0 * (A @ B.T)
    return np.exp(-gamma * np.maximum(sq, 0.0))


def scale_gamma(features: np.ndarray) -> float:
    """1 / (n_features * Var(features)); 1.0 for constant features"""
    features = np.asarray(features, dtype=np.float64)
    variance = float(features.var())
    if variance <= 0 or not np.isfinite(variance):
        return 1.0
    return 1.0 / (features.shape[1] * variance)


class KernelCache:
    """LRU cache of signed kernel rows Q_i = y_i y_j K(x_i, x_j) under a memory budget"""

    def __init__(self, X: np.ndarray, y: np.ndarray, gamma: float, budget_mb: float = 200.0):
        self.X = X
        self.y = y.astype(np.float64)
        self.gamma = gamma
        self.sq_norms = np.einsum("ij,ij->i", X, X)
        row_bytes = 8 * len(X)
        self.capacity = max(2, int(budget_mb * (1 << 20)) // row_bytes)
        self._rows: "OrderedDict[int, np.ndarray]" = OrderedDict()
        self.hits = 0
        self.misses = 0

    def row(self, i: int) -> np.ndarray:
        cached = self._rows.get(i)
        if cached is not None:
            self._rows.move_to_end(i)
            self.hits += 1
            return cached
        self.misses += 1
        sq = self.sq_norms[i] + self.sq_norms - 2.0 * (self.X @ self.X[i])
        values = self.y[i] * self.y * np.exp(-self.gamma * np.maximum(sq, 0.0))
        values[i] = 1.0
        values.flags.writeable = False
        self._rows[i] = values
        if len(self._rows) > self.capacity:
            self._rows.popitem(last=False)
        return values


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------

class _Solver:
    def __init__(self, cache: KernelCache, y: np.ndarray, upper: np.ndarray, tolerance: float, shrinking: bool):
        self.cache = cache
        self.y = y
        self.upper = upper
        self.eps = tolerance
        self.shrinking = shrinking
        n = len(y)
        self.n = n
        self.alpha = np.zeros(n)
        self.G = -np.ones(n)
        self.G_bar = np.zeros(n)
        self.QD = np.ones(n)
        self.active = np.arange(n)
        self.unshrink = False

    def _at_upper(self, idx):
        return self.alpha[idx] >= self.upper[idx]

    def _at_lower(self, idx):
        return self.alpha[idx] <= 0.0

    def select_working_set(self) -> Optional[Tuple[int, int]]:
        act = self.active
        y, G = self.y[act], self.G[act]
        up, low = self._at_upper(act), self._at_lower(act)

        # i: maximal violation among I_up
        cand_i = np.where(y > 0, ~up, ~low)
        if not cand_i.any():
            return None
        score_i = np.where(cand_i, -y * G, -np.inf)
        pos_i = int(np.argmax(score_i))
        g_max = score_i[pos_i]
        i = int(act[pos_i])
        Q_i = self.cache.row(i)

        # j: second-order gain among I_low
        cand_j = np.where(y > 0, ~low, ~up)
        if not cand_j.any():
            return None
        g_max2 = float(np.max(np.where(cand_j, y * G, -np.inf)))
        grad_diff = g_max + y * G
        quad = self.QD[i] + self.QD[act] - 2.0 * self.y[i] * y * Q_i[act]
        quad = np.where(quad > 0, quad, TAU)
        usable = cand_j & (grad_diff > 0)
        if g_max + g_max2 < self.eps or not usable.any():
            return None
        gain = np.where(usable, -(grad_diff ** 2) / quad, np.inf)
        j = int(act[int(np.argmin(gain))])
        return i, j

    def update_pair(self, i: int, j: int) -> None:
        y, alpha, G = self.y, self.alpha, self.G
        Q_i, Q_j = self.cache.row(i), self.cache.row(j)
        C_i, C_j = self.upper[i], self.upper[j]
        old_i, old_j = alpha[i], alpha[j]
        was_upper_i, was_upper_j = old_i >= C_i, old_j >= C_j
        a_i, a_j = old_i, old_j

        if y[i] != y[j]:
            quad = self.QD[i] + self.QD[j] + 2.0 * Q_i[j]
            quad = quad if quad > 0 else TAU
            delta = (-G[i] - G[j]) / quad
            diff = a_i - a_j
            a_i += delta
            a_j += delta
            if diff > 0:
                if a_j < 0:
                    a_j, a_i = 0.0, diff
            elif a_i < 0:
                a_i, a_j = 0.0, -diff
            if diff > C_i - C_j:
                if a_i > C_i:
                    a_i, a_j = C_i, C_i - diff
            elif a_j > C_j:
                a_j, a_i = C_j, C_j + diff
        else:
            quad = self.QD[i] + self.QD[j] - 2.0 * Q_i[j]
            quad = quad if quad > 0 else TAU
            delta = (G[i] - G[j]) / quad
            total = a_i + a_j
            a_i -= delta
            a_j += delta
            if total > C_i:
                if a_i > C_i:
                    a_i, a_j = C_i, total - C_i
            elif a_j < 0:
                a_j, a_i = 0.0, total
            if total > C_j:
                if a_j > C_j:
                    a_j, a_i = C_j, total - C_j
            elif a_i < 0:
                a_i, a_j = 0.0, total

        alpha[i], alpha[j] = a_i, a_j
        d_i, d_j = a_i - old_i, a_j - old_j
        act = self.active
        G[act] += Q_i[act] * d_i + Q_j[act] * d_j

        if was_upper_i != (a_i >= C_i):
            self.G_bar += (C_i if a_i >= C_i else -C_i) * Q_i
        if was_upper_j != (a_j >= C_j):
            self.G_bar += (C_j if a_j >= C_j else -C_j) * Q_j

    def reconstruct_gradient(self) -> None:
        if len(self.active) == self.n:
            return
        inactive = np.setdiff1d(np.arange(self.n), self.active, assume_unique=True)
        self.G[inactive] = self.G_bar[inactive] - 1.0
        free = np.flatnonzero((self.alpha > 0) & (self.alpha < self.upper))
        for j in free:
            self.G[inactive] += self.alpha[j] * self.cache.row(int(j))[inactive]
        self.active = np.arange(self.n)

    def shrink(self) -> None:
        act = self.active
        y, G = self.y[act], self.G[act]
        up, low = self._at_upper(act), self._at_lower(act)
        g_max1 = float(np.max(np.where(np.where(y > 0, ~up, ~low), -y * G, -np.inf), initial=-np.inf))
        g_max2 = float(np.max(np.where(np.where(y > 0, ~low, ~up), y * G, -np.inf), initial=-np.inf))

        if not self.unshrink and g_max1 + g_max2 <= self.eps * 10:
            self.unshrink = True
            self.reconstruct_gradient()
            act = self.active
            y, G = self.y[act], self.G[act]
            up, low = self._at_upper(act), self._at_lower(act)

        shrunk_upper = up & np.where(y > 0, -G > g_max1, -G > g_max2)
        shrunk_lower = low & ~up & np.where(y > 0, G > g_max2, G > g_max1)
        keep = ~(shrunk_upper | shrunk_lower)
        if not keep.all():
            self.active = act[keep]

    def rho(self) -> float:
        yG = self.y * self.G
        up, low = self.alpha >= self.upper, self.alpha <= 0.0
        free = ~up & ~low
        if free.any():
            return float(yG[free].mean())
        ub_mask = (up & (self.y < 0)) | (low & ~up & (self.y > 0))
        lb_mask = (up & (self.y > 0)) | (low & ~up & (self.y < 0))
        ub = float(yG[ub_mask].min()) if ub_mask.any() else np.inf
        lb = float(yG[lb_mask].max()) if lb_mask.any() else -np.inf
        return (ub + lb) / 2.0

    def solve(self, max_iter: int) -> Tuple[int, bool]:
        counter = min(self.n, SHRINK_INTERVAL) + 1
        iterations = 0
        while iterations < max_iter:
            counter -= 1
            if self.shrinking and counter == 0:
                counter = min(self.n, SHRINK_INTERVAL)
                self.shrink()

            pair = self.select_working_set()
            if pair is None:
                self.reconstruct_gradient()
                pair = self.select_working_set()
                if pair is None:
                    return iterations, True
                counter = 1
            iterations += 1
            self.update_pair(*pair)

        self.reconstruct_gradient()
        return iterations, False


def _signed_labels(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels).astype(np.int64).ravel()
    if not np.isin(labels, (0, 1)).all():
        raise ParameterError("labels must be 0 or 1")
    return np.where(labels == 1, 1.0, -1.0)


def smo_train(features: np.ndarray, labels: np.ndarray, config: SvmConfig = SvmConfig(),
              warn: bool = True) -> SvmModel:
    X = np.ascontiguousarray(features, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(labels):
        raise ParameterError(f"features {X.shape} do not match {len(labels)} labels")
    if not np.all(np.isfinite(X)):
        raise TrainingError("features contain non-finite values")
    y = _signed_labels(labels)
    if (y > 0).all() or (y < 0).all():
        raise TrainingError("SVM training needs at least one example of each class")

    gamma = config.gamma if config.gamma is not None else scale_gamma(X)
    w_neg, w_pos = config.class_weight
    upper = np.where(y > 0, config.C * w_pos, config.C * w_neg)
    max_iter = config.max_iter or max(10_000_000, 100 * len(X))

    cache = KernelCache(X, y, gamma, config.cache_mb)
    solver = _Solver(cache, y, upper, config.tolerance, config.shrinking)
    iterations, converged = solver.solve(max_iter)
    bias = -solver.rho()

    if not converged:
        message = f"SMO stopped at max_iter={max_iter} before reaching tolerance {config.tolerance}"
        logger.warning(f"⚠️ {message}")
        if warn:
            warnings.warn(message, ConvergenceWarning, stacklevel=2)

    support = np.flatnonzero(solver.alpha > 0)
    logger.debug(f"SMO: {iterations} iterations, {len(support)} support vectors, "
                 f"cache hits {cache.hits} / misses {cache.misses}")
    return SvmModel(
        support_vectors=X[support].copy(),
        dual_coeffs=solver.alpha[support] * y[support],
        bias=float(bias),
        gamma=float(gamma),
        config=config,
        n_iterations=iterations,
        converged=converged,
        support_indices=support.astype(np.int64),
    )


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

def decision_score(model: SvmModel, x: np.ndarray):
    """sum_i alpha_i y_i K(sv_i, x) + b; a float for one vector, an array for a matrix"""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None] if single else x
    if X.ndim != 2 or X.shape[1] != model.support_vectors.shape[1]:
        raise ParameterError(f"expected {model.support_vectors.shape[1]} features, got shape {x.shape}")
    scores = np.empty(len(X))
    for start in range(0, len(X), SCORE_CHUNK):
        K = rbf_kernel_matrix(X[start:start + SCORE_CHUNK], model.support_vectors, model.gamma)
        scores[start:start + SCORE_CHUNK] = K @ model.dual_coeffs + model.bias
    return float(scores[0]) if single else scores


def predict(model: SvmModel, x: np.ndarray):
    scores = decision_score(model, x)
    if np.isscalar(scores):
        return int(scores > 0)
    return (scores > 0).astype(np.int64)


def dual_objective(alpha: np.ndarray, labels: np.ndarray, K: np.ndarray) -> float:
    """sum(alpha) - 1/2 sum_ij alpha_i alpha_j y_i y_j K_ij (labels in {0,1} or {-1,+1})"""
    labels = np.asarray(labels)
    y = np.where(labels > 0, 1.0, -1.0)
    coef = np.asarray(alpha) * y
    return float(np.sum(alpha) - 0.5 * coef @ K @ coef)


def primal_objective(model: SvmModel, features: np.ndarray, labels: np.ndarray) -> float:
    """1/2 ||w||^2 + sum_i C_i max(0, 1 - y_i f(x_i)) with w implicit in the kernel expansion"""
    y = _signed_labels(labels)
    K_sv = rbf_kernel_matrix(model.support_vectors, model.support_vectors, model.gamma)
    w_norm_sq = float(model.dual_coeffs @ K_sv @ model.dual_coeffs)
    slack = np.maximum(0.0, 1.0 - y * decision_score(model, features))
    w_neg, w_pos = model.config.class_weight
    penalties = np.where(y > 0, model.config.C * w_pos, model.config.C * w_neg)
    return 0.5 * w_norm_sq + float(np.sum(penalties * slack))


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------

def _tenths(low: int, high: int) -> Tuple[float, ...]:
    return tuple(round(k / 10.0, 1) for k in range(low, high + 1))


@dataclass(frozen=True)
class GridSettings:
    c_values: Tuple[float, ...] = _tenths(1, 20)
    weight_values: Tuple[float, ...] = _tenths(1, 10)
    gammas: Optional[Tuple[float, ...]] = None  # None -> scale heuristic only
    subsample: Optional[int] = None  # stratified training subsample size
    workers: int = 1
    seed: int = 0
    tolerance: float = 1e-3
    cache_mb: float = 200.0

    def __post_init__(self):
        if self.workers < 1:
            raise ParameterError(f"workers must be >= 1, got {self.workers}")
        if self.subsample is not None and self.subsample < 2:
            raise ParameterError(f"subsample must be >= 2, got {self.subsample}")


@dataclass
class GridResult:
    """Scores of one candidate; the fitted model itself is dropped"""
    config: SvmConfig
    val_ap: float
    n_sv: int
    converged: bool
    seconds: float


def default_grid(settings: GridSettings = GridSettings()) -> List[Tuple[float, float, float]]:
    """(C, w_neg, w_pos) candidates; 20 x 10 x 10 = 2000 with the default ranges"""
    return [(c, w_neg, w_pos)
            for c in settings.c_values
            for w_neg in settings.weight_values
            for w_pos in settings.weight_values]


def stratified_subsample(labels: np.ndarray, size: int, seed: int) -> np.ndarray:
    """Sorted indices of a class-proportional random subsample"""
    labels = np.asarray(labels)
    if size >= len(labels):
        return np.arange(len(labels))
    rng = np.random.default_rng(seed)
    chosen = []
    for cls in (0, 1):
        members = np.flatnonzero(labels == cls)
        take = max(1, int(round(size * len(members) / len(labels)))) if len(members) else 0
        chosen.append(rng.choice(members, size=min(take, len(members)), replace=False))
    return np.sort(np.concatenate(chosen))


def grid_search(features_train: np.ndarray, labels_train: np.ndarray,
                features_val: np.ndarray, labels_val: np.ndarray,
                settings: GridSettings = GridSettings(),
                candidates: Optional[Sequence[Tuple[float, float, float]]] = None
                ) -> Tuple[SvmConfig, SvmModel, pd.DataFrame]:
    """Exhaustive search maximising validation AP; ties -> smaller C, smaller weight sum, smaller w_neg"""
    from metrics import ScoredPredictions, ap_score

    candidates = list(candidates) if candidates is not None else default_grid(settings)
    if not candidates:
        raise ParameterError("grid search needs at least one candidate")

    X = np.asarray(features_train, dtype=np.float64)
    y = np.asarray(labels_train)
    if settings.subsample is not None:
        keep = stratified_subsample(y, settings.subsample, settings.seed)
        logger.info(f"🔄 Grid search on a stratified subsample of {len(keep)} / {len(y)} training vectors")
        X, y = X[keep], y[keep]
    gammas = settings.gammas or (scale_gamma(X),)
    configs = [SvmConfig(C=c, gamma=g, class_weight=(w_neg, w_pos), tolerance=settings.tolerance,
                         cache_mb=settings.cache_mb)
               for c, w_neg, w_pos in candidates for g in gammas]

    def evaluate(config: SvmConfig) -> GridResult:
        started = time.perf_counter()
        model = smo_train(X, y, config, warn=False)
        val_ap = ap_score(ScoredPredictions.from_arrays(decision_score(model, features_val), labels_val))
        return GridResult(config, val_ap, model.n_support, model.converged, time.perf_counter() - started)

    logger.info(f"🔍 Grid search over {len(configs)} SVM configurations ({settings.workers} worker(s))")
    with ThreadPoolExecutor(max_workers=settings.workers) as pool:
        results = list(pool.map(evaluate, configs))

    def rank(result: GridResult):
        cfg = result.config
        return (-result.val_ap, cfg.C, sum(cfg.class_weight), cfg.class_weight[0], cfg.gamma)

    best = min(results, key=rank)
    logger.info(f"🎯 Best SVM: C={best.config.C}, weights={best.config.class_weight}, "
                f"gamma={best.config.gamma:.6g}, val AP {best.val_ap:.4f}")

    table = pd.DataFrame([{
        "C": r.config.C, "w_neg": r.config.class_weight[0], "w_pos": r.config.class_weight[1],
        "gamma": r.config.gamma, "val_AP": r.val_ap, "n_sv": r.n_sv,
        "converged": r.converged, "seconds": r.seconds,
    } for r in results])
    # only scores are kept per candidate, so the winner is fitted again
    return best.config, smo_train(X, y, best.config, warn=False), table


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_svm(path: str, model: SvmModel, meta: Optional[dict] = None) -> str:
    config = asdict(model.config)
    config["class_weight"] = list(model.config.class_weight)
    info = {"bias": model.bias, "gamma": model.gamma, "config": config,
            "n_iterations": model.n_iterations, "converged": model.converged, **(meta or {})}
    arrays = {"support_vectors": model.support_vectors, "dual_coeffs": model.dual_coeffs,
              "support_indices": model.support_indices}
    return write_container(path, "SVMM", arrays, info)


def load_svm(path: str, stage: Optional[str] = "train-svm") -> Tuple[SvmModel, dict]:
    arrays, meta = read_container(path, expected_kind="SVMM", stage=stage)
    raw = dict(meta["config"])
    raw["class_weight"] = tuple(raw["class_weight"])
    model = SvmModel(
        support_vectors=arrays["support_vectors"],
        dual_coeffs=arrays["dual_coeffs"],
        bias=float(meta["bias"]),
        gamma=float(meta["gamma"]),
        config=SvmConfig(**raw),
        n_iterations=int(meta["n_iterations"]),
        converged=bool(meta["converged"]),
        support_indices=arrays["support_indices"],
    )
    return model, meta
