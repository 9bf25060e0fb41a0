"""
Two-layer LSTM baseline with global max pooling and a sigmoid head.

Gate blocks are stacked in the order input, forget, output, candidate:
for a layer with hidden size u, rows [0:u] of W/V/b belong to the input
gate, [u:2u] to the forget gate, [2u:3u] to the output gate and [3u:4u]
to the candidate cell. Everything runs batched in numpy with inputs
shaped [batch, time, features]; gradients are exact (full-length BPTT).
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.special import expit

from utils.artifact_store import encode_container, read_container, write_container
from utils.errors import ComputationError, ParameterError

logger = logging.getLogger(__name__)

BCE_EPSILON = 1e-7
GATES = ("i", "f", "o", "c")
EVAL_BATCH = 128


@dataclass
class LstmLayerParams:
    W: np.ndarray  # [4u x input_dim]
    V: np.ndarray  # [4u x u]
    b: np.ndarray  # [4u]

    def __post_init__(self):
        rows, _ = self.W.shape
        if rows % 4 or self.V.shape != (rows, rows // 4) or self.b.shape != (rows,):
            raise ParameterError(f"inconsistent LSTM layer shapes W{self.W.shape} V{self.V.shape} b{self.b.shape}")

    @property
    def hidden_size(self) -> int:
        return self.V.shape[1]

    @property
    def input_dim(self) -> int:
        return self.W.shape[1]

    def gate(self, name: str) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(U, V, b) views for one gate"""
        k = GATES.index(name)
        u = self.hidden_size
        rows = slice(k * u, (k + 1) * u)
        return self.W[rows], self.V[rows], self.b[rows]


@dataclass
class LstmModel:
    layer1: LstmLayerParams
    layer2: LstmLayerParams
    head_w: np.ndarray  # [u]
    head_b: np.ndarray  # [1]

    @property
    def hidden_size(self) -> int:
        return self.layer2.hidden_size

    def parameters(self) -> Dict[str, np.ndarray]:
        """Name -> array; the arrays are the live parameters, not copies"""
        return {
            "layer1.W": self.layer1.W, "layer1.V": self.layer1.V, "layer1.b": self.layer1.b,
            "layer2.W": self.layer2.W, "layer2.V": self.layer2.V, "layer2.b": self.layer2.b,
            "head.w": self.head_w, "head.b": self.head_b,
        }

    def copy(self) -> "LstmModel":
        return LstmModel.from_parameters({name: value.copy() for name, value in self.parameters().items()})

    @classmethod
    def from_parameters(cls, params: Dict[str, np.ndarray]) -> "LstmModel":
        return cls(
            layer1=LstmLayerParams(params["layer1.W"], params["layer1.V"], params["layer1.b"]),
            layer2=LstmLayerParams(params["layer2.W"], params["layer2.V"], params["layer2.b"]),
            head_w=params["head.w"],
            head_b=params["head.b"],
        )


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    hidden_size: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.patience < 1:
            raise ParameterError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1 or self.hidden_size < 1:
            raise ParameterError("max_epochs and hidden_size must be >= 1")
        if self.learning_rate <= 0:
            raise ParameterError(f"learning_rate must be positive, got {self.learning_rate}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_ap: float


@dataclass
class TrainingHistory:
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_ap: float = float("-inf")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(record) for record in self.epochs], columns=["epoch", "train_loss", "val_ap"])


@dataclass
class LayerCache:
    X: np.ndarray
    H: np.ndarray
    C: np.ndarray
    gates: np.ndarray  # post-activation, [B, T, 4u]


# ---------------------------------------------------------------------------
# Initialisation
# ---------------------------------------------------------------------------

def _init_layer(rng: np.random.Generator, input_dim: int, hidden_size: int) -> LstmLayerParams:
    k = 1.0 / np.sqrt(hidden_size)
    b = np.zeros(4 * hidden_size)
    b[hidden_size:2 * hidden_size] = 1.0
    return LstmLayerParams(
        W=rng.uniform(-k, k, size=(4 * hidden_size, input_dim)),
        V=rng.uniform(-k, k, size=(4 * hidden_size, hidden_size)),
        b=b,
    )


def init_model(hidden_size: int = 100, input_dim: int = 2, seed: int = 0) -> LstmModel:
    """Uniform(-1/sqrt(u), 1/sqrt(u)) matrices, forget-gate bias 1, head uniform with zero bias"""
    if hidden_size < 1 or input_dim < 1:
        raise ParameterError("hidden_size and input_dim must be >= 1")
    rng = np.random.default_rng(seed)
    layer1 = _init_layer(rng, input_dim, hidden_size)
    layer2 = _init_layer(rng, hidden_size, hidden_size)
    k = 1.0 / np.sqrt(hidden_size)
    return LstmModel(layer1, layer2, rng.uniform(-k, k, size=hidden_size), np.zeros(1))


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

def _as_batch(X: np.ndarray) -> Tuple[np.ndarray, bool]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        return X[None], True
    if X.ndim != 3:
        raise ParameterError(f"expected [time x features] or [batch x time x features], got shape {X.shape}")
    return X, False


def _layer_forward(params: LstmLayerParams, X: np.ndarray, keep_cache: bool = True):
    batch, steps, _ = X.shape
    u = params.hidden_size
    if steps < 1:
        raise ParameterError("sequence must contain at least one timestep")

    projected = X @ params.W.T + params.b
    H = np.empty((batch, steps, u))
    C = np.empty((batch, steps, u)) if keep_cache else None
    gates = np.empty((batch, steps, 4 * u)) if keep_cache else None
    h = np.zeros((batch, u))
    c = np.zeros((batch, u))

    for t in range(steps):
        z = projected[:, t] + h @ params.V.T
        g = np.empty_like(z)
        g[:, :3 * u] = expit(z[:, :3 * u])
        g[:, 3 * u:] = np.tanh(z[:, 3 * u:])
        c = g[:, u:2 * u] * c + g[:, :u] * g[:, 3 * u:]
        h = g[:, 2 * u:3 * u] * np.tanh(c)
        H[:, t] = h
        if keep_cache:
            C[:, t] = c
            gates[:, t] = g

    cache = LayerCache(X, H, C, gates) if keep_cache else None
    return H, cache


def lstm_forward(params: LstmLayerParams, X: np.ndarray) -> Tuple[np.ndarray, LayerCache]:
    """Hidden states H [T x u] (or [B x T x u]) starting from h0 = c0 = 0"""
    X, single = _as_batch(X)
    if not np.all(np.isfinite(X)):
        raise ComputationError("non-finite value in LSTM input")
    H, cache = _layer_forward(params, X)
    return (H[0] if single else H), cache


def global_max_pool(H: np.ndarray) -> np.ndarray:
    """Max over the time axis: [T x u] -> [u], [B x T x u] -> [B x u]"""
    H = np.asarray(H)
    if H.ndim not in (2, 3) or H.shape[-2] == 0:
        raise ParameterError(f"cannot pool hidden states of shape {H.shape}")
    return H.max(axis=-2)


def global_max_pool_backward(H: np.ndarray, dv: np.ndarray) -> np.ndarray:
    """Route dL/dv [B x u] back to the argmax timestep of every unit; lowest timestep on ties"""
    argmax = H.argmax(axis=1)
    dH = np.zeros_like(H)
    np.put_along_axis(dH, argmax[:, None, :], dv[:, None, :], axis=1)
    return dH


def _forward(model: LstmModel, X: np.ndarray, keep_cache: bool):
    if not np.all(np.isfinite(X)):
        raise ComputationError("non-finite value in LSTM input")
    H1, cache1 = _layer_forward(model.layer1, X, keep_cache)
    H2, cache2 = _layer_forward(model.layer2, H1, keep_cache)
    v = global_max_pool(H2)
    logits = v @ model.head_w + model.head_b[0]
    return expit(logits), v, (cache1, cache2)


def _batched(model: LstmModel, X: np.ndarray, batch_size: int, pick: Callable) -> np.ndarray:
    X, _ = _as_batch(X)
    outputs = [pick(*_forward(model, X[start:start + batch_size], keep_cache=False)[:2])
               for start in range(0, len(X), batch_size)]
    if not outputs:
        return np.empty((0,) if pick is _pick_scores else (0, model.hidden_size))
    return np.concatenate(outputs)


def _pick_scores(predictions, _features):
    return predictions


def _pick_features(_predictions, features):
    return features


def predict_proba(model: LstmModel, X: np.ndarray, batch_size: int = EVAL_BATCH) -> np.ndarray:
    """Baseline scores y_hat in (0, 1), one per segment"""
    return _batched(model, X, batch_size, _pick_scores)


def extract_features(model: LstmModel, X: np.ndarray, batch_size: int = EVAL_BATCH) -> np.ndarray:
    """Max-pooled last-layer hidden states, [n x u]"""
    return _batched(model, X, batch_size, _pick_features)


# ---------------------------------------------------------------------------
# Loss and gradients
# ---------------------------------------------------------------------------

def bce_loss(predictions: np.ndarray, labels: np.ndarray, epsilon: float = BCE_EPSILON) -> float:
    predictions = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if predictions.shape != labels.shape:
        raise ParameterError(f"predictions {predictions.shape} and labels {labels.shape} differ in length")
    if predictions.size == 0:
        raise ParameterError("cannot compute a loss over zero predictions")
    clipped = np.clip(predictions, epsilon, 1.0 - epsilon)
    return float(-np.mean(labels * np.log(clipped) + (1.0 - labels) * np.log(1.0 - clipped)))


def _layer_backward(params: LstmLayerParams, cache: LayerCache, dH: np.ndarray):
    X, H, C, gates = cache.X, cache.H, cache.C, cache.gates
    batch, steps, u = H.shape
    dZ = np.empty_like(gates)
    dh_next = np.zeros((batch, u))
    dc_next = np.zeros((batch, u))

    for t in reversed(range(steps)):
        g = gates[:, t]
        i, f, o, cand = g[:, :u], g[:, u:2 * u], g[:, 2 * u:3 * u], g[:, 3 * u:]
        tanh_c = np.tanh(C[:, t])
        c_prev = C[:, t - 1] if t > 0 else 0.0

        dh = dH[:, t] + dh_next
        dc = dc_next + dh * o * (1.0 - tanh_c ** 2)
        dz = dZ[:, t]
        dz[:, :u] = dc * cand * i * (1.0 - i)
        dz[:, u:2 * u] = dc * c_prev * f * (1.0 - f)
        dz[:, 2 * u:3 * u] = dh * tanh_c * o * (1.0 - o)
        dz[:, 3 * u:] = dc * i * (1.0 - cand ** 2)

        dh_next = dz @ params.V
        dc_next = dc * f

    flat = dZ.reshape(-1, 4 * u)
    grads = LstmLayerParams(
        W=flat.T @ X.reshape(-1, X.shape[-1]),
        V=dZ[:, 1:].reshape(-1, 4 * u).T @ H[:, :-1].reshape(-1, u),
        b=flat.sum(axis=0),
    )
    dX = dZ @ params.W
    return grads, dX


def loss_and_gradients(model: LstmModel, X: np.ndarray, y: np.ndarray) -> Tuple[float, Dict[str, np.ndarray]]:
    """Batch BCE loss and its exact gradient for every parameter (same keys as model.parameters())"""
    X, _ = _as_batch(X)
    y = np.asarray(y, dtype=np.float64)
    if len(X) != len(y):
        raise ParameterError(f"{len(X)} inputs but {len(y)} labels")

    predictions, v, (cache1, cache2) = _forward(model, X, keep_cache=True)
    loss = bce_loss(predictions, y)

    dlogits = (predictions - y) / len(y)
    d_head_w = v.T @ dlogits
    d_head_b = np.array([dlogits.sum()])

    dH2 = global_max_pool_backward(cache2.H, np.outer(dlogits, model.head_w))

    grads2, dH1 = _layer_backward(model.layer2, cache2, dH2)
    grads1, _ = _layer_backward(model.layer1, cache1, dH1)
    gradients = LstmModel(grads1, grads2, d_head_w, d_head_b).parameters()
    return loss, gradients


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------

class AdamOptimizer:
    """Adaptive moment estimation with global-norm gradient clipping"""

    def __init__(self, params: Dict[str, np.ndarray], learning_rate: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8, clip_norm: Optional[float] = 5.0):
        self.params = params
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.clip_norm = clip_norm
        self.m = {name: np.zeros_like(value) for name, value in params.items()}
        self.v = {name: np.zeros_like(value) for name, value in params.items()}
        self.steps = 0

    def step(self, grads: Dict[str, np.ndarray]) -> float:
        """Apply one update in place; returns the gradient norm before clipping"""
        norm = float(np.sqrt(sum(float(np.sum(grads[name] ** 2)) for name in sorted(grads))))
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm

        self.steps += 1
        correction1 = 1.0 - self.beta1 ** self.steps
        correction2 = 1.0 - self.beta2 ** self.steps
        for name in sorted(self.params):
            g = grads[name] * scale
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            self.params[name] -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)
        return norm


def _default_scorer(scores: np.ndarray, labels: np.ndarray) -> float:
    from metrics import ScoredPredictions, ap_score
    return ap_score(ScoredPredictions.from_arrays(scores, labels))


def train(model: LstmModel, X_train: np.ndarray, y_train: np.ndarray, X_val: np.ndarray, y_val: np.ndarray,
          config: TrainConfig, scorer: Optional[Callable[[np.ndarray, np.ndarray], float]] = None
          ) -> Tuple[LstmModel, TrainingHistory]:
    """Minibatch training with per-epoch shuffling; keeps the parameters with the best validation AP"""
    if len(X_val) == 0:
        raise ParameterError("validation set is empty")
    if len(X_train) == 0:
        raise ParameterError("training set is empty")
    if len(X_train) != len(y_train) or len(X_val) != len(y_val):
        raise ParameterError("inputs and labels differ in length")

    scorer = scorer or _default_scorer
    rng = np.random.default_rng(config.seed)
    model = model.copy()
    optimizer = AdamOptimizer(model.parameters(), config.learning_rate, config.beta1, config.beta2,
                              config.adam_epsilon, config.clip_norm)
    history = TrainingHistory()
    best = model.copy()
    stale = 0

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(X_train))
        total, seen = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            loss, grads = loss_and_gradients(model, X_train[batch], y_train[batch])
            optimizer.step(grads)
            total += loss * len(batch)
            seen += len(batch)

        val_ap = float(scorer(predict_proba(model, X_val), np.asarray(y_val)))
        history.epochs.append(EpochRecord(epoch, total / seen, val_ap))

        if val_ap > history.best_val_ap:
            history.best_val_ap = val_ap
            history.best_epoch = epoch
            best = model.copy()
            stale = 0
            logger.info(f"📈 Epoch {epoch}: loss {total / seen:.4f}, val AP {val_ap:.4f} (best)")
        else:
            stale += 1
            logger.info(f"📉 Epoch {epoch}: loss {total / seen:.4f}, val AP {val_ap:.4f} "
                        f"({stale}/{config.patience} without improvement)")
            if stale >= config.patience:
                logger.info(f"🛑 Early stopping after epoch {epoch}; best epoch {history.best_epoch}")
                break

    return best, history


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def _model_meta(model: LstmModel) -> dict:
    return {"hidden_size": model.hidden_size, "input_dim": model.layer1.input_dim, "gate_order": "".join(GATES)}


def save_model(path: str, model: LstmModel, meta: Optional[dict] = None) -> str:
    return write_container(path, "LSTM", model.parameters(), {**_model_meta(model), **(meta or {})})


def load_model(path: str, stage: Optional[str] = "train-lstm") -> Tuple[LstmModel, dict]:
    arrays, meta = read_container(path, expected_kind="LSTM", stage=stage)
    return LstmModel.from_parameters({name: arrays[name].astype(np.float64) for name in arrays}), meta


def model_digest(model: LstmModel) -> str:
    return encode_container("LSTM", model.parameters(), _model_meta(model))[-32:].hex()


def history_to_csv(history: TrainingHistory, path: str) -> None:
    history.to_frame().to_csv(path, index=False, float_format="%.10g")
