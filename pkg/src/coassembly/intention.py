"""Intention classification: features, MLP, training, attack, IADA loop.

The classifier maps a 49-dim window feature (per-block displacement and
approach speed plus wrist speed) to one of the 13 intention labels.  The
network is a fixed 49 -> 32 -> 32 -> 13 MLP with ReLU hidden layers,
trained by mini-batch gradient descent on cross-entropy; everything is
float64 numpy and deterministic given the seed.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .geometry import EnvironmentState
from .labels import ALL_LABELS, NUM_BLOCKS, NUM_LABELS, label_from_index, label_index

FEATURE_DIM = 4 * NUM_BLOCKS + 1
WINDOW_TICKS = 5
MLP_DIMS = (FEATURE_DIM, 32, 32, NUM_LABELS)

# capsule label whose first endpoint anchors the wrist (see sim.human)
WRIST_CAPSULE = "right_hand"

ORIGINAL = "original"
EXPERT = "expert"
PSEUDO = "pseudo"


class TrainingDivergedError(Exception):
    pass


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

def wrist_position(env: EnvironmentState) -> np.ndarray:
    return env.human_capsules[WRIST_CAPSULE].a


def featurize(history: list[EnvironmentState],
              block_positions: dict[int, np.ndarray]) -> np.ndarray:
    """Window feature: per block (wrist->block displacement, approach speed)
    plus the wrist speed magnitude.

    `history` is the newest-last window of up to WINDOW_TICKS states; short
    windows are padded by repeating the oldest state.  Blocks missing from
    `block_positions` (already inserted) contribute zero features.
    """
    if not history:
        raise ValueError("need at least one environment state")
    window = list(history)[-WINDOW_TICKS:]
    while len(window) < WINDOW_TICKS:
        window.insert(0, window[0])

    w_new = wrist_position(window[-1])
    w_old = wrist_position(window[0])
    elapsed = window[-1].timestamp - window[0].timestamp

    out = np.zeros(FEATURE_DIM)
    for i in range(NUM_BLOCKS):
        pos = block_positions.get(i + 1)
        if pos is None:
            continue
        disp = np.asarray(pos, dtype=float) - w_new
        out[4 * i: 4 * i + 3] = disp
        if elapsed > 0:
            d_old = np.linalg.norm(np.asarray(pos, dtype=float) - w_old)
            d_new = np.linalg.norm(disp)
            out[4 * i + 3] = (d_old - d_new) / elapsed
    if elapsed > 0:
        out[-1] = np.linalg.norm(w_new - w_old) / elapsed
    if not np.isfinite(out).all():
        raise ValueError("non-finite feature vector")
    return out


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

@dataclass
class LabeledDataset:
    features: np.ndarray = field(default_factory=lambda: np.zeros((0, FEATURE_DIM)))
    labels: list[str] = field(default_factory=list)
    provenance: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float).reshape(-1, FEATURE_DIM)
        if not (len(self.labels) == len(self.provenance) == self.features.shape[0]):
            raise ValueError("features, labels and provenance lengths differ")

    def __len__(self):
        return self.features.shape[0]

    def append(self, x: np.ndarray, label: str, provenance: str = ORIGINAL) -> None:
        self.features = np.vstack([self.features, np.asarray(x, dtype=float)])
        self.labels.append(label)
        self.provenance.append(provenance)

    def extend(self, features, labels, provenance) -> None:
        features = np.asarray(features, dtype=float).reshape(-1, FEATURE_DIM)
        self.features = np.vstack([self.features, features])
        self.labels.extend(labels)
        self.provenance.extend(provenance)

    def label_indices(self) -> np.ndarray:
        return np.array([label_index(lbl) for lbl in self.labels], dtype=int)

    def subset(self, mask) -> "LabeledDataset":
        idx = np.flatnonzero(mask)
        return LabeledDataset(self.features[idx],
                              [self.labels[i] for i in idx],
                              [self.provenance[i] for i in idx])

    def copy(self) -> "LabeledDataset":
        return LabeledDataset(self.features.copy(), list(self.labels),
                              list(self.provenance))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow([f"f{i:02d}" for i in range(FEATURE_DIM)]
                            + ["label", "provenance"])
            for row, label, prov in zip(self.features, self.labels, self.provenance):
                writer.writerow([repr(float(v)) for v in row] + [label, prov])

    @classmethod
    def from_csv(cls, path) -> "LabeledDataset":
        with open(path, newline="") as f:
            reader = csv.reader(f)
            next(reader)
            feats, labels, prov = [], [], []
            for row in reader:
                feats.append([float(v) for v in row[:FEATURE_DIM]])
                labels.append(row[FEATURE_DIM])
                prov.append(row[FEATURE_DIM + 1])
        return cls(np.array(feats).reshape(-1, FEATURE_DIM), labels, prov)


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------

@dataclass
class MLPParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    seed: int

    def __post_init__(self):
        dims = [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]
        if tuple(dims) != MLP_DIMS:
            raise ValueError(f"architecture is fixed to {MLP_DIMS}, got {tuple(dims)}")
        for w, b in zip(self.weights, self.biases):
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError("non-finite parameters")

    def copy(self) -> "MLPParams":
        return MLPParams([w.copy() for w in self.weights],
                         [b.copy() for b in self.biases], self.seed)


def init_params(seed: int) -> MLPParams:
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(MLP_DIMS[:-1], MLP_DIMS[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MLPParams(weights, biases, seed)


def forward(params: MLPParams, X: np.ndarray) -> np.ndarray:
    """Logits for a batch (N, FEATURE_DIM)."""
    a = np.asarray(X, dtype=float)
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        a = np.maximum(a @ w + b, 0.0)
    return a @ params.weights[-1] + params.biases[-1]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict(params: MLPParams, x: np.ndarray) -> tuple[str, float]:
    """Intention label and softmax confidence for one feature vector."""
    x = np.asarray(x, dtype=float)
    if x.shape != (FEATURE_DIM,):
        raise ValueError(f"feature vector must have dimension {FEATURE_DIM}")
    if not np.isfinite(x).all():
        raise ValueError("non-finite feature vector")
    p = softmax(forward(params, x[None, :]))[0]
    k = int(np.argmax(p))
    return label_from_index(k), float(p[k])


def _forward_cache(params: MLPParams, X: np.ndarray):
    acts = [X]
    pre = []
    a = X
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        z = a @ w + b
        pre.append(z)
        a = np.maximum(z, 0.0)
        acts.append(a)
    logits = a @ params.weights[-1] + params.biases[-1]
    return acts, pre, logits


def loss_and_grads(params: MLPParams, X: np.ndarray, y: np.ndarray):
    """Mean cross-entropy plus gradients for every parameter and the input."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    n = X.shape[0]
    acts, pre, logits = _forward_cache(params, X)
    p = softmax(logits)
    # no underflow guard: p_y rounding to 0 means the net blew up, and the
    # resulting inf is exactly what divergence detection must see
    with np.errstate(divide="ignore"):
        loss = float(-np.mean(np.log(p[np.arange(n), y])))

    delta = p.copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads_w = [None] * len(params.weights)
    grads_b = [None] * len(params.biases)
    grads_w[-1] = acts[-1].T @ delta
    grads_b[-1] = delta.sum(axis=0)
    back = delta @ params.weights[-1].T
    for k in range(len(params.weights) - 2, -1, -1):
        back = back * (pre[k] > 0)
        grads_w[k] = acts[k].T @ back
        grads_b[k] = back.sum(axis=0)
        back = back @ params.weights[k].T
    return loss, grads_w, grads_b, back  # `back` is now dL/dX


def input_gradient(params: MLPParams, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    return loss_and_grads(params, X, y)[3]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 120
    batch_size: int = 64
    learning_rate: float = 0.1
    seed: int = 0


def train(data: LabeledDataset, cfg: TrainConfig = TrainConfig()) -> MLPParams:
    """Mini-batch gradient descent on mean cross-entropy, seeded end to end."""
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    params = init_params(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    X = data.features
    y = data.label_indices()
    n = len(data)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, gw, gb, _ = loss_and_grads(params, X[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss became non-finite at epoch {epoch} "
                    f"(lr={cfg.learning_rate}, batch={cfg.batch_size})")
            for w, g in zip(params.weights, gw):
                w -= cfg.learning_rate * g
            for b, g in zip(params.biases, gb):
                b -= cfg.learning_rate * g
    return params


def accuracy(params: MLPParams, X: np.ndarray, y: np.ndarray) -> float:
    logits = forward(params, X)
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(y)))


# ---------------------------------------------------------------------------
# adversarial attack and IADA
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.08
    steps: int = 10

    @property
    def step_size(self) -> float:
        return self.epsilon / 4.0


def _attack_batch(params: MLPParams, X: np.ndarray, y: np.ndarray,
                  cfg: AttackConfig) -> np.ndarray:
    """Projected gradient ascent on the loss, keeping the worst iterate."""
    if cfg.epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    X = np.asarray(X, dtype=float)
    if cfg.epsilon == 0.0 or cfg.steps == 0:
        return X.copy()
    y = np.asarray(y, dtype=int)
    lo, hi = X - cfg.epsilon, X + cfg.epsilon

    def per_point_loss(Z):
        p = softmax(forward(params, Z))
        return -np.log(p[np.arange(len(y)), y] + 1e-300)

    best = X.copy()
    best_loss = per_point_loss(X)
    adv = X.copy()
    for _ in range(cfg.steps):
        g = input_gradient(params, adv, y)
        adv = np.clip(adv + cfg.step_size * np.sign(g), lo, hi)
        cur = per_point_loss(adv)
        better = cur > best_loss
        best[better] = adv[better]
        best_loss = np.maximum(best_loss, cur)
    return best


def attack(params: MLPParams, x: np.ndarray, label: str,
           epsilon: float, steps: int = 10) -> np.ndarray:
    """Worst-case perturbation of x within the infinity-norm budget.

    The returned point never leaves the epsilon box and its loss is at
    least the loss of x (the starting iterate is kept as a candidate).
    """
    cfg = AttackConfig(epsilon=epsilon, steps=steps)
    x = np.asarray(x, dtype=float)
    y = np.array([label_index(label)])
    return _attack_batch(params, x[None, :], y, cfg)[0]


def iada_train(data: LabeledDataset, attack_cfg: AttackConfig,
               oracle, rounds: int,
               train_cfg: TrainConfig = TrainConfig()
               ) -> tuple[MLPParams, LabeledDataset]:
    """Iterative adversarial data augmentation.

    Each round attacks every original point of the current model, asks the
    expert oracle to label the adversary (oracle returns a label, or None
    to reject), files expert answers as expert-verified points and rejects
    as pseudo-labeled points carrying the model's own prediction, then
    retrains from scratch on the augmented set.  With zero rounds or a zero
    budget this reduces exactly to plain training.
    """
    model = train(data, train_cfg)
    if rounds == 0 or attack_cfg.epsilon == 0.0:
        return model, data.copy()

    augmented = data.copy()
    original_mask = np.array([p == ORIGINAL for p in augmented.provenance])
    X0 = augmented.features[original_mask]
    y0 = augmented.label_indices()[original_mask]

    for _ in range(rounds):
        adv = _attack_batch(model, X0, y0, attack_cfg)
        moved = np.abs(adv - X0).max(axis=1) > 0
        new_feats, new_labels, new_prov = [], [], []
        for x_adv, keep in zip(adv, moved):
            if not keep:
                continue
            verdict = oracle(x_adv)
            if verdict is not None:
                new_feats.append(x_adv)
                new_labels.append(verdict)
                new_prov.append(EXPERT)
            else:
                new_feats.append(x_adv)
                new_labels.append(predict(model, x_adv)[0])
                new_prov.append(PSEUDO)
        if new_feats:
            augmented.extend(np.array(new_feats), new_labels, new_prov)
        model = train(augmented, train_cfg)
    return model, augmented


def geometric_expert_oracle(x: np.ndarray,
                            speed_floor: float = 0.05,
                            ambiguity_gap: float = 0.03) -> str | None:
    """Synthetic stand-in for the human expert labeling an adversary.

    Reads the feature encoding directly: the intended block is the one
    approached fastest; no approach at all means Idle.  Rejects (returns
    None) when the two nearest blocks are within `ambiguity_gap`, where a
    human could not tell which block the motion targets.
    """
    x = np.asarray(x, dtype=float)
    blocks = x[: 4 * NUM_BLOCKS].reshape(NUM_BLOCKS, 4)
    dists = np.linalg.norm(blocks[:, :3], axis=1)
    present = dists > 1e-9
    approach = np.where(present, blocks[:, 3], -np.inf)
    k = int(np.argmax(approach))
    if not present.any() or approach[k] < speed_floor:
        return ALL_LABELS[-1]  # Idle: no block is being approached
    if present.sum() >= 2:
        d = np.sort(dists[present])
        if d[1] - d[0] < ambiguity_gap:
            return None
    return label_from_index(k)


# ---------------------------------------------------------------------------
# prediction smoothing
# ---------------------------------------------------------------------------

class PredictionSmoother:
    """Majority vote over the last few raw predictions; sticky on ties."""

    def __init__(self, window: int = 3, initial: str = ALL_LABELS[-1]):
        self.window = window
        self.history: list[str] = []
        self.current = initial

    def update(self, label: str) -> str:
        self.history.append(label)
        if len(self.history) > self.window:
            self.history.pop(0)
        counts: dict[str, int] = {}
        for lbl in self.history:
            counts[lbl] = counts.get(lbl, 0) + 1
        top = max(counts.values())
        winners = [lbl for lbl, c in counts.items() if c == top]
        if len(winners) == 1:
            self.current = winners[0]
        elif self.current not in winners:
            self.current = label
        return self.current

    def reset(self, initial: str = ALL_LABELS[-1]) -> None:
        self.history.clear()
        self.current = initial


# ---------------------------------------------------------------------------
# model file format
# ---------------------------------------------------------------------------

MODEL_FORMAT_TAG = "coassembly-mlp v1"


def save_model(params: MLPParams, path) -> None:
    """Versioned text format: header with dims, then row-major weights."""
    with open(path, "w") as f:
        f.write(MODEL_FORMAT_TAG + "\n")
        f.write("dims " + " ".join(str(d) for d in MLP_DIMS) + "\n")
        f.write(f"seed {params.seed}\n")
        for k, (w, b) in enumerate(zip(params.weights, params.biases)):
            f.write(f"layer {k} {w.shape[0]} {w.shape[1]}\n")
            for row in w:
                f.write(" ".join(repr(float(v)) for v in row) + "\n")
            f.write(" ".join(repr(float(v)) for v in b) + "\n")


def load_model(path) -> MLPParams:
    with open(path) as f:
        lines = [line.rstrip("\n") for line in f]
    if not lines or lines[0] != MODEL_FORMAT_TAG:
        raise ValueError(f"not a {MODEL_FORMAT_TAG} file: {path}")
    dims = tuple(int(v) for v in lines[1].split()[1:])
    if dims != MLP_DIMS:
        raise ValueError(f"model dims {dims} do not match {MLP_DIMS}")
    seed = int(lines[2].split()[1])
    weights, biases = [], []
    i = 3
    for _ in range(len(MLP_DIMS) - 1):
        _, _, rows, cols = lines[i].split()
        rows, cols = int(rows), int(cols)
        i += 1
        w = np.array([[float(v) for v in lines[i + r].split()] for r in range(rows)])
        i += rows
        b = np.array([float(v) for v in lines[i].split()])
        i += 1
        if w.shape != (rows, cols) or b.shape != (cols,):
            raise ValueError("corrupt model file")
        weights.append(w)
        biases.append(b)
    return MLPParams(weights, biases, seed)
