"""Small dense networks for the actor and critic, with hand-written backprop.

Everything works on batches: rows of ``X`` are observations.  The
single-observation functions are thin wrappers used by tests and tools.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyMask, InvalidAction, ShapeMismatch


@dataclass
class ModelParams:
    weights: list
    biases: list
    activation: str = "tanh"

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def arrays(self) -> list[np.ndarray]:
        """Row-major layer order: W1, b1, W2, b2, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "ModelParams":
        return ModelParams([w.copy() for w in self.weights],
                           [b.copy() for b in self.biases], self.activation)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def set_flat(self, v: np.ndarray) -> None:
        i = 0
        for a in self.arrays():
            a[...] = v[i:i + a.size].reshape(a.shape)
            i += a.size

    def zeros_like(self) -> "Gradients":
        return Gradients([np.zeros_like(w) for w in self.weights],
                         [np.zeros_like(b) for b in self.biases])


@dataclass
class Gradients:
    weights: list
    biases: list
    count: int = 0

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def add_(self, other: "Gradients", scale: float = 1.0) -> "Gradients":
        for a, b in zip(self.arrays(), other.arrays()):
            a += scale * b
        self.count += other.count
        return self


def init_mlp(in_dim: int, hidden: tuple[int, ...], out_dim: int,
             rng: np.random.Generator) -> ModelParams:
    """Weights uniform in +-1/sqrt(fan_in), zero biases."""
    dims = (in_dim,) + tuple(hidden) + (out_dim,)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ModelParams(weights, biases)


def _as_batch(p: ModelParams, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != p.in_dim:
        raise ShapeMismatch(f"observation has {X.shape[1]} features, model expects {p.in_dim}")
    return X


def _forward(p: ModelParams, X: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    acts = [X]
    h = X
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        z = h @ w + b
        h = z if i == last else np.tanh(z)
        acts.append(h)
    return h, acts


def _backward(p: ModelParams, acts: list[np.ndarray], dout: np.ndarray) -> Gradients:
    n_layers = len(p.weights)
    gw = [None] * n_layers
    gb = [None] * n_layers
    delta = dout
    for i in range(n_layers - 1, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i:
            delta = (delta @ p.weights[i].T) * (1.0 - acts[i] ** 2)
    return Gradients(gw, gb, count=dout.shape[0])


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over entries where ``mask`` is true; the rest are exactly 0."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise EmptyMask("every row needs at least one valid action")
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def actor_probs(p: ModelParams, X, M) -> np.ndarray:
    X = _as_batch(p, X)
    M = np.atleast_2d(np.asarray(M, dtype=bool))
    if M.shape != (X.shape[0], p.out_dim):
        raise ShapeMismatch(f"mask shape {M.shape} does not match {(X.shape[0], p.out_dim)}")
    logits, _ = _forward(p, X)
    return masked_softmax(logits, M)


def actor_forward(p: ModelParams, obs, mask) -> np.ndarray:
    return actor_probs(p, obs, mask)[0]


def critic_values(p: ModelParams, X) -> np.ndarray:
    X = _as_batch(p, X)
    out, _ = _forward(p, X)
    return out[:, 0]


def critic_forward(p: ModelParams, obs) -> float:
    return float(critic_values(p, obs)[0])


def policy_gradient(p: ModelParams, X, M, actions, weights=None) -> Gradients:
    """sum_n weights[n] * grad log pi(actions[n] | X[n]) in one backward pass."""
    X = _as_batch(p, X)
    M = np.atleast_2d(np.asarray(M, dtype=bool))
    actions = np.atleast_1d(np.asarray(actions, dtype=int))
    n = X.shape[0]
    if M.shape != (n, p.out_dim) or actions.shape != (n,):
        raise ShapeMismatch("batch sizes of observations, masks and actions differ")
    rows = np.arange(n)
    if not M[rows, actions].all():
        raise InvalidAction("an action is masked out")
    logits, acts = _forward(p, X)
    probs = masked_softmax(logits, M)
    dlogits = -probs
    dlogits[rows, actions] += 1.0
    if weights is not None:
        dlogits *= np.asarray(weights, dtype=float).reshape(n, 1)
    return _backward(p, acts, dlogits)


def grad_log_prob(p: ModelParams, obs, mask, action: int) -> Gradients:
    return policy_gradient(p, obs, mask, [action])


def value_gradient(p: ModelParams, X, weights=None) -> Gradients:
    """sum_n weights[n] * grad V(X[n])."""
    X = _as_batch(p, X)
    _, acts = _forward(p, X)
    dout = np.ones((X.shape[0], 1))
    if weights is not None:
        dout *= np.asarray(weights, dtype=float).reshape(-1, 1)
    return _backward(p, acts, dout)


def grad_value(p: ModelParams, obs) -> Gradients:
    return value_gradient(p, obs)


def _check_congruent(p: ModelParams, g: Gradients) -> None:
    if len(p.weights) != len(g.weights) or any(
            a.shape != b.shape for a, b in zip(p.arrays(), g.arrays())):
        raise ShapeMismatch("gradient shapes do not match the parameters")


def sgd_step_(p: ModelParams, g: Gradients, rate: float, direction: str = "ascend") -> None:
    """In-place update: p += rate*g (ascend) or p -= rate*g (descend)."""
    _check_congruent(p, g)
    sign = {"ascend": 1.0, "descend": -1.0}[direction]
    for a, da in zip(p.arrays(), g.arrays()):
        a += (sign * rate) * da


def sgd_apply(p: ModelParams, g: Gradients, rate: float, direction: str = "ascend") -> ModelParams:
    out = p.copy()
    sgd_step_(out, g, rate, direction)
    return out


def finite_diff(p: ModelParams, f, eps: float = 1e-5) -> Gradients:
    """Central-difference estimate of df/dparams, one coordinate at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    q = p.copy()
    g = q.zeros_like()
    for a, ga in zip(q.arrays(), g.arrays()):
        flat, gflat = a.reshape(-1), ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(q)
            flat[i] = orig - eps
            lo = f(q)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
    g.count = 1
    return g


@dataclass
class StackedParams:
    """K shape-identical models stored as (K, ...) arrays.

    ``member(k)`` returns a ModelParams whose arrays are views, so updates
    through either form are visible in both.
    """
    weights: list
    biases: list

    @classmethod
    def from_models(cls, models: list[ModelParams]) -> "StackedParams":
        ref = [a.shape for a in models[0].arrays()]
        if any([a.shape for a in m.arrays()] != ref for m in models[1:]):
            raise ShapeMismatch("stacked models must share one architecture")
        return cls([np.stack([m.weights[i] for m in models]) for i in range(len(models[0].weights))],
                   [np.stack([m.biases[i] for m in models]) for i in range(len(models[0].biases))])

    @property
    def K(self) -> int:
        return self.weights[0].shape[0]

    def member(self, k: int) -> ModelParams:
        return ModelParams([w[k] for w in self.weights], [b[k] for b in self.biases])

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def stacked_forward(S: StackedParams, X: np.ndarray, idx: np.ndarray):
    """Row n of ``X`` goes through model ``idx[n]``."""
    acts = [X]
    h = X
    last = len(S.weights) - 1
    for i, (w, b) in enumerate(zip(S.weights, S.biases)):
        z = np.matmul(h[:, None, :], w[idx]).reshape(len(idx), -1) + b[idx]
        h = z if i == last else np.tanh(z)
        acts.append(h)
    return h, acts


def stacked_backward(S: StackedParams, idx: np.ndarray, acts, dout: np.ndarray):
    """Per-model gradient sums, returned as (K, ...) arrays in ``arrays()`` order."""
    K = S.K
    n = dout.shape[0]
    sel = np.zeros((K, n))
    sel[idx, np.arange(n)] = 1.0
    grads = [None] * (2 * len(S.weights))
    delta = dout
    for i in range(len(S.weights) - 1, -1, -1):
        a = acts[i]
        # (K, in, n) @ (n, out): row n contributes only to its own model
        grads[2 * i] = np.matmul((sel[:, :, None] * a[None]).transpose(0, 2, 1), delta)
        grads[2 * i + 1] = sel @ delta
        if i:
            delta = np.matmul(S.weights[i][idx], delta[:, :, None]).reshape(n, -1) * (1.0 - a ** 2)
    return grads


def stacked_step_(S: StackedParams, grads, rate: float, direction: str = "ascend") -> None:
    sign = {"ascend": 1.0, "descend": -1.0}[direction]
    for a, g in zip(S.arrays(), grads):
        a += (sign * rate) * g


def save_checkpoint(p: ModelParams, path) -> None:
    lines = ["arch " + " ".join(str(d) for d in p.dims)]
    lines += [repr(float(x)) for x in p.flat()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path) -> ModelParams:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    head = lines[0].split()
    if not head or head[0] != "arch":
        raise ValueError(f"{path}: missing 'arch' header")
    dims = [int(x) for x in head[1:]]
    values = np.array([float(x) for x in lines[1:] if x.strip()])
    weights = [np.zeros((a, b)) for a, b in zip(dims[:-1], dims[1:])]
    biases = [np.zeros(b) for b in dims[1:]]
    p = ModelParams(weights, biases)
    expected = sum(a.size for a in p.arrays())
    if values.size != expected:
        raise ValueError(f"{path}: expected {expected} values, found {values.size}")
    p.set_flat(values)
    return p
