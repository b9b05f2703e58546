# engine/nn_engine.py

"""Bias-free ReLU MLPs: forward pass, exact per-sample backprop, and SGD training.

Weights of layer l are stored row-major as a (fan_out, fan_in) matrix, so the
incoming weights of one output neuron are one contiguous row. The network has
no biases, which makes it positively homogeneous of degree L (number of weight
layers).
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize
from scipy.special import log_softmax, softmax
from tqdm import tqdm

from errors import InputError, TrainingDivergedError
from schemas.config_schemas import ArchSpec, TrainConfig

logger = logging.getLogger("TargetTrainer")


@dataclass(frozen=True)
class LayerSlot:
    layer_index: int
    shape: Tuple[int, int]
    offset: int

    @property
    def size(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def stop(self) -> int:
        return self.offset + self.size


def make_layout(arch: ArchSpec) -> Tuple[LayerSlot, ...]:
    dims = arch.layer_dims
    slots, offset = [], 0
    for l in range(arch.depth):
        slot = LayerSlot(layer_index=l, shape=(dims[l + 1], dims[l]), offset=offset)
        slots.append(slot)
        offset = slot.stop
    return tuple(slots)


@dataclass
class ParamVector:
    values: np.ndarray
    layout: Tuple[LayerSlot, ...]

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        expected = self.layout[-1].stop if self.layout else 0
        if self.values.shape != (expected,):
            raise InputError(f"parameter vector has shape {self.values.shape}, layout needs ({expected},)")

    def __len__(self) -> int:
        return self.values.shape[0]

    @classmethod
    def zeros(cls, arch: ArchSpec) -> "ParamVector":
        layout = make_layout(arch)
        return cls(np.zeros(layout[-1].stop), layout)

    @classmethod
    def from_layers(cls, arch: ArchSpec, matrices: Sequence[np.ndarray]) -> "ParamVector":
        layout = make_layout(arch)
        if len(matrices) != len(layout):
            raise InputError(f"expected {len(layout)} weight matrices, got {len(matrices)}")
        for slot, mat in zip(layout, matrices):
            if np.shape(mat) != slot.shape:
                raise InputError(f"layer {slot.layer_index}: expected shape {slot.shape}, got {np.shape(mat)}")
        return cls(np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in matrices]), layout)

    def layer(self, index: int) -> np.ndarray:
        slot = self.layout[index]
        return self.values[slot.offset:slot.stop].reshape(slot.shape)

    def layers(self) -> List[np.ndarray]:
        return [self.layer(i) for i in range(len(self.layout))]

    def scaled(self, c: float) -> "ParamVector":
        return ParamVector(self.values * c, self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)


def _check_theta(arch: ArchSpec, theta: ParamVector) -> None:
    if theta.layout != make_layout(arch):
        raise InputError("parameter layout does not match the architecture")


def _as_batch(arch: ArchSpec, x: np.ndarray) -> np.ndarray:
    X = np.asarray(x, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != arch.input_dim:
        raise InputError(f"expected inputs of length {arch.input_dim}, got shape {np.shape(x)}")
    return X


def _check_labels(arch: ArchSpec, y: np.ndarray) -> np.ndarray:
    Y = np.atleast_1d(np.asarray(y))
    if not np.issubdtype(Y.dtype, np.integer) or Y.min(initial=0) < 0 or Y.max(initial=0) >= arch.num_classes:
        raise InputError(f"labels must be integers in [0, {arch.num_classes})")
    return Y.astype(np.int64)


@dataclass
class ForwardTrace:
    inputs: List[np.ndarray]   # inputs[l]: (n, fan_in) activation entering layer l
    logits: np.ndarray         # (n, C)


def forward_trace(arch: ArchSpec, theta: ParamVector, X: np.ndarray) -> ForwardTrace:
    _check_theta(arch, theta)
    X = _as_batch(arch, X)
    inputs, h = [], X
    weights = theta.layers()
    for W in weights[:-1]:
        inputs.append(h)
        h = np.maximum(h @ W.T, 0.0)
    inputs.append(h)
    return ForwardTrace(inputs=inputs, logits=h @ weights[-1].T)


def forward_logits(arch: ArchSpec, theta: ParamVector, x: np.ndarray) -> np.ndarray:
    """Phi(theta; x). A single feature vector gives a length-C vector, a batch gives (n, C)."""
    logits = forward_trace(arch, theta, x).logits
    return logits[0] if np.ndim(x) == 1 else logits


def runner_up(logits: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """argmax over j != y; ties resolve to the lowest class index."""
    masked = np.array(logits, dtype=np.float64, copy=True)
    masked[np.arange(len(Y)), Y] = -np.inf
    return np.argmax(masked, axis=1)


def margins_from_logits(logits: np.ndarray, Y: np.ndarray) -> np.ndarray:
    rows = np.arange(len(Y))
    return logits[rows, Y] - logits[rows, runner_up(logits, Y)]


def margin(arch: ArchSpec, theta: ParamVector, x: np.ndarray, y: int) -> float:
    Y = _check_labels(arch, y)
    return float(margins_from_logits(forward_trace(arch, theta, x).logits, Y)[0])


def batch_margins(arch: ArchSpec, theta: ParamVector, X: np.ndarray, Y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Margins and predicted classes for a batch."""
    Y = _check_labels(arch, Y)
    logits = forward_trace(arch, theta, X).logits
    return margins_from_logits(logits, Y), np.argmax(logits, axis=1)


def cross_entropy(logits: np.ndarray, Y: np.ndarray) -> np.ndarray:
    return -log_softmax(logits, axis=1)[np.arange(len(Y)), Y]


@dataclass
class GradientTrace:
    """Per-sample gradients in factored form: grad of layer l for sample i is outer(deltas[l][i], inputs[l][i])."""

    inputs: List[np.ndarray]
    deltas: List[np.ndarray]
    layout: Tuple[LayerSlot, ...]

    @property
    def n_samples(self) -> int:
        return self.inputs[0].shape[0]

    def layer_rows(self, layer: int, row_start: int, row_stop: int) -> np.ndarray:
        """(n, (row_stop - row_start) * fan_in) per-sample gradient slice of one layer."""
        d = self.deltas[layer][:, row_start:row_stop]
        h = self.inputs[layer]
        return np.einsum("nr,ni->nri", d, h).reshape(d.shape[0], -1)

    def layer_norms(self) -> np.ndarray:
        """(n, L) Euclidean norm of each sample's per-layer gradient."""
        return np.stack(
            [np.linalg.norm(d, axis=1) * np.linalg.norm(h, axis=1) for d, h in zip(self.deltas, self.inputs)],
            axis=1,
        )

    def sample(self, i: int) -> np.ndarray:
        return np.concatenate([np.outer(d[i], h[i]).ravel() for d, h in zip(self.deltas, self.inputs)])

    def weighted_sum(self, weights: np.ndarray) -> np.ndarray:
        """sum_i weights[i] * grad_i as a flat parameter array."""
        return np.concatenate([np.einsum("n,nr,ni->ri", weights, d, h).ravel() for d, h in zip(self.deltas, self.inputs)])


def backprop(arch: ArchSpec, theta: ParamVector, trace: ForwardTrace, output_grads: np.ndarray) -> GradientTrace:
    """Reverse-mode pass for per-sample scalar objectives with d(objective)/d(logits) = output_grads.

    The ReLU subgradient at exactly 0 is 0.
    """
    weights = theta.layers()
    deltas: List[Optional[np.ndarray]] = [None] * arch.depth
    delta = np.asarray(output_grads, dtype=np.float64)
    for l in range(arch.depth - 1, -1, -1):
        deltas[l] = delta
        if l > 0:
            delta = (delta @ weights[l]) * (trace.inputs[l] > 0.0)
    return GradientTrace(inputs=trace.inputs, deltas=deltas, layout=theta.layout)


def _one_hot(Y: np.ndarray, C: int) -> np.ndarray:
    out = np.zeros((len(Y), C))
    out[np.arange(len(Y)), Y] = 1.0
    return out


def margin_gradient_trace(arch: ArchSpec, theta: ParamVector, X: np.ndarray, Y: np.ndarray) -> GradientTrace:
    Y = _check_labels(arch, Y)
    trace = forward_trace(arch, theta, X)
    j_star = runner_up(trace.logits, Y)
    grads = _one_hot(Y, arch.num_classes) - _one_hot(j_star, arch.num_classes)
    return backprop(arch, theta, trace, grads)


def loss_gradient_trace(arch: ArchSpec, theta: ParamVector, X: np.ndarray, Y: np.ndarray) -> GradientTrace:
    Y = _check_labels(arch, Y)
    trace = forward_trace(arch, theta, X)
    grads = softmax(trace.logits, axis=1) - _one_hot(Y, arch.num_classes)
    return backprop(arch, theta, trace, grads)


def margin_gradient(arch: ArchSpec, theta: ParamVector, x: np.ndarray, y: int) -> ParamVector:
    """grad_theta [Phi_y - Phi_j*] with j* the lowest-index runner-up class."""
    return ParamVector(margin_gradient_trace(arch, theta, x, y).sample(0), theta.layout)


def loss_gradient(arch: ArchSpec, theta: ParamVector, x: np.ndarray, y: int) -> ParamVector:
    """Gradient of the per-sample softmax cross-entropy."""
    return ParamVector(loss_gradient_trace(arch, theta, x, y).sample(0), theta.layout)


def homogeneity_check(
    arch: ArchSpec,
    theta: ParamVector,
    x: np.ndarray,
    c: float,
    forward: Optional[Callable[[ArchSpec, ParamVector, np.ndarray], np.ndarray]] = None,
) -> bool:
    """True iff ||Phi(x; c theta) - c^L Phi(x; theta)|| <= 1e-8 (1 + ||c^L Phi(x; theta)||)."""
    if c <= 0:
        raise InputError(f"scale must be positive, got {c}")
    forward = forward or forward_logits
    expected = c ** arch.depth * np.asarray(forward(arch, theta, x))
    actual = np.asarray(forward(arch, theta.scaled(c), x))
    return bool(np.linalg.norm(actual - expected) <= 1e-8 * (1.0 + np.linalg.norm(expected)))


def init_params(arch: ArchSpec, rng: np.random.Generator) -> ParamVector:
    """Per-layer uniform(-sqrt(1/fan_in), sqrt(1/fan_in))."""
    mats = []
    for slot in make_layout(arch):
        bound = np.sqrt(1.0 / slot.shape[1])
        mats.append(rng.uniform(-bound, bound, size=slot.shape))
    return ParamVector.from_layers(arch, mats)


def flip_views(X: np.ndarray, side: int) -> np.ndarray:
    """Horizontal mirror of row-major side x side feature grids."""
    X = np.asarray(X, dtype=np.float64)
    return X.reshape(-1, side, side)[:, :, ::-1].reshape(X.shape)


def _mean_loss_gradient(arch: ArchSpec, theta: ParamVector, X: np.ndarray, Y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    trace = forward_trace(arch, theta, X)
    losses = cross_entropy(trace.logits, Y)
    grads = (softmax(trace.logits, axis=1) - _one_hot(Y, arch.num_classes)) / len(Y)
    deltas = backprop(arch, theta, trace, grads).deltas
    return losses, np.concatenate([(d.T @ h).ravel() for d, h in zip(deltas, trace.inputs)])


def full_gradient_norm(arch: ArchSpec, theta: ParamVector, X: np.ndarray, Y: np.ndarray, weight_decay: float) -> float:
    """||grad of mean cross-entropy + weight_decay/2 ||theta||^2|| over the whole dataset."""
    Y = _check_labels(arch, Y)
    _, grad = _mean_loss_gradient(arch, theta, _as_batch(arch, X), Y)
    return float(np.linalg.norm(grad + weight_decay * theta.values))


def stationarity_residual(arch: ArchSpec, theta: ParamVector, X: np.ndarray, Y: np.ndarray, weight_decay: float) -> float:
    """||theta - sum_i l_i' grad margin_i|| / ||theta|| for a binary model.

    With the mean loss, l_i' = (1 - p_{i,y_i}) / (n * weight_decay), the negative
    loss derivative w.r.t. the margin scaled by 1 / weight_decay.
    """
    if arch.num_classes != 2:
        raise InputError("the margin form of weight-decay stationarity is defined for binary models")
    if weight_decay <= 0:
        raise InputError("weight-decay stationarity needs weight_decay > 0")
    Y = _check_labels(arch, Y)
    trace = margin_gradient_trace(arch, theta, X, Y)
    logits = forward_trace(arch, theta, X).logits
    p_true = softmax(logits, axis=1)[np.arange(len(Y)), Y]
    coeffs = (1.0 - p_true) / (len(Y) * weight_decay)
    residual = theta.values - trace.weighted_sum(coeffs)
    return float(np.linalg.norm(residual) / np.linalg.norm(theta.values))


def train(
    arch: ArchSpec,
    data: Sequence[Tuple[np.ndarray, int]],
    cfg: TrainConfig,
    *,
    grid_side: Optional[int] = None,
    progress: bool = False,
) -> ParamVector:
    """Train on (x, y) pairs; see train_arrays."""
    if len(data) == 0:
        raise InputError("training data is empty")
    X = np.stack([np.asarray(x, dtype=np.float64) for x, _ in data])
    Y = np.asarray([y for _, y in data])
    return train_arrays(arch, X, Y, cfg, grid_side=grid_side, progress=progress)


def train_arrays(
    arch: ArchSpec,
    X: np.ndarray,
    Y: np.ndarray,
    cfg: TrainConfig,
    *,
    grid_side: Optional[int] = None,
    progress: bool = False,
) -> ParamVector:
    """Mini-batch SGD with heavy-ball momentum on mean cross-entropy + weight_decay/2 ||theta||^2.

    Flips are applied per sample with probability 1/2 only when grid_side is
    given (image-shaped data) and cfg.flip_augment is set. Stops at the epoch
    cap, when the epoch mean loss drops below cfg.target_loss, or when the full
    gradient norm drops below cfg.stop_grad_norm.
    """
    X = _as_batch(arch, X)
    Y = _check_labels(arch, Y)
    if len(Y) == 0 or len(Y) != len(X):
        raise InputError("training data is empty or inputs and labels differ in length")
    rng = np.random.default_rng(cfg.seed)
    theta = init_params(arch, rng)
    velocity = np.zeros_like(theta.values)
    flip = grid_side is not None and cfg.flip_augment
    n = len(Y)

    epochs = tqdm(range(cfg.epochs), desc="train", disable=not progress, leave=False)
    for epoch in epochs:
        order = rng.permutation(n)
        total_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = X[idx]
            if flip:
                mask = rng.random(len(idx)) < 0.5
                if mask.any():
                    xb = xb.copy()
                    xb[mask] = flip_views(xb[mask], grid_side)
            losses, grad = _mean_loss_gradient(arch, theta, xb, Y[idx])
            if not np.all(np.isfinite(losses)):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}; learning rate {cfg.learning_rate} is too high"
                )
            grad = grad + cfg.weight_decay * theta.values
            velocity = cfg.momentum * velocity + grad
            theta = ParamVector(theta.values - cfg.learning_rate * velocity, theta.layout)
            total_loss += float(losses.sum())

        mean_loss = total_loss / n
        if epoch % cfg.log_every == 0:
            logger.debug("epoch %d mean loss %.6g", epoch, mean_loss)
        if cfg.target_loss is not None and mean_loss < cfg.target_loss:
            logger.info("Reached target loss %.3g at epoch %d", cfg.target_loss, epoch)
            break
        if cfg.stop_grad_norm is not None:
            gnorm = full_gradient_norm(arch, theta, X, Y, cfg.weight_decay)
            if gnorm <= cfg.stop_grad_norm:
                logger.info("Gradient norm %.3g below %.3g at epoch %d", gnorm, cfg.stop_grad_norm, epoch)
                break
    if cfg.polish_iters > 0:
        theta = polish(arch, theta, X, Y, cfg.weight_decay, cfg.stop_grad_norm, cfg.polish_iters)
    return theta


def polish(
    arch: ArchSpec,
    theta: ParamVector,
    X: np.ndarray,
    Y: np.ndarray,
    weight_decay: float,
    grad_tol: float,
    max_iters: int,
    restarts: int = 3,
) -> ParamVector:
    """Full-batch BFGS on mean cross-entropy + weight_decay/2 ||theta||^2 until the
    gradient 2-norm is at most grad_tol.

    BFGS restarts from the last iterate when its line search stalls on a ReLU kink.
    """
    X = _as_batch(arch, X)
    Y = _check_labels(arch, Y)
    layout = theta.layout

    def objective(values: np.ndarray) -> Tuple[float, np.ndarray]:
        losses, grad = _mean_loss_gradient(arch, ParamVector(values, layout), X, Y)
        return float(losses.mean() + 0.5 * weight_decay * values @ values), grad + weight_decay * values

    values = theta.values.copy()
    for attempt in range(restarts + 1):
        result = minimize(
            objective, values, jac=True, method="BFGS",
            options={"gtol": grad_tol, "norm": 2, "maxiter": max_iters},
        )
        values = result.x
        gnorm = float(np.linalg.norm(result.jac))
        logger.info("BFGS pass %d: gradient norm %.3g after %d iterations", attempt + 1, gnorm, result.nit)
        if gnorm <= grad_tol:
            break
    else:
        logger.warning("BFGS stopped at gradient norm %.3g, above %.3g", gnorm, grad_tol)
    return ParamVector(values, layout)


def accuracy(arch: ArchSpec, theta: ParamVector, X: np.ndarray, Y: np.ndarray) -> float:
    if len(Y) == 0:
        return float("nan")
    _, predicted = batch_margins(arch, theta, X, Y)
    return float(np.mean(predicted == np.asarray(Y)))
