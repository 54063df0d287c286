"""Dense MLP math with hand-written reverse mode, Adam and the step schedule.

Networks are plain numpy arrays: layer k maps h_k -> act(h_k @ W_k.T + b_k),
the last layer has no activation and no residual, and every second hidden
layer adds a residual from two layers back (identity when widths match,
zero-pad/truncate when they differ).
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from ..errors import DegenerateInputError, NumericalError, SchemaError

logger = logging.getLogger(__name__)

ACTIVATION = 'silu'
SKIP_EVERY = 2


def silu(z: np.ndarray) -> np.ndarray:
    return z * expit(z)


def silu_grad(z: np.ndarray) -> np.ndarray:
    s = expit(z)
    return s * (1.0 + z * (1.0 - s))


@dataclass
class MlpParams:
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    activation: str = ACTIVATION
    skip_every: int = SKIP_EVERY

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise SchemaError('MLP needs one bias per weight matrix and at least one layer')
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise SchemaError(f'layer {k}: weight {w.shape} and bias {b.shape} disagree')
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise SchemaError(f'layer {k}: input width {w.shape[1]} does not chain with '
                                  f'previous output {self.weights[k - 1].shape[0]}')
        if self.activation != ACTIVATION:
            raise SchemaError(f"unsupported activation '{self.activation}'")

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def d_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def d_out(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def dims(self) -> List[int]:
        return [self.d_in] + [w.shape[0] for w in self.weights]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def has_skip(self, k: int) -> bool:
        """Layer k closes a residual block spanning layers k-1 and k; the output layer never does"""
        return self.skip_every > 0 and 1 <= k < self.depth - 1 and (k + 1) % self.skip_every == 0

    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def tensors(self, prefix: str) -> Dict[str, np.ndarray]:
        out = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f'{prefix}.W{k}'] = w
            out[f'{prefix}.b{k}'] = b
        return out

    @classmethod
    def from_tensors(cls, tensors: Dict[str, np.ndarray], prefix: str) -> 'MlpParams':
        weights, biases = [], []
        k = 0
        while f'{prefix}.W{k}' in tensors:
            weights.append(tensors[f'{prefix}.W{k}'])
            biases.append(tensors[f'{prefix}.b{k}'])
            k += 1
        if not weights:
            raise SchemaError(f"no tensors found for network '{prefix}'")
        return cls(weights, biases)

    def all_finite(self) -> bool:
        return all(np.isfinite(w).all() and np.isfinite(b).all()
                   for w, b in zip(self.weights, self.biases))


@dataclass
class MlpGrads:
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def tensors(self, prefix: str) -> Dict[str, np.ndarray]:
        out = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f'{prefix}.W{k}'] = w
            out[f'{prefix}.b{k}'] = b
        return out


def init_mlp(dims: Sequence[int], rng: np.random.Generator, zero_last: bool = False,
             dtype=np.float32) -> MlpParams:
    """Scaled-normal weights (variance 1/fan_in), zero biases"""
    weights, biases = [], []
    n_layers = len(dims) - 1
    for k in range(n_layers):
        fan_in, fan_out = dims[k], dims[k + 1]
        if zero_last and k == n_layers - 1:
            w = np.zeros((fan_out, fan_in))
        else:
            w = rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in)
        weights.append(w.astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return MlpParams(weights, biases)


def _project(h: np.ndarray, width: int) -> np.ndarray:
    """Zero-padded (or truncated) projection onto `width` columns"""
    n, d = h.shape
    if d == width:
        return h
    out = np.zeros((n, width), dtype=h.dtype)
    m = min(d, width)
    out[:, :m] = h[:, :m]
    return out


def _check_inputs(params: MlpParams, inputs: np.ndarray) -> np.ndarray:
    inputs = np.asarray(inputs)
    if inputs.ndim != 2 or inputs.shape[1] != params.d_in:
        raise SchemaError(f'MLP expects inputs of shape (n, {params.d_in}), got {inputs.shape}')
    if inputs.shape[0] < 1:
        raise SchemaError('MLP needs at least one input row')
    return inputs.astype(params.dtype, copy=False)


def _forward(params: MlpParams, inputs: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    hs = [inputs]
    zs = []
    last = params.depth - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = hs[k] @ w.T + b
        zs.append(z)
        h = z if k == last else silu(z)
        if params.has_skip(k):
            h = h + _project(hs[k - 1], h.shape[1])
        hs.append(h)
    return hs, zs


def mlp_forward(params: MlpParams, inputs: np.ndarray) -> np.ndarray:
    inputs = _check_inputs(params, inputs)
    hs, _ = _forward(params, inputs)
    return hs[-1]


def mlp_gradients(params: MlpParams, inputs: np.ndarray,
                  upstream_grad: np.ndarray) -> Tuple[MlpGrads, np.ndarray]:
    """Exact reverse-mode gradients of sum(upstream_grad * mlp_forward(inputs))"""
    inputs = _check_inputs(params, inputs)
    upstream_grad = np.asarray(upstream_grad, dtype=params.dtype)
    if upstream_grad.shape != (inputs.shape[0], params.d_out):
        raise SchemaError(f'upstream gradient shape {upstream_grad.shape} does not match '
                          f'outputs ({inputs.shape[0]}, {params.d_out})')
    hs, zs = _forward(params, inputs)
    grad_h: Dict[int, np.ndarray] = {params.depth: upstream_grad}
    grad_w: List[Optional[np.ndarray]] = [None] * params.depth
    grad_b: List[Optional[np.ndarray]] = [None] * params.depth
    last = params.depth - 1
    for k in range(last, -1, -1):
        g = grad_h.pop(k + 1)
        if params.has_skip(k):
            back = _project(g, hs[k - 1].shape[1])
            grad_h[k - 1] = grad_h.get(k - 1, 0) + back
        dz = g if k == last else g * silu_grad(zs[k])
        grad_w[k] = dz.T @ hs[k]
        grad_b[k] = dz.sum(axis=0)
        grad_h[k] = grad_h.get(k, 0) + dz @ params.weights[k]
    return MlpGrads(grad_w, grad_b), grad_h[0]


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Dict[str, np.ndarray], beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> 'AdamState':
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            beta1=beta1, beta2=beta2, eps=eps,
        )


def adam_step(state: AdamState, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
              lr: float) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; inputs are not mutated"""
    if lr <= 0:
        raise NumericalError(f'learning rate must be positive, got {lr}')
    if set(params) != set(grads) or set(params) != set(state.m):
        raise SchemaError('parameter, gradient and optimizer state names differ')
    bad = {k: int((~np.isfinite(g)).sum()) for k, g in grads.items() if not np.isfinite(g).all()}
    if bad:
        raise NumericalError('non-finite gradient, update rejected',
                             diagnostics={'non_finite_entries': bad, 'step': state.step})
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** step
    corr2 = 1.0 - b2 ** step
    new_params, new_m, new_v = {}, {}, {}
    for name in params:
        p, g = params[name], grads[name]
        if p.shape != g.shape or p.shape != state.m[name].shape:
            raise SchemaError(f"shape mismatch for '{name}': param {p.shape}, grad {g.shape}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        update = lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        new_params[name] = (p - update).astype(p.dtype, copy=False)
        new_m[name] = m.astype(p.dtype, copy=False)
        new_v[name] = v.astype(p.dtype, copy=False)
    return new_params, AdamState(new_m, new_v, step, b1, b2, state.eps)


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    milestones: Tuple[int, ...] = field(default_factory=tuple)
    gamma: float = 0.5

    def __post_init__(self):
        if self.base_lr <= 0:
            raise SchemaError('base_lr must be positive')
        if not 0 < self.gamma <= 1:
            raise SchemaError('gamma must lie in (0, 1]')
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise SchemaError(f'milestones must be strictly increasing: {self.milestones}')

    @classmethod
    def proportional(cls, base_lr: float, total_epochs: int,
                     fractions: Sequence[float] = (0.4, 0.8, 1.0), gamma: float = 0.5) -> 'LrSchedule':
        """Milestones at fixed fractions of the run (80/160/200 of 200 -> 0.4/0.8/1.0)"""
        marks = sorted({int(round(f * total_epochs)) for f in fractions if round(f * total_epochs) > 0})
        return cls(base_lr, tuple(marks), gamma)


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    passed = sum(1 for m in schedule.milestones if m <= epoch)
    return schedule.base_lr * schedule.gamma ** passed


def _masked_rows(pred: np.ndarray, target: np.ndarray, ocean_mask: np.ndarray):
    pred = np.asarray(pred)
    target = np.asarray(target)
    mask = np.asarray(ocean_mask, dtype=bool)
    if pred.shape != target.shape or pred.ndim != 2 or mask.shape != (pred.shape[0],):
        raise SchemaError(f'masked_mse shapes disagree: pred {pred.shape}, target {target.shape}, '
                          f'mask {mask.shape}')
    n = int(mask.sum())
    if n == 0:
        raise DegenerateInputError('no ocean cells in loss mask')
    return pred, target, mask, n


def masked_mse(pred: np.ndarray, target: np.ndarray, ocean_mask: np.ndarray) -> float:
    pred, target, mask, n = _masked_rows(pred, target, ocean_mask)
    diff = pred[mask] - target[mask]
    return float(np.sum(diff.astype(np.float64) ** 2) / (n * pred.shape[1]))


def masked_mse_grad(pred: np.ndarray, target: np.ndarray, ocean_mask: np.ndarray) -> np.ndarray:
    pred, target, mask, n = _masked_rows(pred, target, ocean_mask)
    grad = np.zeros_like(pred)
    grad[mask] = 2.0 * (pred[mask] - target[mask]) / (n * pred.shape[1])
    return grad
