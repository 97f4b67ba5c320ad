"""Minimal deterministic neural-network engine.

Exactly the pieces the denoising architectures need: 3x3 same-padding
convolution, ReLU / per-channel PReLU, global average pooling, a fully
connected layer, MSE and softmax cross-entropy losses, and Adam.  Backward
passes are hand-wired (no autograd graph); every backward is validated
against central finite differences by the checking utilities at the bottom.

Arrays are plain numpy ndarrays.  Training runs in float32; all operations
preserve the input dtype, so the finite-difference checker can run the same
code in float64 where the step-size noise floor is low enough for a 1e-4
relative tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeMismatchError(ValueError):
    """Raised when operand shapes disagree; there is no implicit broadcasting."""


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeMismatchError(msg)


# ---------------------------------------------------------------------------
# functional ops
# ---------------------------------------------------------------------------

# Layers run internally on channel-major [C, N, H, W] activations: im2col
# then gathers with plain slice copies and GEMM outputs land contiguous,
# which matters on one core.  For the single-channel images this package
# feeds its networks, converting [N, 1, H, W] <-> [1, N, H, W] is a free
# axis-order view.  The public conv3x3_* functions keep the conventional
# [N, C, H, W] interface.

def _pad1(x: np.ndarray, buf: np.ndarray | None = None) -> np.ndarray:
    """Zero-pad the two trailing (spatial) dims by 1.  A reused buffer keeps
    its zero border: only the interior is overwritten."""
    c, n, h, w = x.shape
    shape = (c, n, h + 2, w + 2)
    if buf is None or buf.shape != shape or buf.dtype != x.dtype:
        buf = np.zeros(shape, dtype=x.dtype)
    buf[:, :, 1:h + 1, 1:w + 1] = x
    return buf


def _im2col(xp: np.ndarray, h: int, w: int,
            buf: np.ndarray | None = None) -> np.ndarray:
    """Gather 3x3 taps of a padded [C,N,H+2,W+2] input into a GEMM-ready
    [C*9, N*H*W] block (nine plain strided copies beat one 6-d gather)."""
    c, n = xp.shape[0], xp.shape[1]
    shape = (c, 3, 3, n, h, w)
    if buf is None or buf.shape != shape or buf.dtype != xp.dtype:
        buf = np.empty(shape, dtype=xp.dtype)
    for u in range(3):
        for v in range(3):
            buf[:, u, v] = xp[:, :, u:u + h, v:v + w]
    return buf


def _conv_forward(x, weight, bias, scratch=None):
    """Channel-major conv; returns (y, cols) with cols reusable by backward."""
    c, n, h, w = x.shape
    o = weight.shape[0]
    scratch = scratch if scratch is not None else {}
    xp = _pad1(x, scratch.get("pad"))
    scratch["pad"] = xp
    cols = _im2col(xp, h, w, scratch.get("cols"))
    scratch["cols"] = cols
    y = (weight.reshape(o, c * 9) @ cols.reshape(c * 9, n * h * w))
    y = y.reshape(o, n, h, w)
    y += bias[:, None, None, None]
    return y, cols


def _conv_backward(grad_out, cols, weight, need_input_grad=True, scratch=None):
    """Channel-major conv gradients from the forward's im2col block."""
    o, n, h, w = grad_out.shape
    c = weight.shape[1]
    scratch = scratch if scratch is not None else {}
    grad_bias = grad_out.sum(axis=(1, 2, 3))
    g2 = grad_out.reshape(o, n * h * w)
    grad_weight = (g2 @ cols.reshape(c * 9, -1).T).reshape(o, c, 3, 3)
    grad_x = None
    if need_input_grad:
        gp = _pad1(grad_out, scratch.get("gpad"))
        scratch["gpad"] = gp
        gcols = _im2col(gp, h, w, scratch.get("gcols"))
        scratch["gcols"] = gcols
        # full correlation: flipped taps, channels swapped
        wf = np.ascontiguousarray(
            weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(c, o * 9)
        grad_x = (wf @ gcols.reshape(o * 9, n * h * w)).reshape(c, n, h, w)
    return grad_x, grad_weight, grad_bias


def conv3x3_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """3x3 convolution, stride 1, zero padding 1 (spatial size preserved).

    x: [N, C_in, H, W], weight: [C_out, C_in, 3, 3], bias: [C_out].
    """
    _require(x.ndim == 4, f"conv input must be 4-d, got shape {x.shape}")
    _require(weight.ndim == 4 and weight.shape[2:] == (3, 3),
             f"conv weight must be [C_out, C_in, 3, 3], got {weight.shape}")
    _require(weight.shape[1] == x.shape[1],
             f"conv input channels {x.shape[1]} != weight channels {weight.shape[1]}")
    _require(bias.shape == (weight.shape[0],),
             f"conv bias shape {bias.shape} != ({weight.shape[0]},)")
    xm = np.ascontiguousarray(x.transpose(1, 0, 2, 3))
    y, _ = _conv_forward(xm, weight, bias)
    return np.ascontiguousarray(y.transpose(1, 0, 2, 3))


def conv3x3_backward(grad_out: np.ndarray, x: np.ndarray, weight: np.ndarray):
    """Gradients of conv3x3_forward; returns (grad_x, grad_weight, grad_bias)."""
    n, cout = grad_out.shape[0], grad_out.shape[1]
    _require(grad_out.shape == (n, cout) + x.shape[2:] and cout == weight.shape[0]
             and x.shape[0] == n,
             f"conv grad shape {grad_out.shape} inconsistent with input {x.shape} "
             f"and weight {weight.shape}")
    xm = np.ascontiguousarray(x.transpose(1, 0, 2, 3))
    gm = np.ascontiguousarray(grad_out.transpose(1, 0, 2, 3))
    cols = _im2col(_pad1(xm), x.shape[2], x.shape[3])
    gx, gw, gb = _conv_backward(gm, cols, weight)
    return np.ascontiguousarray(gx.transpose(1, 0, 2, 3)), gw, gb


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    _require(grad_out.shape == x.shape,
             f"relu grad shape {grad_out.shape} != input shape {x.shape}")
    return grad_out * (x > 0)


def prelu_forward(x: np.ndarray, slope: np.ndarray, axis: int = 1) -> np.ndarray:
    """PReLU with one learnable slope per channel (channel axis 1 for the
    conventional [N, C, ...] layout)."""
    _require(x.ndim >= 2 and slope.shape == (x.shape[axis],),
             f"prelu slope shape {slope.shape} != channels ({x.shape[axis]},)")
    shape = [1] * x.ndim
    shape[axis] = -1
    s = slope.reshape(shape)
    y = np.maximum(x, 0)
    y += s * np.minimum(x, 0)
    return y


def prelu_backward(grad_out: np.ndarray, x: np.ndarray, slope: np.ndarray,
                   axis: int = 1):
    """Returns (grad_x, grad_slope); slope gradient sums over all negative
    positions of its channel."""
    _require(grad_out.shape == x.shape,
             f"prelu grad shape {grad_out.shape} != input shape {x.shape}")
    shape = [1] * x.ndim
    shape[axis] = -1
    s = slope.reshape(shape)
    gneg = grad_out * (x < 0)
    grad_x = grad_out + (s - 1.0) * gneg
    axes = tuple(a for a in range(x.ndim) if a != axis)
    grad_slope = (gneg * x).sum(axis=axes).astype(slope.dtype, copy=False)
    return grad_x, grad_slope


def gap_forward(x: np.ndarray) -> np.ndarray:
    """Global average pooling over H and W: [N, C, H, W] -> [N, C]."""
    _require(x.ndim == 4, f"gap input must be 4-d, got shape {x.shape}")
    return x.mean(axis=(2, 3))


def gap_backward(grad_out: np.ndarray, input_shape: tuple) -> np.ndarray:
    n, c, h, w = input_shape
    _require(grad_out.shape == (n, c),
             f"gap grad shape {grad_out.shape} != ({n}, {c})")
    g = grad_out / np.asarray(h * w, dtype=grad_out.dtype)
    return np.broadcast_to(g[:, :, None, None], input_shape).astype(
        grad_out.dtype, copy=True)


def fc_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Fully connected layer: [N, C_in] @ weight.T + bias, weight [C_out, C_in]."""
    _require(x.ndim == 2 and weight.ndim == 2 and x.shape[1] == weight.shape[1],
             f"fc input {x.shape} incompatible with weight {weight.shape}")
    _require(bias.shape == (weight.shape[0],),
             f"fc bias shape {bias.shape} != ({weight.shape[0]},)")
    return x @ weight.T + bias


def fc_backward(grad_out: np.ndarray, x: np.ndarray, weight: np.ndarray):
    _require(grad_out.shape == (x.shape[0], weight.shape[0]),
             f"fc grad shape {grad_out.shape} != ({x.shape[0]}, {weight.shape[0]})")
    return grad_out @ weight, grad_out.T @ x, grad_out.sum(axis=0)


def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Mean of squared elementwise differences; returns (loss, grad_pred)."""
    _require(pred.shape == target.shape,
             f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.mean(np.square(diff), dtype=np.float64))
    grad = (2.0 / diff.size) * diff
    return loss, grad.astype(pred.dtype, copy=False)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean -log softmax(logits)[label] over rows; returns (loss, grad_logits).

    Numerically stabilized by max-subtraction; grad = (softmax - onehot) / N.
    """
    _require(logits.ndim == 2, f"logits must be [N, K], got shape {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    _require(labels.shape == (n,), f"labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    z = logits.astype(np.float64) - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    p = ez / denom
    rows = np.arange(n)
    loss = float(np.mean(np.log(denom[:, 0]) - z[rows, labels]))
    grad = p
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad.astype(logits.dtype, copy=False)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction, in float64."""
    z = logits.astype(np.float64) - logits.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Per-parameter-tensor Adam state; moments match the parameter shape."""
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: np.ndarray, lr: float = 1e-4) -> "AdamState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param), lr=lr)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState,
              name: str = "param") -> None:
    """One Adam update with bias correction, applied to ``param`` in place."""
    _require(param.shape == grad.shape == state.m.shape == state.v.shape,
             f"adam shapes disagree for '{name}': param {param.shape}, "
             f"grad {grad.shape}, m {state.m.shape}, v {state.v.shape}")
    if not np.isfinite(grad).all():
        raise FloatingPointError(f"non-finite gradient for parameter tensor '{name}'")
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * np.square(grad)
    mhat = state.m / (1.0 - state.beta1 ** state.step)
    vhat = state.v / (1.0 - state.beta2 ** state.step)
    param -= state.lr * mhat / (np.sqrt(vhat) + state.eps)


# ---------------------------------------------------------------------------
# layers (parameter-owning wrappers used to compose networks)
#
# Layer activations are channel-major [C, N, H, W]; see note above.
# ---------------------------------------------------------------------------

class Conv3x3:
    kind = "conv"

    def __init__(self, in_channels: int, out_channels: int, rng=None,
                 dtype=np.float32):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.skip_input_grad = False  # set on a network's first layer
        shape = (out_channels, in_channels, 3, 3)
        if rng is None:
            w = np.zeros(shape, dtype=dtype)
        else:
            # Kaiming fan-in scaling for ReLU-family activations
            std = np.sqrt(2.0 / (9 * in_channels))
            w = (rng.normal(int(np.prod(shape))) * std).reshape(shape).astype(dtype)
        self.weight = w
        self.bias = np.zeros(out_channels, dtype=dtype)
        self.grad_weight = None
        self.grad_bias = None
        # training-path scratch; reused only by the single-writer cache=True
        # path so concurrent cache=False forwards stay thread-safe
        self._scratch = {}
        self._cols = None
        self._x = None

    def forward(self, x, cache=True):
        _require(x.shape[0] == self.in_channels,
                 f"conv input channels {x.shape[0]} != {self.in_channels}")
        if cache:
            y, cols = _conv_forward(x, self.weight, self.bias, self._scratch)
            self._cols = cols
        else:
            y, _ = _conv_forward(x, self.weight, self.bias)
        return y

    def backward(self, grad_out):
        gx, self.grad_weight, self.grad_bias = _conv_backward(
            grad_out, self._cols, self.weight,
            need_input_grad=not self.skip_input_grad, scratch=self._scratch)
        return gx

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def grads(self):
        return {"weight": self.grad_weight, "bias": self.grad_bias}


class ReLU:
    kind = "relu"

    def __init__(self):
        self._x = None

    def forward(self, x, cache=True):
        if cache:
            self._x = x
        return relu_forward(x)

    def backward(self, grad_out):
        return relu_backward(grad_out, self._x)

    def params(self):
        return {}

    def grads(self):
        return {}


class PReLU:
    kind = "prelu"

    def __init__(self, channels: int, init_slope: float = 0.25, dtype=np.float32):
        self.channels = channels
        self.slope = np.full(channels, init_slope, dtype=dtype)
        self.grad_slope = None
        self._x = None

    def forward(self, x, cache=True):
        if cache:
            self._x = x
        return prelu_forward(x, self.slope, axis=0)

    def backward(self, grad_out):
        gx, self.grad_slope = prelu_backward(grad_out, self._x, self.slope,
                                             axis=0)
        return gx

    def params(self):
        return {"slope": self.slope}

    def grads(self):
        return {"slope": self.grad_slope}


class GlobalAvgPool:
    """Pools [C, N, H, W] down to row-major [N, C] feature vectors."""
    kind = "gap"

    def __init__(self):
        self._shape = None

    def forward(self, x, cache=True):
        if cache:
            self._shape = x.shape
        return x.mean(axis=(2, 3)).T

    def backward(self, grad_out):
        c, n, h, w = self._shape
        _require(grad_out.shape == (n, c),
                 f"gap grad shape {grad_out.shape} != ({n}, {c})")
        g = grad_out.T / np.asarray(h * w, dtype=grad_out.dtype)
        return np.broadcast_to(g[:, :, None, None], self._shape).astype(
            grad_out.dtype, copy=True)

    def params(self):
        return {}

    def grads(self):
        return {}


class FullyConnected:
    kind = "fc"

    def __init__(self, in_features: int, out_features: int, rng=None,
                 dtype=np.float32):
        self.in_features = in_features
        self.out_features = out_features
        shape = (out_features, in_features)
        if rng is None:
            w = np.zeros(shape, dtype=dtype)
        else:
            std = np.sqrt(2.0 / in_features)
            w = (rng.normal(out_features * in_features) * std).reshape(shape).astype(dtype)
        self.weight = w
        self.bias = np.zeros(out_features, dtype=dtype)
        self.grad_weight = None
        self.grad_bias = None
        self._x = None

    def forward(self, x, cache=True):
        if cache:
            self._x = x
        return fc_forward(x, self.weight, self.bias)

    def backward(self, grad_out):
        gx, self.grad_weight, self.grad_bias = fc_backward(
            grad_out, self._x, self.weight)
        return gx

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def grads(self):
        return {"weight": self.grad_weight, "bias": self.grad_bias}


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    checked: int
    excluded: int


@dataclass
class GradCheckReport:
    """Per-parameter-tensor maximum relative errors from a finite-difference run."""
    tolerance: float
    entries: list = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def lines(self):
        out = []
        for e in self.entries:
            status = "ok" if e.max_rel_error < self.tolerance else "FAIL"
            out.append(f"{e.name}: max_rel_err={e.max_rel_error:.3e} "
                       f"checked={e.checked} excluded={e.excluded} [{status}]")
        return out


def fd_check_params(objective, named_params: dict, analytic: dict, *,
                    step: float = 1e-5, tolerance: float = 1e-4,
                    denom_floor: float = 1e-5,
                    activation_signs=None) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``objective`` recomputes the scalar loss from the current parameter values
    (parameters are perturbed in place and restored).  Errors are relative to
    max(|numeric|, |analytic|, denom_floor): central differences carry an
    absolute noise floor of roughly eps*|loss|/step, so coordinates with
    gradients below it would otherwise dominate the report with meaningless
    ratios.

    ``activation_signs``, when given, returns the ReLU/PReLU pre-activation
    sign pattern of the most recent objective() call.  A failing coordinate
    is excluded only if the pattern differs between its +step and -step
    probes, i.e. the probe genuinely stepped across a derivative kink; a
    wrong backward pass does not move pre-activations and stays visible.

    The report lists the max relative error per parameter tensor and never
    raises on failures.
    """
    report = GradCheckReport(tolerance=tolerance)
    for name, p in named_params.items():
        an = analytic[name]
        flat = p.reshape(-1)
        worst = 0.0
        excluded = 0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp = objective()
            signs_p = activation_signs() if activation_signs else None
            flat[i] = orig - step
            lm = objective()
            signs_m = activation_signs() if activation_signs else None
            flat[i] = orig
            fd = (lp - lm) / (2.0 * step)
            ag = float(an.reshape(-1)[i])
            err = abs(fd - ag) / max(abs(fd), abs(ag), denom_floor)
            if err >= tolerance and signs_p is not None \
                    and not np.array_equal(signs_p, signs_m):
                excluded += 1
                continue
            worst = max(worst, err)
        report.entries.append(GradCheckEntry(
            name=name, max_rel_error=worst, checked=flat.size - excluded,
            excluded=excluded))
    return report
