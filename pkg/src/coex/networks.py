"""Expert and gate network definitions, parameter accounting, checkpoints.

Experts are plain convolutional stacks without any normalization layers,
named ``dXcY`` for depth X and Y filters per hidden layer.  An expert
predicts the noise map of its input and the denoised estimate is
``input - prediction`` (residual form).  The gate is a four-layer CNN with
PReLU after the first three convolutions, global average pooling, and a
fully connected layer producing one logit per expert.

Checkpoints are a self-describing binary container: magic + format version,
a JSON header (configs, epoch, seed, optimizer state, tensor manifest), then
the raw little-endian float32 tensor payloads in manifest order.  The byte
layout is documented in docs/formats.md; save -> load -> save round-trips
bit-identically.
"""

from __future__ import annotations

import copy
import json
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .nn import (AdamState, Conv3x3, FullyConnected, GlobalAvgPool, PReLU,
                 ReLU, adam_step, fd_check_params, mse_loss,
                 softmax_cross_entropy)
from .rng import Rng, derive_seed

CHECKPOINT_MAGIC = b"COEXCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExpertConfig:
    """Depth (total conv layers) and per-hidden-layer filter count."""
    depth: int
    channels: int

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"expert depth must be >= 2, got {self.depth}")
        if self.channels < 1:
            raise ValueError(f"expert channels must be >= 1, got {self.channels}")

    @property
    def name(self) -> str:
        return f"d{self.depth}c{self.channels}"

    @classmethod
    def from_name(cls, name: str) -> "ExpertConfig":
        m = re.fullmatch(r"d(\d+)c(\d+)", name.strip())
        if not m:
            raise ValueError(f"expert name must look like 'd5c16', got {name!r}")
        return cls(depth=int(m.group(1)), channels=int(m.group(2)))


@dataclass(frozen=True)
class GateConfig:
    """Four 16-filter conv layers, PReLU after the first three, GAP, FC."""
    n_experts: int
    channels: int = 16
    conv_layers: int = 4

    def __post_init__(self):
        if self.n_experts < 1:
            raise ValueError(f"gate output width must be >= 1, got {self.n_experts}")
        if self.conv_layers < 2:
            raise ValueError(f"gate needs >= 2 conv layers, got {self.conv_layers}")


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

class _LayeredNet:
    """Shared plumbing: named parameters, grads, Adam, cloning, casting."""

    def __init__(self):
        self.layers = []        # list of (prefix, layer)
        self.adam = {}          # tensor name -> AdamState
        self.forward_count = 0

    def _stack(self, layers):
        counts = {}
        for layer in layers:
            k = counts.get(layer.kind, 0)
            counts[layer.kind] = k + 1
            self.layers.append((f"{layer.kind}{k}", layer))

    def named_params(self) -> dict:
        out = {}
        for prefix, layer in self.layers:
            for pname, arr in layer.params().items():
                out[f"{prefix}.{pname}"] = arr
        return out

    def named_grads(self) -> dict:
        out = {}
        for prefix, layer in self.layers:
            for pname, arr in layer.grads().items():
                out[f"{prefix}.{pname}"] = arr
        return out

    def init_adam(self, lr: float = 1e-4) -> None:
        self.adam = {name: AdamState.for_param(p, lr=lr)
                     for name, p in self.named_params().items()}

    def apply_adam(self) -> None:
        grads = self.named_grads()
        for name, p in self.named_params().items():
            adam_step(p, grads[name], self.adam[name], name=name)

    def zero_grads(self) -> None:
        for _, layer in self.layers:
            for attr in ("grad_weight", "grad_bias", "grad_slope"):
                if hasattr(layer, attr):
                    setattr(layer, attr, None)

    def load_params(self, values: dict) -> None:
        for name, p in self.named_params().items():
            src = values[name]
            if src.shape != p.shape:
                raise CheckpointShapeError(
                    f"tensor '{name}': expected shape {tuple(p.shape)}, "
                    f"got {tuple(src.shape)}")
            np.copyto(p, src)

    def activation_signs(self) -> np.ndarray:
        """Sign pattern of cached ReLU/PReLU inputs from the last forward."""
        parts = [layer._x > 0 for _, layer in self.layers
                 if layer.kind in ("relu", "prelu") and layer._x is not None]
        return np.concatenate([p.ravel() for p in parts]) if parts else \
            np.zeros(0, dtype=bool)

    def _copy_layers_into(self, out: "_LayeredNet", dtype) -> "_LayeredNet":
        cast = []
        for name, layer in self.layers:
            c = copy.copy(layer)
            for attr in ("weight", "bias", "slope"):
                if hasattr(layer, attr):
                    setattr(c, attr, getattr(layer, attr).astype(dtype))
            for attr in ("grad_weight", "grad_bias", "grad_slope"):
                if hasattr(c, attr):
                    setattr(c, attr, None)
            # never share caches or scratch buffers between networks
            if hasattr(c, "_x"):
                c._x = None
            if hasattr(c, "_shape"):
                c._shape = None
            if hasattr(c, "_scratch"):
                c._scratch = {}
                c._cols = None
            cast.append((name, c))
        out.layers = cast
        return out

    @property
    def dtype(self):
        return next(iter(self.named_params().values())).dtype


class ExpertNet(_LayeredNet):
    """Residual denoiser: output image = input - predicted noise map."""

    def __init__(self, config: ExpertConfig, rng: Rng | None = None,
                 dtype=np.float32):
        super().__init__()
        self.config = config
        y = config.channels
        layers = [Conv3x3(1, y, rng=rng, dtype=dtype), ReLU()]
        for _ in range(config.depth - 2):
            layers += [Conv3x3(y, y, rng=rng, dtype=dtype), ReLU()]
        layers.append(Conv3x3(y, 1, rng=rng, dtype=dtype))
        layers[0].skip_input_grad = True  # image gradients are never consumed
        self._stack(layers)

    def forward(self, x: np.ndarray, cache: bool = True) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != 1:
            raise nn.ShapeMismatchError(
                f"expert input must be [N, 1, H, W] grayscale, got {x.shape}")
        t = x.transpose(1, 0, 2, 3)  # free view: channel axis has size 1
        for _, layer in self.layers:
            t = layer.forward(t, cache=cache)
        self.forward_count += 1
        return x - t.transpose(1, 0, 2, 3)

    def denoise(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x, cache=False)

    def backward(self, grad_out: np.ndarray):
        # output = input - trunk(input): push -grad through the trunk, then
        # add the direct path (input gradient is None when the first layer
        # skips it; parameter gradients are always filled)
        g = -grad_out.transpose(1, 0, 2, 3)
        for _, layer in reversed(self.layers):
            g = layer.backward(g)
        return None if g is None else grad_out + g.transpose(1, 0, 2, 3)

    def clone(self) -> "ExpertNet":
        """Deep parameter copy with fresh (zeroed) optimizer state."""
        out = ExpertNet(self.config, rng=None, dtype=self.dtype)
        self._copy_layers_into(out, self.dtype)
        lr = next(iter(self.adam.values())).lr if self.adam else 1e-4
        out.init_adam(lr=lr)
        return out

    def to_double(self) -> "ExpertNet":
        return self._copy_layers_into(
            ExpertNet(self.config, rng=None, dtype=np.float64), np.float64)


class GateNet(_LayeredNet):
    """Routing CNN; emits one logit per expert for each input patch.

    No softmax is stored in the network: consumers apply it (cross-entropy
    during training, probability averaging at inference).
    """

    def __init__(self, config: GateConfig, rng: Rng | None = None,
                 dtype=np.float32):
        super().__init__()
        self.config = config
        c = config.channels
        layers = [Conv3x3(1, c, rng=rng, dtype=dtype), PReLU(c, dtype=dtype)]
        for _ in range(config.conv_layers - 2):
            layers += [Conv3x3(c, c, rng=rng, dtype=dtype), PReLU(c, dtype=dtype)]
        # final conv has no activation before pooling
        layers.append(Conv3x3(c, c, rng=rng, dtype=dtype))
        layers.append(GlobalAvgPool())
        # zero-initialized logit layer: routing starts exactly uniform, so no
        # expert is favored before the competition produces evidence
        layers.append(FullyConnected(c, config.n_experts, rng=None, dtype=dtype))
        layers[0].skip_input_grad = True
        self._stack(layers)

    def forward(self, patches: np.ndarray, cache: bool = True) -> np.ndarray:
        if patches.ndim != 4 or patches.shape[1] != 1:
            raise nn.ShapeMismatchError(
                f"gate input must be [N, 1, h, w], got {patches.shape}")
        t = patches.transpose(1, 0, 2, 3)
        for _, layer in self.layers:
            t = layer.forward(t, cache=cache)
        self.forward_count += 1
        return t

    def backward(self, grad_logits: np.ndarray):
        g = grad_logits
        for _, layer in reversed(self.layers):
            g = layer.backward(g)
        return None if g is None else g.transpose(1, 0, 2, 3)

    def to_double(self) -> "GateNet":
        return self._copy_layers_into(
            GateNet(self.config, rng=None, dtype=np.float64), np.float64)


def build_expert(config: ExpertConfig, rng: Rng, lr: float = 1e-4) -> ExpertNet:
    net = ExpertNet(config, rng=rng)
    net.init_adam(lr=lr)
    return net


def build_gate(config: GateConfig, rng: Rng, lr: float = 1e-4) -> GateNet:
    net = GateNet(config, rng=rng)
    net.init_adam(lr=lr)
    return net


def expert_denoise(expert: ExpertNet, image: np.ndarray) -> np.ndarray:
    """Residual denoising of an [N, 1, H, W] batch (no clamping here)."""
    return expert.denoise(image)


def gate_logits(gate: GateNet, patches: np.ndarray) -> np.ndarray:
    """One logit row per patch; any spatial size (GAP absorbs it)."""
    return gate.forward(patches, cache=False)


def count_params(net: _LayeredNet) -> int:
    """Total learnable scalars, including biases and PReLU slopes."""
    return sum(p.size for p in net.named_params().values())


# ---------------------------------------------------------------------------
# model bundle + checkpoint container
# ---------------------------------------------------------------------------

@dataclass
class ModelBundle:
    """Trained experts plus their routing gate (and training bookkeeping)."""
    experts: list
    gate: GateNet | None
    epoch: int = 0
    seed: int = 0
    phase: str = "compete"

    def __post_init__(self):
        # a pretrain-phase bundle legitimately holds one expert plus a gate
        # already sized for the eventual ensemble
        if (self.gate is not None and len(self.experts) > 1
                and self.gate.config.n_experts != len(self.experts)):
            raise ValueError(
                f"gate width {self.gate.config.n_experts} != "
                f"{len(self.experts)} experts")

    @property
    def n_experts(self) -> int:
        return len(self.experts)


def _bundle_tensors(bundle: ModelBundle):
    """Ordered (name, array, adam_state_or_None) triples for serialization."""
    groups = [(f"expert{j}", e) for j, e in enumerate(bundle.experts)]
    if bundle.gate is not None:
        groups.append(("gate", bundle.gate))
    for gname, net in groups:
        for pname, arr in net.named_params().items():
            yield f"{gname}/{pname}", arr, net.adam.get(pname)


def save_checkpoint(path, bundle: ModelBundle) -> None:
    manifest = []
    payloads = []
    steps = {}
    opt = None
    for name, arr, state in _bundle_tensors(bundle):
        entries = [(name, arr)]
        if state is not None:
            entries += [(f"{name}.adam_m", state.m), (f"{name}.adam_v", state.v)]
            steps[name] = state.step
            opt = opt or {"lr": state.lr, "beta1": state.beta1,
                          "beta2": state.beta2, "eps": state.eps}
        for tname, t in entries:
            manifest.append({"name": tname, "shape": list(t.shape),
                             "dtype": str(t.dtype)})
            payloads.append(np.ascontiguousarray(t, dtype=t.dtype))
    header = {
        "expert_config": {"depth": bundle.experts[0].config.depth,
                          "channels": bundle.experts[0].config.channels},
        "n_experts": len(bundle.experts),
        "gate_config": (None if bundle.gate is None else
                        {"n_experts": bundle.gate.config.n_experts,
                         "channels": bundle.gate.config.channels,
                         "conv_layers": bundle.gate.config.conv_layers}),
        "epoch": bundle.epoch,
        "phase": bundle.phase,
        "seed": bundle.seed,
        "optimizer": ({} if opt is None else
                      {**opt, "steps": steps}),
        "tensors": manifest,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for t in payloads:
            f.write(t.astype("<" + t.dtype.str[1:], copy=False).tobytes())


def load_checkpoint(path) -> ModelBundle:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(CHECKPOINT_MAGIC) + 8 or not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointVersionError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<II", raw, off)
    off += 8
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    if len(raw) < off + hlen:
        raise CheckpointTruncatedError(f"{path}: truncated header")
    header = json.loads(raw[off:off + hlen].decode("utf-8"))
    off += hlen

    ec = ExpertConfig(**header["expert_config"])
    experts = [ExpertNet(ec) for _ in range(header["n_experts"])]
    gate = None
    if header["gate_config"] is not None:
        gate = GateNet(GateConfig(**header["gate_config"]))
    bundle = ModelBundle(experts=experts, gate=gate, epoch=header["epoch"],
                         seed=header["seed"], phase=header["phase"])

    expected = {}
    opt = header.get("optimizer") or {}
    for name, arr, _ in _bundle_tensors(bundle):
        expected[name] = arr
        if opt:
            expected[f"{name}.adam_m"] = None  # filled after states exist
            expected[f"{name}.adam_v"] = None

    # rebuild optimizer states so moment arrays exist to load into
    if opt:
        for net in bundle.experts + ([bundle.gate] if bundle.gate else []):
            net.init_adam(lr=opt["lr"])
            for st in net.adam.values():
                st.beta1, st.beta2, st.eps = opt["beta1"], opt["beta2"], opt["eps"]
        for name, arr, state in _bundle_tensors(bundle):
            if state is not None:
                state.step = opt["steps"].get(name, 0)
                expected[f"{name}.adam_m"] = state.m
                expected[f"{name}.adam_v"] = state.v

    seen = set()
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        dtype = np.dtype(entry["dtype"])
        if name not in expected or expected[name] is None:
            raise CheckpointShapeError(f"{path}: unexpected tensor '{name}'")
        target = expected[name]
        if shape != target.shape:
            raise CheckpointShapeError(
                f"{path}: tensor '{name}': declared shape {shape} does not "
                f"match architecture shape {tuple(target.shape)}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if len(raw) < off + nbytes:
            raise CheckpointTruncatedError(
                f"{path}: truncated payload at tensor '{name}'")
        data = np.frombuffer(raw[off:off + nbytes],
                             dtype=dtype.newbyteorder("<")).reshape(shape)
        np.copyto(target, data.astype(dtype, copy=False))
        off += nbytes
        seen.add(name)
    missing = [n for n, v in expected.items() if n not in seen and v is not None]
    if missing:
        raise CheckpointShapeError(f"{path}: missing tensors {missing[:4]}")
    return bundle


# ---------------------------------------------------------------------------
# finite-difference reports for whole networks (verification entry points)
# ---------------------------------------------------------------------------

def expert_gradient_report(config: ExpertConfig = ExpertConfig(3, 4), *,
                           seed: int = 0, spatial: int = 8, batch: int = 2,
                           step: float = 1e-5, tolerance: float = 1e-4):
    """Finite-difference check of a whole expert through the MSE loss (64-bit)."""
    rng = Rng(derive_seed(seed, "gradcheck", "expert"))
    net = build_expert(config, rng).to_double()
    n = batch * spatial * spatial
    noisy = rng.normal(n).reshape(batch, 1, spatial, spatial) * 0.5
    clean = noisy + rng.normal(n).reshape(batch, 1, spatial, spatial) * 0.1

    def objective():
        out = net.forward(noisy, cache=True)
        loss, _ = mse_loss(out, clean)
        return loss

    out = net.forward(noisy, cache=True)
    _, g = mse_loss(out, clean)
    net.backward(g)
    return fd_check_params(objective, net.named_params(), net.named_grads(),
                           step=step, tolerance=tolerance,
                           activation_signs=net.activation_signs)


def gate_gradient_report(n_experts: int = 7, *, seed: int = 0, spatial: int = 6,
                         batch: int = 2, step: float = 1e-5,
                         tolerance: float = 1e-4):
    """Finite-difference check of the full gate through cross-entropy (64-bit).

    The logit layer ships zero-initialized, which would zero every upstream
    gradient; the check probes it at a generic random point instead.
    """
    rng = Rng(derive_seed(seed, "gradcheck", "gate"))
    net = build_gate(GateConfig(n_experts), rng).to_double()
    fc = net.layers[-1][1]
    fc.weight[...] = rng.normal(fc.weight.size).reshape(fc.weight.shape) * 0.5
    fc.bias[...] = rng.normal(fc.bias.size) * 0.1
    n = batch * spatial * spatial
    patches = rng.normal(n).reshape(batch, 1, spatial, spatial)
    labels = rng.integers(0, n_experts, batch)

    def objective():
        logits = net.forward(patches, cache=True)
        loss, _ = softmax_cross_entropy(logits, labels)
        return loss

    logits = net.forward(patches, cache=True)
    _, g = softmax_cross_entropy(logits, labels)
    net.backward(g)
    return fd_check_params(objective, net.named_params(), net.named_grads(),
                           step=step, tolerance=tolerance,
                           activation_signs=net.activation_signs)
