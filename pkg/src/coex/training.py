"""Two-phase training: supervised pretraining, then winner-take-all competition.

Phase 1 trains a single expert on the whole noise mixture.  At the phase
boundary its parameters are copied to all experts (optimizer moments reset,
including the original's, so every competitor starts symmetric).  Phase 2
runs the competition: each iteration samples one clean image, synthesizes a
fresh noisy version, crops an aligned patch mini-batch from that single
image pair (all patches share one unknown noise domain), computes every
expert's loss on the batch, and updates only the argmin expert, ties going
to the smallest index.  The gate trains in the same loop on the winner index
as a classification target.

Determinism: all randomness of epoch e flows from a stream derived from
(seed, "epoch", e), so a run resumed from an epoch-boundary checkpoint
reproduces the uninterrupted trajectory exactly.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .networks import (ExpertConfig, ExpertNet, GateConfig, GateNet,
                       ModelBundle, build_expert, build_gate)
from .nn import mse_loss, softmax_cross_entropy
from .noise import DEFAULT_NOISE, NoiseSampler, apply_noise
from .rng import Rng, derive_seed

PHASE_PRETRAIN = "pretrain"
PHASE_COMPETE = "compete"


class TooSmallImageError(ValueError):
    pass


@dataclass
class PatchBatch:
    """Aligned noisy/clean patches cropped from ONE image pair."""
    noisy: np.ndarray            # [N_p, 1, s, s] float32
    clean: np.ndarray
    image_id: int = -1
    domain: str = ""             # analysis-only label, never shown to steps


def sample_patch_batch(pair, n_patches: int, size: int, rng: Rng,
                       image_id: int = -1, domain: str = "") -> PatchBatch:
    """Crop n_patches aligned patches at independent uniform positions."""
    noisy_img, clean_img = pair
    h, w = clean_img.shape
    if h < size or w < size:
        raise TooSmallImageError(
            f"image {h}x{w} smaller than patch size {size}")
    ys = rng.integers(0, h - size + 1, n_patches)
    xs = rng.integers(0, w - size + 1, n_patches)
    noisy = np.empty((n_patches, 1, size, size), dtype=np.float32)
    clean = np.empty((n_patches, 1, size, size), dtype=np.float32)
    for k in range(n_patches):
        noisy[k, 0] = noisy_img[ys[k]:ys[k] + size, xs[k]:xs[k] + size]
        clean[k, 0] = clean_img[ys[k]:ys[k] + size, xs[k]:xs[k] + size]
    return PatchBatch(noisy=noisy, clean=clean, image_id=image_id, domain=domain)


def _forward_loss(expert: ExpertNet, batch: PatchBatch):
    out = expert.forward(batch.noisy, cache=True)
    loss, _ = mse_loss(out, batch.clean)
    return loss, out


def _loss_vector(experts, batch: PatchBatch, pool=None):
    cfg = experts[0].config
    if any(e.config != cfg for e in experts):
        raise ValueError("experts must share one architecture")
    if pool is not None:
        pairs = list(pool.map(lambda e: _forward_loss(e, batch), experts))
    else:
        pairs = [_forward_loss(e, batch) for e in experts]
    losses = np.asarray([p[0] for p in pairs], dtype=np.float64)
    return losses, [p[1] for p in pairs]


def compute_loss_vector(experts, batch: PatchBatch, pool=None) -> np.ndarray:
    """Per-expert MSE of the reconstructed batch; forward-only."""
    return _loss_vector(experts, batch, pool=pool)[0]


def winner(losses) -> int:
    """Index of the minimum loss; ties break to the smallest index."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise ValueError("empty loss vector")
    if not np.isfinite(losses).all():
        raise FloatingPointError(f"non-finite loss vector {losses}")
    return int(np.argmin(losses))


def pretrain_step(expert: ExpertNet, batch: PatchBatch) -> float:
    """One supervised Adam update on a single expert."""
    out = expert.forward(batch.noisy, cache=True)
    loss, grad = mse_loss(out, batch.clean)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite pretraining loss {loss}")
    expert.backward(grad)
    expert.apply_adam()
    return loss


def clone_experts(e1: ExpertNet, n_experts: int) -> list:
    """Expert list seeded from e1's parameters, bit-identical across members.

    All returned experts (index 0 keeps e1's own tensors) get fresh zeroed
    optimizer moments: carrying e1's moments into every copy would give all
    clones identical update directions and delay differentiation.
    """
    if n_experts < 1:
        raise ValueError(f"need at least one expert, got {n_experts}")
    lr = next(iter(e1.adam.values())).lr if e1.adam else 1e-4
    experts = [e1] + [e1.clone() for _ in range(n_experts - 1)]
    e1.init_adam(lr=lr)
    return experts


@dataclass
class StepResult:
    winner: int
    loss: float
    gate_loss: float | None
    losses: np.ndarray


def _gate_step(gate: GateNet, batch: PatchBatch, label: int) -> float:
    logits = gate.forward(batch.noisy, cache=True)
    labels = np.full(batch.noisy.shape[0], label, dtype=np.int64)
    loss, grad = softmax_cross_entropy(logits, labels)
    gate.backward(grad)
    gate.apply_adam()
    return loss


def competition_step(experts, gate, batch: PatchBatch, pool=None) -> StepResult:
    """One winner-take-all iteration: update argmin expert, teach the gate.

    Exactly one expert's parameters change; every patch of the batch labels
    the gate with the winner index.
    """
    losses, outputs = _loss_vector(experts, batch, pool=pool)
    idx = winner(losses)
    # the loss-vector forward already cached the winner's activations
    _, grad = mse_loss(outputs[idx], batch.clean)
    experts[idx].backward(grad)
    experts[idx].apply_adam()
    gate_loss = None if gate is None else _gate_step(gate, batch, idx)
    return StepResult(winner=idx, loss=float(losses[idx]), gate_loss=gate_loss,
                      losses=losses)


# ---------------------------------------------------------------------------
# training log
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    phase: str
    wins: np.ndarray                     # [n_experts] int64
    loss_sums: np.ndarray                # winning-loss sum per expert
    domain_wins: dict = field(default_factory=dict)  # "src:level" -> [n] wins
    eval_psnr: float | None = None

    def mean_winning_loss(self, j: int):
        return self.loss_sums[j] / self.wins[j] if self.wins[j] else None


@dataclass
class TrainLog:
    """Per-epoch win counts, winning losses, and optional evaluation PSNR."""
    n_experts: int
    epochs: list = field(default_factory=list)

    def effective_clusters(self) -> int:
        """Experts with nonzero wins in the final epoch."""
        if not self.epochs:
            return 0
        return int(np.count_nonzero(self.epochs[-1].wins))

    def csv_header(self) -> str:
        return "epoch,expert_id,wins,mean_winning_loss,eval_psnr"

    def csv_rows(self, record: EpochRecord):
        for j in range(self.n_experts):
            mwl = record.mean_winning_loss(j)
            psnr = record.eval_psnr
            yield (f"{record.epoch},{j},{int(record.wins[j])},"
                   f"{'' if mwl is None else repr(float(mwl))},"
                   f"{'' if psnr is None else repr(float(psnr))}")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="\n") as f:
            f.write(self.csv_header() + "\n")
            for rec in self.epochs:
                for row in self.csv_rows(rec):
                    f.write(row + "\n")


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    n_experts: int = 3
    expert: str = "d3c8"
    patch_size: int = 32
    patches_per_batch: int = 8
    pretrain_epochs: int = 30
    compete_epochs: int = 60
    iters_per_epoch: int = 200
    lr: float = 1e-4
    seed: int = 0
    noise: str = DEFAULT_NOISE
    train_gate: bool = True
    threads: int = 1

    def __post_init__(self):
        if self.n_experts < 1:
            raise ValueError("n_experts must be >= 1")
        if self.pretrain_epochs < 1:
            raise ValueError("pretrain_epochs must be >= 1")
        ExpertConfig.from_name(self.expert)  # validate eagerly
        NoiseSampler(self.noise)

    @property
    def expert_config(self) -> ExpertConfig:
        return ExpertConfig.from_name(self.expert)

    @property
    def total_epochs(self) -> int:
        return self.pretrain_epochs + self.compete_epochs


class CompetitionTrainer:
    """Drives the two training phases over a clean-image dataset."""

    def __init__(self, config: TrainConfig, images):
        if not images:
            raise ValueError("empty dataset")
        for i, img in enumerate(images):
            if min(img.shape) < config.patch_size:
                raise TooSmallImageError(
                    f"dataset image {i} is {img.shape[0]}x{img.shape[1]}, "
                    f"smaller than patch size {config.patch_size}")
        self.config = config
        self.images = images
        self.sampler = NoiseSampler(config.noise)
        e1 = build_expert(config.expert_config,
                          Rng(derive_seed(config.seed, "init", "expert")),
                          lr=config.lr)
        self.experts = [e1]
        self.gate = None
        if config.train_gate:
            self.gate = build_gate(GateConfig(config.n_experts),
                                   Rng(derive_seed(config.seed, "init", "gate")),
                                   lr=config.lr)
        self.log = TrainLog(n_experts=config.n_experts)
        self.epochs_done = 0
        self._cloned = False
        self._pool = (ThreadPoolExecutor(config.threads)
                      if config.threads > 1 else None)

    # -- state ---------------------------------------------------------------

    @property
    def phase(self) -> str:
        return (PHASE_PRETRAIN if self.epochs_done < self.config.pretrain_epochs
                else PHASE_COMPETE)

    def bundle(self) -> ModelBundle:
        self._ensure_phase()  # a boundary checkpoint already holds the clones
        return ModelBundle(experts=list(self.experts), gate=self.gate,
                           epoch=self.epochs_done, seed=self.config.seed,
                           phase=self.phase)

    def adopt(self, bundle: ModelBundle) -> None:
        """Resume from an epoch-boundary checkpoint."""
        if bundle.phase == PHASE_COMPETE or len(bundle.experts) > 1:
            self._cloned = True
        self.experts = list(bundle.experts)
        self.gate = bundle.gate
        self.epochs_done = bundle.epoch

    # -- execution -----------------------------------------------------------

    def _ensure_phase(self) -> None:
        if (self.epochs_done >= self.config.pretrain_epochs
                and not self._cloned):
            self.experts = clone_experts(self.experts[0], self.config.n_experts)
            self._cloned = True

    def run_epoch(self, eval_hook=None, iter_hook=None) -> EpochRecord:
        cfg = self.config
        e = self.epochs_done
        if e >= cfg.total_epochs:
            raise RuntimeError(f"training already finished ({e} epochs)")
        self._ensure_phase()
        pretraining = e < cfg.pretrain_epochs
        rng = Rng(derive_seed(cfg.seed, "epoch", e))
        wins = np.zeros(cfg.n_experts, dtype=np.int64)
        loss_sums = np.zeros(cfg.n_experts, dtype=np.float64)
        domain_wins = {}
        for it in range(cfg.iters_per_epoch):
            idx = rng.integers(0, len(self.images))
            spec = self.sampler.sample(rng)
            clean = self.images[idx]
            noisy = apply_noise(clean, spec, rng)
            domain = f"{spec.source}:{int(round(spec.level))}"
            batch = sample_patch_batch((noisy, clean), cfg.patches_per_batch,
                                       cfg.patch_size, rng, image_id=idx,
                                       domain=domain)
            if pretraining:
                w, loss = 0, pretrain_step(self.experts[0], batch)
            else:
                res = competition_step(self.experts, self.gate, batch,
                                       pool=self._pool)
                w, loss = res.winner, res.loss
            wins[w] += 1
            loss_sums[w] += loss
            if domain not in domain_wins:
                domain_wins[domain] = np.zeros(cfg.n_experts, dtype=np.int64)
            domain_wins[domain][w] += 1
            if iter_hook is not None:
                iter_hook(self, it, w, batch)
        record = EpochRecord(epoch=e, phase=self.phase, wins=wins,
                             loss_sums=loss_sums, domain_wins=domain_wins)
        self.epochs_done += 1
        if eval_hook is not None:
            record.eval_psnr = eval_hook(self)
        self.log.epochs.append(record)
        return record

    def run(self, *, eval_hook=None, epoch_hook=None, iter_hook=None,
            stop_after: int | None = None) -> None:
        limit = self.config.total_epochs if stop_after is None else stop_after
        while self.epochs_done < min(limit, self.config.total_epochs):
            record = self.run_epoch(eval_hook=eval_hook, iter_hook=iter_hook)
            if epoch_hook is not None:
                epoch_hook(self, record)


@dataclass
class TrainResult:
    bundle: ModelBundle
    log: TrainLog


def train(config: TrainConfig, images, *, eval_hook=None,
          epoch_hook=None) -> TrainResult:
    """Run both phases to completion and return the trained bundle and log."""
    trainer = CompetitionTrainer(config, images)
    trainer.run(eval_hook=eval_hook, epoch_hook=epoch_hook)
    return TrainResult(bundle=trainer.bundle(), log=trainer.log)


def param_digest(net) -> str:
    """sha256 over a network's named parameter tensors (order-stable)."""
    h = hashlib.sha256()
    for name, p in net.named_params().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p).tobytes())
    return h.hexdigest()
