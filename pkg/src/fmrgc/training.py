"""Standard, PGD-AT, TRADES and AWP training with a plain momentum SGD.

Backbone weights and FMR-GC matrices are optimised together by one optimizer.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple, Union

import numpy as np

from .attacks import AttackConfig, kl_pgd, pgd
from .models import BackboneConfig, Model, build_backbone
from .tensor import NonFinite, Tensor, backward, kl_div_softmax, softmax_cross_entropy

log = logging.getLogger(__name__)

OBJECTIVES = ("standard", "pgd_at", "trades", "awp")
MAGIC = b"FMRGC1\0"


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 0.1
    milestones: Tuple[int, ...] = (90, 95)
    lr_gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    objective: str = "pgd_at"
    beta: float = 6.0  # TRADES
    gamma_scale: float = 5e-3  # AWP
    attack: AttackConfig = field(default_factory=AttackConfig)
    seed: int = 0

    def __post_init__(self):
        self.milestones = tuple(self.milestones)
        if isinstance(self.attack, dict):
            self.attack = AttackConfig(**self.attack)
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if any(m >= self.epochs for m in self.milestones):
            raise ValueError(f"milestones {self.milestones} must be < epochs {self.epochs}")
        if self.beta < 0 or self.gamma_scale < 0:
            raise ValueError("beta and gamma_scale must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("epochs and batch_size must be positive")

    def lr_at(self, epoch: int) -> float:
        """Step schedule; decimal arithmetic so 0.1 -> 0.01 -> 0.001 land exactly."""
        drops = sum(epoch >= m for m in self.milestones)
        return float(Decimal(repr(self.lr)) * Decimal(repr(self.lr_gamma)) ** drops)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        d["attack"] = self.attack.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def config_hash(*parts: dict) -> str:
    blob = json.dumps(parts, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


class SGD:
    """Heavy-ball SGD with coupled weight decay (g + wd * p)."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 5e-4):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, Tensor], lr: float):
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            buf = self.buffers.get(name)
            buf = g if buf is None else self.momentum * buf + g
            self.buffers[name] = buf
            p.data = p.data - lr * buf


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


# ---------------------------------------------------------------- objectives


def _attack_seed(seed: int, epoch: int) -> int:
    return seed * 100_003 + epoch


def trades_loss(model, x, y, beta: float, inner_cfg: AttackConfig, seed: int = 0, indices=None, x_adv=None) -> Tensor:
    """CE(f(x), y) + beta * KL(softmax f(x) || softmax f(x_adv)).

    ``x_adv`` defaults to a PGD maximiser of the KL term.
    """
    if beta < 0:
        raise ValueError("beta must be >= 0")
    if x_adv is None:
        x_adv = kl_pgd(model, x, inner_cfg, seed, indices)
    clean = model(Tensor(x))
    adv = model(Tensor(x_adv))
    return softmax_cross_entropy(clean, y) + beta * kl_div_softmax(clean, adv)


def _descend(model: Model, loss_fn: Callable[[], Tensor], opt: SGD, lr: float) -> float:
    model.zero_grad()
    loss = loss_fn()
    backward(loss)
    opt.step(model.params, lr)
    return loss.item()


def standard_step(model, x, y, cfg: TrainConfig, opt: SGD, lr: float, epoch: int, indices) -> float:
    return _descend(model, lambda: softmax_cross_entropy(model(Tensor(x)), y), opt, lr)


def pgd_at_step(model, x, y, cfg: TrainConfig, opt: SGD, lr: float, epoch: int, indices) -> float:
    x_adv = pgd(model, x, y, cfg.attack, _attack_seed(cfg.seed, epoch), indices, evaluate=False).x_adv
    return _descend(model, lambda: softmax_cross_entropy(model(Tensor(x_adv)), y), opt, lr)


def trades_step(model, x, y, cfg: TrainConfig, opt: SGD, lr: float, epoch: int, indices) -> float:
    seed = _attack_seed(cfg.seed, epoch)
    return _descend(model, lambda: trades_loss(model, x, y, cfg.beta, cfg.attack, seed, indices), opt, lr)


def awp_weight_perturbation(model: Model, x_adv, y, gamma_scale: float) -> Dict[str, np.ndarray]:
    """One ascent step in weight space, layerwise relative to each weight's norm.

    gamma = gamma_scale * ||theta|| * g / ||g|| for every weight with ndim > 1.
    """
    model.zero_grad()
    backward(softmax_cross_entropy(model(Tensor(x_adv)), y))
    gammas = {}
    for name, p in model.params.items():
        if p.ndim < 2:
            continue
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        gn = np.linalg.norm(g)
        if gn == 0.0 or gamma_scale == 0.0:
            gammas[name] = np.zeros_like(p.data)
        else:
            gammas[name] = gamma_scale * np.linalg.norm(p.data) * g / gn
    model.zero_grad()
    return gammas


def awp_perturb_and_step(
    model: Model, x, y, gamma_scale: float, inner_cfg: AttackConfig, opt: SGD, lr: float, seed: int = 0, indices=None
) -> float:
    """Craft x_adv, inject the worst-case weight offset, take the descent gradient
    there, restore the clean weights and apply the update to them."""
    if gamma_scale < 0:
        raise ValueError("gamma_scale must be >= 0")
    x_adv = pgd(model, x, y, inner_cfg, seed, indices, evaluate=False).x_adv
    gammas = awp_weight_perturbation(model, x_adv, y, gamma_scale)
    clean = {n: model.params[n].data for n in gammas}
    for n, gamma in gammas.items():
        model.params[n].data = clean[n] + gamma
    model.zero_grad()
    loss = softmax_cross_entropy(model(Tensor(x_adv)), y)
    backward(loss)
    for n in gammas:
        model.params[n].data = clean[n]
    opt.step(model.params, lr)
    return loss.item()


def awp_step(model, x, y, cfg: TrainConfig, opt: SGD, lr: float, epoch: int, indices) -> float:
    return awp_perturb_and_step(model, x, y, cfg.gamma_scale, cfg.attack, opt, lr, _attack_seed(cfg.seed, epoch), indices)


STEPS = {"standard": standard_step, "pgd_at": pgd_at_step, "trades": trades_step, "awp": awp_step}


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    backbone: BackboneConfig
    train: TrainConfig
    epoch: int
    rng_state: dict
    optimizer: Dict[str, np.ndarray] = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    model_seed: int = 0

    @property
    def config_hash(self) -> str:
        return config_hash(self.backbone.to_dict(), self.train.to_dict())

    def model(self) -> Model:
        m = build_backbone(self.backbone, self.model_seed)
        m.load_state_dict(self.params)
        return m


def _blob_entries(prefix: str, arrays: Dict[str, np.ndarray], offset: int):
    entries, blobs = [], []
    for name in sorted(arrays):
        raw = np.ascontiguousarray(arrays[name], dtype="<f8").tobytes()
        entries.append(
            {
                "name": prefix + name,
                "shape": list(arrays[name].shape),
                "offset": offset,
                "nbytes": len(raw),
                "sha256": hashlib.sha256(raw).hexdigest(),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    return entries, blobs, offset


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
    """MAGIC | u32 manifest length | manifest JSON | float64 LE blobs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    p_entries, p_blobs, off = _blob_entries("", ckpt.params, 0)
    o_entries, o_blobs, _ = _blob_entries("opt.", ckpt.optimizer, off)
    manifest = {
        "format": 1,
        "tensors": p_entries + o_entries,
        "backbone": ckpt.backbone.to_dict(),
        "train": ckpt.train.to_dict(),
        "epoch": ckpt.epoch,
        "model_seed": ckpt.model_seed,
        "rng_state": ckpt.rng_state,
        "metrics": ckpt.metrics,
        "config_hash": ckpt.config_hash,
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for b in p_blobs + o_blobs:
            fh.write(b)
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path}: not an FMRGC1 checkpoint")
    pos = len(MAGIC)
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    manifest = json.loads(data[pos : pos + n])
    body = memoryview(data)[pos + n :]
    params, opt = {}, {}
    for e in manifest["tensors"]:
        raw = bytes(body[e["offset"] : e["offset"] + e["nbytes"]])
        if hashlib.sha256(raw).hexdigest() != e["sha256"]:
            raise ValueError(f"{path}: checksum mismatch for {e['name']}")
        arr = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(np.float64)
        if e["name"].startswith("opt."):
            opt[e["name"][4:]] = arr
        else:
            params[e["name"]] = arr
    return Checkpoint(
        params=params,
        backbone=BackboneConfig.from_dict(manifest["backbone"]),
        train=TrainConfig.from_dict(manifest["train"]),
        epoch=manifest["epoch"],
        rng_state=manifest["rng_state"],
        optimizer=opt,
        metrics=manifest["metrics"],
        model_seed=manifest["model_seed"],
    )


# ---------------------------------------------------------------- loops


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, 7])


def fit(
    model: Model,
    x: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    start: Optional[Checkpoint] = None,
    on_epoch: Optional[Callable[[int, dict], None]] = None,
) -> Checkpoint:
    """Train ``model`` in place with ``cfg.objective`` and return the final checkpoint."""
    opt = SGD(cfg.momentum, cfg.weight_decay)
    first = 0
    if start is not None:
        model.load_state_dict(start.params)
        opt.buffers = {k: v.copy() for k, v in start.optimizer.items()}
        first = start.epoch
    step = STEPS[cfg.objective]
    n = len(x)

    def snapshot(epoch, metrics):
        return Checkpoint(
            params=model.state_dict(),
            backbone=model.cfg,
            train=cfg,
            epoch=epoch,
            rng_state=_epoch_rng(cfg.seed, epoch).bit_generator.state,
            optimizer={k: v.copy() for k, v in opt.buffers.items()},
            metrics=metrics,
            model_seed=model.seed,
        )

    last_good = snapshot(first, {})
    history = []
    for epoch in range(first, cfg.epochs):
        lr = cfg.lr_at(epoch)
        perm = _epoch_rng(cfg.seed, epoch).permutation(n)
        losses = []
        try:
            for i in range(0, n, cfg.batch_size):
                idx = perm[i : i + cfg.batch_size]
                losses.append(step(model, x[idx], y[idx], cfg, opt, lr, epoch, idx) * len(idx))
        except NonFinite as exc:
            raise TrainingDiverged(f"epoch {epoch}: {exc}", last_good) from exc
        metrics = {"epoch": epoch, "lr": lr, "train_loss": float(sum(losses) / n)}
        history.append(metrics)
        log.info("epoch %d lr %.4g loss %.4f", epoch, lr, metrics["train_loss"])
        if on_epoch is not None:
            on_epoch(epoch, metrics)
        last_good = snapshot(epoch + 1, {"history": list(history)})
    return last_good


def train_standard(model, x, y, cfg: TrainConfig, **kw) -> Checkpoint:
    return fit(model, x, y, TrainConfig(**{**cfg.to_dict(), "objective": "standard"}), **kw)


def train_pgd_at(model, x, y, cfg: TrainConfig, **kw) -> Checkpoint:
    return fit(model, x, y, TrainConfig(**{**cfg.to_dict(), "objective": "pgd_at"}), **kw)


def train_trades(model, x, y, cfg: TrainConfig, **kw) -> Checkpoint:
    return fit(model, x, y, TrainConfig(**{**cfg.to_dict(), "objective": "trades"}), **kw)


def train_awp(model, x, y, cfg: TrainConfig, **kw) -> Checkpoint:
    return fit(model, x, y, TrainConfig(**{**cfg.to_dict(), "objective": "awp"}), **kw)
