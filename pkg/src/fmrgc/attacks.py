"""White-box L-infinity attacks: FGSM, PGD and a margin (CW-style) PGD."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

from .models import predict
from .tensor import NonFinite, ShapeMismatch, Tensor, backward, cw_margin, kl_div_softmax, sign, softmax_cross_entropy


@dataclass
class AttackConfig:
    epsilon: float = 8 / 255
    step_size: Optional[float] = None  # None -> epsilon / 4
    steps: int = 10
    random_init: bool = True
    loss_kind: str = "ce"  # "ce" | "cw"
    clamp_range: Tuple[float, float] = (0.0, 1.0)
    kappa: float = 0.0

    def __post_init__(self):
        self.clamp_range = tuple(self.clamp_range)
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size is not None and self.step_size < 0:
            raise ValueError("step_size must be >= 0")
        if self.loss_kind not in ("ce", "cw"):
            raise ValueError(f"loss_kind must be 'ce' or 'cw', got {self.loss_kind!r}")
        lo, hi = self.clamp_range
        if lo > hi:
            raise ValueError("empty clamp range")

    @property
    def alpha(self) -> float:
        return self.epsilon / 4 if self.step_size is None else self.step_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["clamp_range"] = list(self.clamp_range)
        return d


@dataclass
class AdversarialBatch:
    x: np.ndarray
    x_adv: np.ndarray
    y: np.ndarray
    success: Optional[np.ndarray] = None  # True where the attack flipped the prediction

    def linf(self) -> np.ndarray:
        return np.abs(self.x_adv - self.x).reshape(len(self.x), -1).max(axis=1)


def project_linf(x_adv, x, epsilon: float, clamp_range=(0.0, 1.0)) -> np.ndarray:
    """Clip into the epsilon box around x, then into the valid pixel range."""
    x_adv, x = np.asarray(x_adv, dtype=np.float64), np.asarray(x, dtype=np.float64)
    if x_adv.shape != x.shape:
        raise ShapeMismatch(f"project_linf: {x_adv.shape} vs {x.shape}")
    out = np.clip(x_adv, x - epsilon, x + epsilon)
    # x + eps can round so that (x + eps) - x > eps; step those entries back by an ulp
    for _ in range(4):
        over = np.abs(out - x) > epsilon
        if not over.any():
            break
        out[over] = np.nextafter(out[over], x[over])
    return np.clip(out, clamp_range[0], clamp_range[1])


LossFn = Callable[[Tensor], Tensor]


def input_gradient(model, x: np.ndarray, loss_fn: LossFn) -> np.ndarray:
    """d loss_fn(model(x)) / dx with parameters frozen."""
    with model.frozen():
        xt = Tensor(x, requires_grad=True)
        backward(loss_fn(model(xt)))
    g = np.zeros_like(xt.data) if xt.grad is None else xt.grad
    if not np.all(np.isfinite(g)):
        bad = np.argwhere(~np.isfinite(g))[0]
        raise NonFinite(f"non-finite input gradient at index {tuple(bad)}")
    return g


def _ce(y):
    return lambda z: softmax_cross_entropy(z, y)


def _loss_for(cfg: AttackConfig, y) -> LossFn:
    if cfg.loss_kind == "cw":
        return lambda z: cw_margin(z, y, cfg.kappa)
    return _ce(y)


def fgsm(model, x, y, epsilon: float, clamp_range=(0.0, 1.0)) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    g = input_gradient(model, x, _ce(y))
    return project_linf(x + epsilon * sign(g), x, epsilon, clamp_range)


def uniform_start(x: np.ndarray, epsilon: float, seed: int, indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """x + U(-eps, eps) noise, one RNG stream per (seed, sample index)."""
    idx = np.arange(len(x)) if indices is None else np.asarray(indices)
    noise = np.stack([np.random.default_rng([seed, int(i)]).uniform(-epsilon, epsilon, x.shape[1:]) for i in idx])
    return x + noise


def pgd_loop(model, x, cfg: AttackConfig, loss_fn: LossFn, seed: int = 0, indices=None) -> np.ndarray:
    """Final iterate of signed-gradient ascent on ``loss_fn`` inside the epsilon ball."""
    x = np.asarray(x, dtype=np.float64)
    if cfg.random_init:
        x_adv = project_linf(uniform_start(x, cfg.epsilon, seed, indices), x, cfg.epsilon, cfg.clamp_range)
    else:
        x_adv = x.copy()
    for _ in range(cfg.steps):
        g = input_gradient(model, x_adv, loss_fn)
        x_adv = project_linf(x_adv + cfg.alpha * sign(g), x, cfg.epsilon, cfg.clamp_range)
    return x_adv


def _batch(model, x, x_adv, y, evaluate: bool) -> AdversarialBatch:
    success = None
    if evaluate:
        success = predict(model, x_adv).argmax(axis=1) != np.asarray(y)
    return AdversarialBatch(np.asarray(x, dtype=np.float64), x_adv, np.asarray(y), success)


def pgd(model, x, y, cfg: AttackConfig, seed: int = 0, indices=None, evaluate: bool = True) -> AdversarialBatch:
    x_adv = pgd_loop(model, x, cfg, _loss_for(cfg, y), seed, indices)
    return _batch(model, x, x_adv, y, evaluate)


def cw_margin_attack(model, x, y, cfg: AttackConfig, seed: int = 0, indices=None, evaluate: bool = True) -> AdversarialBatch:
    cfg = AttackConfig(**{**cfg.to_dict(), "loss_kind": "cw"})
    return pgd(model, x, y, cfg, seed, indices, evaluate)


def kl_pgd(model, x, cfg: AttackConfig, seed: int = 0, indices=None) -> np.ndarray:
    """Inner maximisation of KL(model(x) || model(x_adv)) used by TRADES."""
    clean = Tensor(predict(model, x))
    return pgd_loop(model, x, cfg, lambda z: kl_div_softmax(clean, z), seed, indices)


def run_attack(model, x, y, name: str, cfg: AttackConfig, seed: int = 0, indices=None) -> np.ndarray:
    """Dispatch by report-row name: 'fgsm', 'pgd' or 'cw'."""
    if name == "fgsm":
        return fgsm(model, x, y, cfg.epsilon, cfg.clamp_range)
    if name == "cw":
        return cw_margin_attack(model, x, y, cfg, seed, indices, evaluate=False).x_adv
    if name == "pgd":
        return pgd(model, x, y, cfg, seed, indices, evaluate=False).x_adv
    raise ValueError(f"unknown attack {name!r}")


def transfer_attack(source, target, x, y, cfg: AttackConfig, seed: int = 0) -> float:
    """Accuracy (%) of ``target`` on examples crafted against ``source`` only."""
    if tuple(source.input_shape) != tuple(target.input_shape):
        raise ShapeMismatch(f"source {source.input_shape} vs target {target.input_shape}")
    x_adv = pgd(source, x, y, cfg, seed, evaluate=False).x_adv
    return 100.0 * float(np.mean(predict(target, x_adv).argmax(axis=1) == np.asarray(y)))


def save_adversarial(path: Union[str, Path], x_adv: np.ndarray, *, epsilon: float, attack: str, seed: int, labels=None):
    """Raw little-endian float32 blob plus a JSON sidecar next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = path.with_suffix(".bin")
    blob.write_bytes(np.ascontiguousarray(x_adv, dtype="<f4").tobytes())
    meta = {"shape": list(x_adv.shape), "epsilon": float(epsilon), "attack": attack, "seed": int(seed)}
    if labels is not None:
        meta["labels"] = [int(v) for v in labels]
    path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")
    return blob


def load_adversarial(path: Union[str, Path]):
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    raw = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f4")
    if raw.size != int(np.prod(meta["shape"])):
        raise ValueError(f"blob holds {raw.size} values, sidecar says {meta['shape']}")
    return raw.reshape(meta["shape"]).astype(np.float64), meta
