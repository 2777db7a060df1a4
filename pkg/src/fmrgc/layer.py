"""Feature-map reconstructed graph convolution (FMR-GC).

For an input of shape (N, C, H, W) each sample gets its own channel graph,
rebuilt on every call from the live features. The calibrated output is

    reshape( relu(P @ F @ theta) + F )

where F is the (C, H*W) graph signal and P the normalised propagation
matrix. P is treated as a constant: gradients reach the input only through F.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import graph
from .tensor import ShapeMismatch, Tensor, add, matmul, relu, reshape


@dataclass
class FmrGcConfig:
    """Graph-construction settings for one FMR-GC slot."""

    k: int = 5
    pooling: str = "gap"
    sigma_sq: Optional[float] = None  # None -> median heuristic
    undirected: bool = True
    theta: str = "learned"  # "learned" | "identity" (propagation-only, no parameters)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.sigma_sq is not None and self.sigma_sq <= 0:
            raise ValueError("fixed sigma_sq must be positive")
        if self.theta not in ("learned", "identity"):
            raise ValueError(f"theta must be 'learned' or 'identity', got {self.theta!r}")
        graph.PoolingMode.parse(self.pooling)

    @property
    def pooling_mode(self) -> graph.PoolingMode:
        return graph.PoolingMode.parse(self.pooling)


@dataclass
class FmrGcParams:
    theta2: Optional[Tensor]
    config: FmrGcConfig = field(default_factory=FmrGcConfig)

    @property
    def d(self) -> Optional[int]:
        return None if self.theta2 is None else self.theta2.shape[0]


@dataclass
class GraphSignal:
    F: np.ndarray  # (C, d)
    shape: tuple  # (C, H, W)

    def reshape(self) -> np.ndarray:
        return self.F.reshape(self.shape)


def flatten_to_signal(X) -> GraphSignal:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3:
        raise ShapeMismatch(f"expected (C, H, W), got {X.shape}")
    c, h, w = X.shape
    return GraphSignal(X.reshape(c, h * w), X.shape)


def init_theta(d: int, seed: int) -> np.ndarray:
    """Glorot-uniform d x d matrix, bound sqrt(6 / (d + d))."""
    if d < 1:
        raise ValueError("d must be >= 1")
    a = np.sqrt(6.0 / (d + d))
    return np.random.default_rng(seed).uniform(-a, a, size=(d, d))


def extra_param_count(d: int) -> int:
    if d < 1:
        raise ValueError("d must be >= 1")
    return d * d


def fmr_gc_forward(X, params: FmrGcParams) -> Tensor:
    """Calibrate a (C, H, W) or (N, C, H, W) feature tensor.

    Accepts a Tensor (gradients flow to X and theta2) or a plain array.
    """
    X = X if isinstance(X, Tensor) else Tensor(X)
    single = X.ndim == 3
    if single:
        X = reshape(X, (1,) + X.shape)
    if X.ndim != 4:
        raise ShapeMismatch(f"expected (N, C, H, W), got {X.shape}")
    n, c, h, w = X.shape
    d = h * w
    cfg = params.config
    if cfg.theta == "learned" and (params.theta2 is None or params.theta2.shape != (d, d)):
        got = None if params.theta2 is None else params.theta2.shape
        raise ShapeMismatch(f"theta2 {got} does not match spatial size {h}x{w} (d={d})")

    P = graph.build_propagation(X.data, cfg.k, cfg.pooling, cfg.sigma_sq, cfg.undirected)
    F = reshape(X, (n, c, d))
    mixed = matmul(Tensor(P), F)
    if cfg.theta == "learned":
        mixed = matmul(mixed, params.theta2)
    out = reshape(add(relu(mixed), F), (n, c, h, w))
    return reshape(out, (c, h, w)) if single else out


def mac_count(c: int, d: int, m: int, theta: str = "learned") -> int:
    """Multiply-accumulates of one forward pass for a single sample.

    similarity (C^2 * m) + propagation (C^2 * d) + theta product (C * d^2).
    """
    macs = c * c * m + c * c * d
    if theta == "learned":
        macs += c * d * d
    return macs
