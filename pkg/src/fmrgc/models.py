"""Desk-scale CNN backbone with optional FMR-GC slots after each stage."""

from __future__ import annotations

import hashlib
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from .layer import FmrGcConfig, FmrGcParams, extra_param_count, fmr_gc_forward, init_theta, mac_count
from .tensor import ShapeMismatch, Tensor, conv2d, conv_output_size, global_avg_pool, matmul, relu

SLOTS = ("conv1", "conv2", "conv3")


class BadConfig(ValueError):
    pass


@dataclass
class BackboneConfig:
    input_shape: Tuple[int, int, int] = (3, 32, 32)
    widths: Tuple[int, ...] = (16, 32, 64)
    num_classes: int = 10
    slots: Dict[str, FmrGcConfig] = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.widths = tuple(self.widths)
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise BadConfig(f"bad input shape {self.input_shape}")
        if len(self.widths) != len(SLOTS) or min(self.widths) < 1:
            raise BadConfig(f"need {len(SLOTS)} positive stage widths, got {self.widths}")
        if self.num_classes < 2:
            raise BadConfig("need at least two classes")
        slots = {}
        for name, cfg in (self.slots or {}).items():
            if name not in SLOTS:
                raise BadConfig(f"unknown slot {name!r}; choose from {SLOTS}")
            if cfg is None:
                continue
            slots[name] = cfg if isinstance(cfg, FmrGcConfig) else FmrGcConfig(**cfg)
        self.slots = slots
        for shape in self.stage_shapes():
            if shape[1] < 1 or shape[2] < 1:
                raise BadConfig(f"input {self.input_shape} too small for {len(SLOTS)} stages")

    def stage_shapes(self) -> List[Tuple[int, int, int]]:
        """Output (C, H, W) of each convolution stage."""
        _, h, w = self.input_shape
        shapes = []
        for i, c in enumerate(self.widths):
            s = 1 if i == 0 else 2
            h, w = conv_output_size(h, 3, s, 1), conv_output_size(w, 3, s, 1)
            shapes.append((c, h, w))
        return shapes

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "widths": list(self.widths),
            "num_classes": self.num_classes,
            "slots": {k: asdict(v) for k, v in sorted(self.slots.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**d)

    def with_slots(self, slots: Dict[str, FmrGcConfig]) -> "BackboneConfig":
        return BackboneConfig(self.input_shape, self.widths, self.num_classes, dict(slots))


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape)


class Model:
    """conv3x3 -> relu -> [FMR-GC] per stage, then global average pool and a linear head."""

    def __init__(self, cfg: BackboneConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        self.params: Dict[str, Tensor] = {}
        self.gc: Dict[str, FmrGcParams] = {}
        cin = cfg.input_shape[0]
        for i, (name, shape) in enumerate(zip(SLOTS, cfg.stage_shapes())):
            cout, h, w = shape
            rng = np.random.default_rng([seed, i])
            fan_in = cin * 9
            self._add(f"{name}.weight", _uniform(rng, np.sqrt(6.0 / fan_in), (cout, cin, 3, 3)))
            self._add(f"{name}.bias", np.zeros(cout))
            slot = cfg.slots.get(name)
            if slot is not None:
                theta = None
                if slot.theta == "learned":
                    theta = self._add(f"gc_{name}.theta2", init_theta(h * w, seed * 1009 + i + 1))
                self.gc[name] = FmrGcParams(theta, slot)
            cin = cout
        rng = np.random.default_rng([seed, len(SLOTS)])
        bound = np.sqrt(6.0 / (cin + cfg.num_classes))
        self._add("fc.weight", _uniform(rng, bound, (cin, cfg.num_classes)))
        self._add("fc.bias", np.zeros(cfg.num_classes))

    def _add(self, name, arr) -> Tensor:
        t = Tensor(arr, requires_grad=True)
        self.params[name] = t
        return t

    def __call__(self, x) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(x)
        if tuple(h.shape[1:]) != self.cfg.input_shape:
            raise ShapeMismatch(f"model expects (N, {self.cfg.input_shape}), got {h.shape}")
        p = self.params
        for i, name in enumerate(SLOTS):
            h = relu(conv2d(h, p[f"{name}.weight"], p[f"{name}.bias"], stride=1 if i == 0 else 2, padding=1))
            if name in self.gc:
                h = fmr_gc_forward(h, self.gc[name])
        return matmul(global_avg_pool(h), p["fc.weight"]) + p["fc.bias"]

    @property
    def input_shape(self):
        return self.cfg.input_shape

    def parameters(self) -> Dict[str, Tensor]:
        return self.params

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    @contextmanager
    def frozen(self):
        """Stop parameters from collecting gradients (attack crafting, evaluation)."""
        flags = {n: t.requires_grad for n, t in self.params.items()}
        for t in self.params.values():
            t.requires_grad = False
        try:
            yield self
        finally:
            for n, t in self.params.items():
                t.requires_grad = flags[n]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for n, t in self.params.items():
            arr = np.asarray(state[n], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"{n}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    def param_count(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for n in sorted(self.params):
            h.update(n.encode())
            h.update(np.ascontiguousarray(self.params[n].data).astype("<f8").tobytes())
        return h.hexdigest()

    def layer_costs(self) -> List[dict]:
        """Analytic parameter and multiply-accumulate counts per layer (one sample)."""
        rows = []
        cin = self.cfg.input_shape[0]
        for name, (cout, h, w) in zip(SLOTS, self.cfg.stage_shapes()):
            rows.append(
                {
                    "layer": name,
                    "params": cout * cin * 9 + cout,
                    "macs": cout * cin * 9 * h * w,
                }
            )
            if name in self.gc:
                slot = self.gc[name].config
                m = slot.pooling_mode.descriptor_dim(h, w)
                d = h * w
                rows.append(
                    {
                        "layer": f"gc_{name}",
                        "params": extra_param_count(d) if slot.theta == "learned" else 0,
                        "macs": mac_count(cout, d, m, slot.theta),
                    }
                )
            cin = cout
        k = self.cfg.num_classes
        rows.append({"layer": "fc", "params": cin * k + k, "macs": cin * k})
        return rows


def build_backbone(cfg: BackboneConfig, seed: int = 0) -> Model:
    if not isinstance(cfg, BackboneConfig):
        cfg = BackboneConfig.from_dict(cfg)
    return Model(cfg, seed)


def predict(model: Model, x: np.ndarray, batch_size: int = 250) -> np.ndarray:
    """Logits for ``x`` without building gradient state."""
    out = []
    with model.frozen():
        for i in range(0, len(x), batch_size):
            out.append(model(Tensor(x[i : i + batch_size])).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.cfg.num_classes))


def accuracy(model: Model, x: np.ndarray, y: np.ndarray, batch_size: int = 250) -> float:
    """Percentage of correct predictions."""
    if len(y) == 0:
        return 0.0
    return 100.0 * float(np.mean(predict(model, x, batch_size).argmax(axis=1) == y))
