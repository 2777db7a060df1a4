"""Experiment orchestration: robustness reports, ablation sweeps and cost accounting.

Every table is a list of flat dict rows written as UTF-8 CSV with a fixed
column order and fixed float formatting, so reruns with the same seeds are
byte-identical.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .attacks import AttackConfig, run_attack, transfer_attack
from .data import Dataset
from .layer import FmrGcConfig
from .models import SLOTS, BackboneConfig, Model, accuracy, build_backbone, predict
from .training import TrainConfig, config_hash, fit, save_checkpoint

log = logging.getLogger(__name__)

EPS = 8 / 255

# Desk scale: 2,000 / 1,000 image subsets, 20 epochs, milestones scaled to 18 / 19.
# lr 0.02 rather than 0.1: without normalisation layers the small CNN stays at
# chance under PGD-AT with lr 0.1.
DESK_TRAIN = {"epochs": 20, "milestones": (18, 19), "lr": 0.02}
DESK_DATA = {"train_size": 2000, "test_size": 1000}


def desk_train_config(**overrides) -> TrainConfig:
    return TrainConfig(**{**DESK_TRAIN, **overrides})
REPORT_ROWS = ("Clean", "FGSM", "PGD-10", "PGD-20", "PGD-50", "CW")


# ---------------------------------------------------------------- attack suites


@dataclass
class SuiteEntry:
    name: str
    attack: Optional[str]  # None for clean accuracy
    cfg: Optional[AttackConfig] = None


def attack_suite(epsilon: float = EPS, names: Sequence[str] = REPORT_ROWS, step_size: Optional[float] = None,
                 random_init: bool = True) -> List[SuiteEntry]:
    """Named report rows -> attack settings. ``PGD-n`` runs n steps, ``CW`` is 20-step margin PGD."""
    out = []
    for name in names:
        if name == "Clean":
            out.append(SuiteEntry(name, None))
        elif name == "FGSM":
            out.append(SuiteEntry(name, "fgsm", AttackConfig(epsilon=epsilon, steps=1, step_size=epsilon, random_init=False)))
        elif name.startswith("PGD-"):
            cfg = AttackConfig(epsilon=epsilon, steps=int(name[4:]), step_size=step_size, random_init=random_init)
            out.append(SuiteEntry(name, "pgd", cfg))
        elif name == "CW":
            cfg = AttackConfig(epsilon=epsilon, steps=20, step_size=step_size, random_init=random_init, loss_kind="cw")
            out.append(SuiteEntry(name, "cw", cfg))
        else:
            raise ValueError(f"unknown report row {name!r}")
    return out


def _adv_accuracy(model: Model, x, y, entry: SuiteEntry, seed: int, batch_size: int) -> float:
    if entry.attack is None or (entry.cfg is not None and entry.cfg.epsilon == 0):
        return accuracy(model, x, y, batch_size)
    correct = 0
    for i in range(0, len(y), batch_size):
        idx = np.arange(i, min(i + batch_size, len(y)))
        x_adv = run_attack(model, x[idx], y[idx], entry.attack, entry.cfg, seed, idx)
        correct += int(np.sum(predict(model, x_adv, batch_size).argmax(axis=1) == y[idx]))
    return 100.0 * correct / len(y)


@dataclass
class RobustnessReport:
    rows: Dict[str, float]
    metadata: dict = field(default_factory=dict)

    def violations(self) -> List[str]:
        out = []
        if "Clean" not in self.rows:
            out.append("Clean row missing")
        for k, v in self.rows.items():
            if not 0.0 <= v <= 100.0:
                out.append(f"{k} accuracy {v} outside [0, 100]")
        if "PGD-10" in self.rows and "PGD-50" in self.rows and self.rows["PGD-10"] < self.rows["PGD-50"] - 2.0:
            out.append("PGD-10 is more than 2 points below PGD-50")
        return out

    def table(self) -> List[dict]:
        return [{"attack": k, "accuracy": v} for k, v in self.rows.items()]


def evaluate_robustness(model: Model, x, y, suite: Optional[Sequence[SuiteEntry]] = None, seed: int = 0,
                        batch_size: int = 200) -> RobustnessReport:
    suite = attack_suite() if suite is None else suite
    t0 = time.perf_counter()
    rows = {}
    for entry in suite:
        rows[entry.name] = _adv_accuracy(model, x, y, entry, seed, batch_size)
        log.info("%s: %.2f", entry.name, rows[entry.name])
    eps = sorted({e.cfg.epsilon for e in suite if e.cfg is not None})
    meta = {
        "model_hash": model.fingerprint(),
        "epsilon": eps,
        "seed": seed,
        "n": int(len(y)),
        "wall_time_s": time.perf_counter() - t0,
    }
    return RobustnessReport(rows, meta)


# ---------------------------------------------------------------- tables


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.4f}"
    return str(v)


def rows_to_csv(rows: List[dict], columns: Optional[Sequence[str]] = None) -> str:
    if columns is None:
        columns = []
        for r in rows:
            columns.extend(k for k in r if k not in columns)
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(columns)
    for r in rows:
        wr.writerow([_fmt(r.get(c, "")) for c in columns])
    return buf.getvalue()


def write_csv(path: Union[str, Path], rows: List[dict], columns: Optional[Sequence[str]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(rows_to_csv(rows, columns).encode("utf-8"))
    return path


def read_csv(path: Union[str, Path]) -> List[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_manifest(path: Union[str, Path], manifest: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------- training cells


@dataclass
class Cell:
    label: str
    backbone: BackboneConfig
    train: TrainConfig


def run_cell(cell: Cell, train: Dataset, test: Dataset, seed: int, suite: Sequence[SuiteEntry],
             checkpoint_dir: Optional[Path] = None) -> Tuple[dict, Model]:
    """Train one configuration for one seed and evaluate it."""
    tcfg = TrainConfig(**{**cell.train.to_dict(), "seed": seed})
    model = build_backbone(cell.backbone, seed)
    t0 = time.perf_counter()
    ckpt = fit(model, train.x, train.y, tcfg)
    train_time = time.perf_counter() - t0
    report = evaluate_robustness(model, test.x, test.y, suite, seed)
    if checkpoint_dir is not None:
        ckpt.metrics["robustness"] = report.rows
        save_checkpoint(ckpt, Path(checkpoint_dir) / f"{cell.label}_seed{seed}.fmrgc")
    row = {
        "cell": cell.label,
        "seed": seed,
        "config_hash": config_hash(cell.backbone.to_dict(), tcfg.to_dict()),
        **report.rows,
    }
    log.info("cell %s seed %d done in %.0fs: %s", cell.label, seed, train_time, report.rows)
    return row, model


def seed_means(rows: List[dict], metrics: Sequence[str], hashes: Optional[Dict[str, str]] = None) -> List[dict]:
    """One ``seed == 'mean'`` row per cell, in first-appearance order.

    ``hashes`` maps cell label to the hash of its seed-independent config.
    """
    out, order = {}, []
    for r in rows:
        if r["seed"] == "mean":
            continue
        if r["cell"] not in out:
            order.append(r["cell"])
            out[r["cell"]] = []
        out[r["cell"]].append(r)
    means = []
    for cell in order:
        group = out[cell]
        m = {"cell": cell, "seed": "mean", "config_hash": (hashes or {}).get(cell, "")}
        for k in metrics:
            m[k] = float(np.mean([g[k] for g in group]))
        means.append(m)
    return means


def run_cells(cells: Sequence[Cell], train: Dataset, test: Dataset, seeds: Sequence[int],
              suite: Sequence[SuiteEntry], checkpoint_dir: Optional[Path] = None, extra: Optional[Dict[str, dict]] = None) -> List[dict]:
    """Per-seed rows followed by seed-averaged rows; ``extra`` adds columns per cell label."""
    rows = []
    for cell in cells:
        for s in seeds:
            row, _ = run_cell(cell, train, test, s, suite, checkpoint_dir)
            row.update((extra or {}).get(cell.label, {}))
            rows.append(row)
    metrics = [e.name for e in suite]
    hashes = {}
    for c in cells:
        tdict = {k: v for k, v in c.train.to_dict().items() if k != "seed"}
        hashes[c.label] = config_hash(c.backbone.to_dict(), tdict, {"seeds": list(seeds)})
    means = seed_means(rows, metrics, hashes)
    for m in means:
        m.update((extra or {}).get(m["cell"], {}))
    return rows + means


def mean_row(rows: List[dict], cell: str) -> dict:
    for r in rows:
        if r["cell"] == cell and r["seed"] == "mean":
            return r
    raise KeyError(cell)


# ---------------------------------------------------------------- sweeps

POSITION_SETS = ((), ("conv1",), ("conv2",), ("conv3",), ("conv1", "conv2"), ("conv1", "conv2", "conv3"))


def slot_label(slots: Iterable[str]) -> str:
    slots = list(slots)
    return "none" if not slots else "+".join(s.replace("conv", "") for s in slots)


def sweep_block_positions(base: BackboneConfig, train_cfg: TrainConfig, train: Dataset, test: Dataset,
                          seeds: Sequence[int] = (0, 1, 2), slot_sets: Sequence[Sequence[str]] = POSITION_SETS,
                          gc: Optional[FmrGcConfig] = None, suite=None, checkpoint_dir=None) -> List[dict]:
    gc = gc or FmrGcConfig()
    suite = suite or attack_suite()
    cells, extra = [], {}
    for slots in slot_sets:
        label = slot_label(slots)
        cells.append(Cell(label, base.with_slots({s: gc for s in slots}), train_cfg))
        extra[label] = {s: s in slots for s in SLOTS}
    return run_cells(cells, train, test, seeds, suite, checkpoint_dir, extra)


def sweep_graph_density(base: BackboneConfig, train_cfg: TrainConfig, train: Dataset, test: Dataset,
                        k_values: Sequence[int], seeds: Sequence[int] = (0, 1, 2), slot: str = "conv1",
                        gc: Optional[FmrGcConfig] = None, suite=None, checkpoint_dir=None) -> List[dict]:
    gc = gc or FmrGcConfig()
    channels = dict(zip(SLOTS, base.stage_shapes()))[slot][0]
    bad = [k for k in k_values if not 1 <= k < channels]
    if bad:
        raise ValueError(f"k values {bad} invalid for {channels} channels")
    suite = suite or attack_suite(names=("Clean", "PGD-10"))
    cells, extra = [], {}
    for k in k_values:
        label = f"k{k}"
        cfg = FmrGcConfig(**{**gc.__dict__, "k": int(k)})
        cells.append(Cell(label, base.with_slots({slot: cfg}), train_cfg))
        extra[label] = {"k": int(k), "density": k / channels}
    return run_cells(cells, train, test, seeds, suite, checkpoint_dir, extra)


def sweep_epsilon(model: Model, x, y, eps_list: Sequence[float], seed: int = 0,
                  steps: Sequence[int] = (10, 100), batch_size: int = 200) -> List[dict]:
    """PGD robust accuracy per epsilon (alpha = eps / 4)."""
    eps_list = list(eps_list)
    if eps_list != sorted(eps_list):
        raise ValueError("eps_list must be sorted ascending")
    rows = []
    for eps in eps_list:
        row = {"epsilon": float(eps), "epsilon_255": float(eps) * 255}
        for n in steps:
            entry = SuiteEntry(f"PGD-{n}", "pgd", AttackConfig(epsilon=eps, steps=n))
            row[f"PGD-{n}"] = _adv_accuracy(model, x, y, entry, seed, batch_size)
        rows.append(row)
    return rows


DESCRIPTOR_MODES = ("gap", "none", "avg4", "avg8")


def ablate_descriptors(base: BackboneConfig, train_cfg: TrainConfig, train: Dataset, test: Dataset,
                       seeds: Sequence[int] = (0, 1, 2), modes: Sequence[str] = DESCRIPTOR_MODES, slot: str = "conv1",
                       gc: Optional[FmrGcConfig] = None, suite=None, checkpoint_dir=None) -> List[dict]:
    gc = gc or FmrGcConfig()
    suite = suite or attack_suite(names=("Clean", "PGD-10", "CW"))
    cells = [Cell("baseline", base.with_slots({}), train_cfg)]
    for mode in modes:
        cfg = FmrGcConfig(**{**gc.__dict__, "pooling": mode})
        cells.append(Cell(mode, base.with_slots({slot: cfg}), train_cfg))
    return run_cells(cells, train, test, seeds, suite, checkpoint_dir)


def ablate_components(base: BackboneConfig, train_cfg: TrainConfig, train: Dataset, test: Dataset,
                      seeds: Sequence[int] = (0, 1, 2), slot: str = "conv1", gc: Optional[FmrGcConfig] = None,
                      suite=None, checkpoint_dir=None) -> List[dict]:
    """baseline / propagation only (theta fixed to identity) / learned theta."""
    gc = gc or FmrGcConfig()
    suite = suite or attack_suite(names=("Clean", "FGSM", "PGD-10", "CW"))
    cells = [
        Cell("baseline", base.with_slots({}), train_cfg),
        Cell("propagation", base.with_slots({slot: FmrGcConfig(**{**gc.__dict__, "theta": "identity"})}), train_cfg),
        Cell("theta", base.with_slots({slot: FmrGcConfig(**{**gc.__dict__, "theta": "learned"})}), train_cfg),
    ]
    return run_cells(cells, train, test, seeds, suite, checkpoint_dir)


def transfer_table(sources: Dict[str, Model], targets: Dict[str, Model], x, y, epsilon: float = EPS,
                   names: Sequence[str] = ("FGSM", "PGD-10", "PGD-20"), seed: int = 0) -> List[dict]:
    """Target accuracy on examples crafted against each source; Natural row is clean target accuracy."""
    rows = []
    for sname, src in sources.items():
        for tname, tgt in targets.items():
            row = {"source": sname, "target": tname, "Natural": accuracy(tgt, x, y)}
            for entry in attack_suite(epsilon, names):
                row[entry.name] = transfer_attack(src, tgt, x, y, entry.cfg, seed)
            rows.append(row)
    return rows


# ---------------------------------------------------------------- cost


@dataclass
class CostReport:
    params: int
    macs: int
    layers: List[dict]

    def table(self) -> List[dict]:
        return self.layers + [{"layer": "total", "params": self.params, "macs": self.macs}]


def cost_report(model: Model) -> CostReport:
    layers = model.layer_costs()
    return CostReport(sum(r["params"] for r in layers), sum(r["macs"] for r in layers), layers)
