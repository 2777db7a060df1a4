"""Channel-level graph reconstruction.

One node per feature-map channel. Nodes are described by pooled statistics,
compared with a Gaussian kernel, and each node is wired to its ``k`` most
similar peers. The resulting adjacency (plus self loops) is symmetrically
normalised into the propagation matrix used by the graph convolution.

Functions operate on arrays with arbitrary leading batch axes so the layer
can build one graph per sample in a single call.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

NEG_INF = np.finfo(np.float64).min  # stands in for -inf on the diagonal


class BadKernel(ValueError):
    pass


class KTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class PoolingMode:
    kind: str  # "global" | "none" | "block"
    kernel: int = 0

    def __post_init__(self):
        if self.kind not in ("global", "none", "block"):
            raise ValueError(f"unknown pooling kind {self.kind!r}")
        if self.kind == "block" and self.kernel < 1:
            raise ValueError("block pooling needs a positive kernel")

    @classmethod
    def parse(cls, text: Union[str, "PoolingMode"]) -> "PoolingMode":
        if isinstance(text, PoolingMode):
            return text
        t = text.strip().lower()
        if t in ("global", "gap", "global_avg"):
            return cls("global")
        if t in ("none", "nopool", "wo_pool"):
            return cls("none")
        m = re.fullmatch(r"(?:block|avg)[:_]?(\d+)", t)
        if m:
            return cls("block", int(m.group(1)))
        raise ValueError(f"cannot parse pooling mode {text!r}")

    def __str__(self):
        return f"avg{self.kernel}" if self.kind == "block" else ("gap" if self.kind == "global" else "none")

    def descriptor_dim(self, h: int, w: int) -> int:
        if self.kind == "global":
            return 1
        if self.kind == "none":
            return h * w
        return (h // self.kernel) * (w // self.kernel)


GLOBAL_AVG = PoolingMode("global")


@dataclass
class DescriptorSet:
    descriptors: np.ndarray  # (..., C, m)
    pooling_mode: PoolingMode

    @property
    def count(self) -> int:
        return self.descriptors.shape[-2]

    @property
    def dim(self) -> int:
        return self.descriptors.shape[-1]


@dataclass
class SimilarityMatrix:
    S: np.ndarray  # (..., C, C); diagonal holds NEG_INF
    sigma_sq: Union[float, np.ndarray]


@dataclass
class ChannelGraph:
    adjacency: np.ndarray  # (..., C, C) bool, no self loops
    k: int
    undirected: bool

    @property
    def count(self) -> int:
        return self.adjacency.shape[-1]

    def edges(self):
        """Edge list (i, j) in row-major order; single graphs only."""
        if self.adjacency.ndim != 2:
            raise ValueError("edges() is defined for a single graph")
        return [(int(i), int(j)) for i, j in zip(*np.nonzero(self.adjacency))]


def channel_descriptors(X: np.ndarray, mode="global") -> DescriptorSet:
    """Pool each channel of a (..., C, H, W) feature tensor into a descriptor."""
    mode = PoolingMode.parse(mode)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim < 3:
        raise ValueError(f"expected (..., C, H, W), got {X.shape}")
    *lead, c, h, w = X.shape
    if h * w < 1:
        raise ValueError("empty spatial extent")
    if mode.kind == "global":
        d = X.mean(axis=(-2, -1))[..., None]
    elif mode.kind == "none":
        d = X.reshape(*lead, c, h * w)
    else:
        p = mode.kernel
        if h % p or w % p:
            raise BadKernel(f"kernel {p} does not divide {h}x{w}")
        d = X.reshape(*lead, c, h // p, p, w // p, p).mean(axis=(-3, -1)).reshape(*lead, c, -1)
    return DescriptorSet(d, mode)


def pairwise_sq_dists(desc: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distances (..., C, C) by direct differencing."""
    c = desc.shape[-2]
    out = np.empty(desc.shape[:-2] + (c, c))
    for i in range(c):
        diff = desc - desc[..., i : i + 1, :]
        out[..., i, :] = np.einsum("...cm,...cm->...c", diff, diff)
    return out


def sigma_from_descriptors(d: Union[DescriptorSet, np.ndarray]) -> Union[float, np.ndarray]:
    """Median of the pairwise squared distances; 1.0 when that median is 0."""
    desc = d.descriptors if isinstance(d, DescriptorSet) else np.asarray(d, dtype=np.float64)
    c = desc.shape[-2]
    if c < 2:
        raise ValueError("sigma needs at least two descriptors")
    iu = np.triu_indices(c, k=1)
    med = np.median(pairwise_sq_dists(desc)[..., iu[0], iu[1]], axis=-1)
    med = np.where(med > 0, med, 1.0)
    return float(med) if np.ndim(med) == 0 else med


def similarity_matrix(d: Union[DescriptorSet, np.ndarray], sigma_sq) -> SimilarityMatrix:
    desc = d.descriptors if isinstance(d, DescriptorSet) else np.asarray(d, dtype=np.float64)
    sig = np.asarray(sigma_sq, dtype=np.float64)
    if np.any(sig <= 0):
        raise ValueError("sigma_sq must be positive")
    S = np.exp(-pairwise_sq_dists(desc) / sig[..., None, None])
    c = desc.shape[-2]
    S[..., np.arange(c), np.arange(c)] = NEG_INF
    return SimilarityMatrix(S, sigma_sq)


def topk_graph(S: Union[SimilarityMatrix, np.ndarray], k: int, undirected: bool = True) -> ChannelGraph:
    """Wire every node to its k most similar peers (ties go to the lower index)."""
    S = S.S if isinstance(S, SimilarityMatrix) else np.asarray(S, dtype=np.float64)
    c = S.shape[-1]
    if k >= c:
        raise KTooLarge(f"k={k} needs at least {k + 1} channels, have {c}")
    if k < 1:
        raise ValueError("k must be >= 1")
    # stable sort on -S keeps equal scores in index order
    order = np.argsort(-S, axis=-1, kind="stable")[..., :k]
    A = np.zeros(S.shape, dtype=bool)
    np.put_along_axis(A, order, True, axis=-1)
    idx = np.arange(c)
    A[..., idx, idx] = False
    if undirected:
        A = A | np.swapaxes(A, -1, -2)
    return ChannelGraph(A, k, undirected)


def propagation_matrix(g: Union[ChannelGraph, np.ndarray]) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 with binary adjacency."""
    A = g.adjacency if isinstance(g, ChannelGraph) else np.asarray(g, dtype=bool)
    c = A.shape[-1]
    At = A.astype(np.float64)
    At[..., np.arange(c), np.arange(c)] = 1.0
    dinv = 1.0 / np.sqrt(At.sum(axis=-1))
    return dinv[..., :, None] * At * dinv[..., None, :]


def build_propagation(
    X: np.ndarray,
    k: int = 5,
    mode="global",
    sigma_sq: Optional[float] = None,
    undirected: bool = True,
) -> np.ndarray:
    """Features (..., C, H, W) -> propagation matrices (..., C, C).

    ``k`` is clipped to C - 1; a single channel yields P = [[1]].
    """
    X = np.asarray(X, dtype=np.float64)
    c = X.shape[-3]
    if c == 1:
        return np.ones(X.shape[:-3] + (1, 1))
    d = channel_descriptors(X, mode)
    sig = sigma_from_descriptors(d) if sigma_sq is None else sigma_sq
    S = similarity_matrix(d, sig)
    return propagation_matrix(topk_graph(S, min(k, c - 1), undirected))


def spectral_radius(P: np.ndarray, iters: int = 500, seed: int = 0) -> float:
    """Power-iteration estimate of max |eigenvalue| for a square matrix."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(P.shape[0])
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        w = P @ v
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return 0.0
        est = nrm
        v = w / nrm
    return float(est)


def dump_graph(g: ChannelGraph, sigma_sq: float, prefix: Union[str, Path]) -> tuple:
    """Write ``<prefix>.csv`` (i,j edge pairs) and ``<prefix>.json`` (header)."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = prefix.with_suffix(".csv"), prefix.with_suffix(".json")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["i", "j"])
        wr.writerows(g.edges())
    header = {"C": g.count, "k": g.k, "undirected": g.undirected, "sigma_sq": float(sigma_sq)}
    json_path.write_text(json.dumps(header, sort_keys=True) + "\n", encoding="utf-8")
    return csv_path, json_path


def load_graph(prefix: Union[str, Path]) -> tuple:
    prefix = Path(prefix)
    header = json.loads(prefix.with_suffix(".json").read_text(encoding="utf-8"))
    A = np.zeros((header["C"], header["C"]), dtype=bool)
    with open(prefix.with_suffix(".csv"), newline="", encoding="utf-8") as fh:
        rd = csv.reader(fh)
        next(rd)
        for i, j in rd:
            A[int(i), int(j)] = True
    return ChannelGraph(A, header["k"], header["undirected"]), header["sigma_sq"]
