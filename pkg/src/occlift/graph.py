"""Skeletons and the spatio-temporal joint graph.

Nodes are ``(frame, joint)`` pairs numbered frame-major,
``node_index(t, j) = t * N_J + j``. Relation 0 holds the spatial (skeleton)
edges inside every frame; relation ``k >= 1`` links each joint to itself
``strides[k-1]`` frames later.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DatasetParseError

BUILTIN_SKELETONS = ("h36m17", "sc13")


@dataclass(frozen=True)
class Skeleton:
    n_joints: int
    edges: tuple[tuple[int, int], ...]
    names: tuple[str, ...]
    root_index: int = 0
    offsets: np.ndarray | None = field(default=None, compare=False)
    name: str = "custom"

    def __post_init__(self):
        n = self.n_joints
        edges = tuple((int(a), int(b)) for a, b in self.edges)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "names", tuple(self.names))
        if n < 1:
            raise ConfigError("skeleton needs at least one joint")
        if len(self.names) != n:
            raise ConfigError(f"skeleton has {len(self.names)} names for {n} joints")
        if len(edges) != n - 1:
            raise ConfigError(f"skeleton must be a tree: {len(edges)} edges for {n} joints")
        if any(not (0 <= a < n and 0 <= b < n) or a == b for a, b in edges):
            raise ConfigError("skeleton edge index out of range or self-loop")
        if self.root_index != 0:
            raise ConfigError("the root joint must have index 0")
        seen = {self.root_index}
        frontier = [self.root_index]
        adj = self.neighbors
        while frontier:
            j = frontier.pop()
            for k in adj[j]:
                if k not in seen:
                    seen.add(k)
                    frontier.append(k)
        if len(seen) != n:
            raise ConfigError("skeleton edges do not connect every joint")
        if self.offsets is not None:
            off = np.asarray(self.offsets, dtype=np.float64)
            if off.shape != (n, 3):
                raise ConfigError(f"skeleton offsets must be ({n}, 3), got {off.shape}")
            object.__setattr__(self, "offsets", off)

    @cached_property
    def neighbors(self) -> list[list[int]]:
        out = [[] for _ in range(self.n_joints)]
        for a, b in self.edges:
            out[a].append(b)
            out[b].append(a)
        return out

    @cached_property
    def parents(self) -> np.ndarray:
        """Parent of each joint in the tree rooted at ``root_index`` (root: -1)."""
        par = np.full(self.n_joints, -1)
        order = [self.root_index]
        for j in order:
            for k in self.neighbors[j]:
                if k != self.root_index and par[k] == -1 and k not in order:
                    par[k] = j
                    order.append(k)
        return par

    @cached_property
    def topo_order(self) -> list[int]:
        order = [self.root_index]
        for j in order:
            order.extend(k for k in self.neighbors[j] if self.parents[k] == j)
        return order

    def hop_distances(self) -> np.ndarray:
        """All-pairs tree distance in edges."""
        n = self.n_joints
        dist = np.full((n, n), -1)
        for s in range(n):
            dist[s, s] = 0
            queue = [s]
            for j in queue:
                for k in self.neighbors[j]:
                    if dist[s, k] < 0:
                        dist[s, k] = dist[s, j] + 1
                        queue.append(k)
        return dist

    def to_dict(self) -> dict:
        d = {"name": self.name, "n_joints": self.n_joints, "names": list(self.names),
             "edges": [list(e) for e in self.edges], "root_index": self.root_index}
        if self.offsets is not None:
            d["offsets"] = self.offsets.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Skeleton":
        for key in ("n_joints", "names", "edges"):
            if key not in d:
                raise DatasetParseError(f"skeleton definition is missing field {key!r}")
        return cls(n_joints=int(d["n_joints"]), edges=d["edges"], names=d["names"],
                   root_index=int(d.get("root_index", 0)), offsets=d.get("offsets"),
                   name=d.get("name", "custom"))


def load_skeleton(name_or_path: str | Path = "h36m17") -> Skeleton:
    """Built-in skeleton by name (``h36m17``, ``sc13``) or a JSON definition file."""
    if str(name_or_path) in BUILTIN_SKELETONS:
        text = resources.files("occlift.data").joinpath(f"{name_or_path}.json").read_text()
    else:
        try:
            text = Path(name_or_path).read_text()
        except OSError as exc:
            raise ConfigError(f"unknown skeleton {name_or_path!r}: {exc}") from exc
    try:
        return Skeleton.from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise DatasetParseError(f"{name_or_path}: line {exc.lineno}: {exc.msg}") from exc


@dataclass(frozen=True)
class STGraph:
    T: int
    n_joints: int
    strides: tuple[int, ...]
    relations: tuple[np.ndarray, ...]  # boolean N x N, symmetric, no self-loops

    @property
    def N(self) -> int:
        return self.T * self.n_joints

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    def node_index(self, t: int, j: int) -> int:
        return t * self.n_joints + j

    def node_of(self, i: int) -> tuple[int, int]:
        return divmod(i, self.n_joints)

    def edge_counts(self) -> list[int]:
        """Directed edge count per relation (each undirected edge counted twice)."""
        return [int(a.sum()) for a in self.relations]


def build_graph(skel: Skeleton, T: int, strides=()) -> STGraph:
    strides = tuple(sorted({int(d) for d in strides}))
    if T < 1:
        raise ConfigError(f"window length T must be >= 1, got {T}")
    for d in strides:
        if not 1 <= d < T:
            raise ConfigError(f"temporal stride {d} violates 1 <= stride < T={T}")
    nj = skel.n_joints
    N = T * nj
    frames = np.arange(T)[:, None] * nj
    spatial = np.zeros((N, N), bool)
    for a, b in skel.edges:
        spatial[frames[:, 0] + a, frames[:, 0] + b] = True
        spatial[frames[:, 0] + b, frames[:, 0] + a] = True
    rels = [spatial]
    joints = np.arange(nj)
    for d in strides:
        A = np.zeros((N, N), bool)
        src = (np.arange(T - d)[:, None] * nj + joints).ravel()
        A[src, src + d * nj] = True
        A[src + d * nj, src] = True
        rels.append(A)
    for A in rels:
        A.flags.writeable = False
    return STGraph(T=T, n_joints=nj, strides=strides, relations=tuple(rels))


def normalize(g: STGraph) -> list[np.ndarray]:
    """Symmetric normalization with self-loops, ``D^-1/2 (A + I) D^-1/2`` per relation."""
    out = []
    for A in g.relations:
        At = A.astype(np.float64) + np.eye(g.N)
        dinv = 1.0 / np.sqrt(At.sum(axis=1))
        An = dinv[:, None] * At * dinv[None, :]
        out.append(0.5 * (An + An.T))
    return out


def sparse_operators(adjs: list[np.ndarray]) -> list[sp.csr_matrix]:
    """CSR copies of normalized adjacencies for fast propagation."""
    return [sp.csr_matrix(a) for a in adjs]
