"""Per-modality encoder: node graph -> label hypergraph -> region graph -> GCN."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError, ValidationError

MODALITIES = ("mri", "histo")


@dataclass
class ModalityGraph:
    """Nodes with feature rows and region labels, plus undirected edges."""

    modality: str
    features: np.ndarray
    regions: list
    edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.regions = [str(r) for r in self.regions]

    @property
    def num_nodes(self):
        return len(self.regions)

    @property
    def dim(self):
        return self.features.shape[1] if self.features.ndim == 2 else 0

    def validate(self):
        if self.modality not in MODALITIES:
            raise ValidationError("graph.modality", f"unknown modality '{self.modality}'")
        if self.num_nodes == 0:
            raise ValidationError("graph.empty", f"{self.modality} graph has no nodes")
        if self.features.ndim != 2 or self.features.shape[0] != self.num_nodes:
            raise ValidationError("node.features", "feature rows must match node count with uniform length")
        if self.features.shape[1] == 0:
            raise ValidationError("node.features", "feature vectors must be nonempty")
        if not np.all(np.isfinite(self.features)):
            raise ValidationError("node.features", "non-finite feature value")
        if any(not r for r in self.regions):
            raise ValidationError("node.region", "region labels must be nonempty")
        if self.edges.size and (self.edges.min() < 0 or self.edges.max() >= self.num_nodes):
            raise ValidationError("edge.endpoint", "edge endpoint out of range")
        if self.edges.size and np.any(self.edges[:, 0] == self.edges[:, 1]):
            raise ValidationError("edge.self_loop", "self-loops are not allowed")
        return self

    def permuted(self, perm):
        """The same graph with nodes reordered so that new node i is old node perm[i]."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        return ModalityGraph(self.modality, self.features[perm], [self.regions[i] for i in perm],
                             inv[self.edges] if self.edges.size else self.edges.copy())


@dataclass
class Hypergraph:
    """One hyperedge per region label; ``incidence`` is the |V| x |E| 0/1 matrix."""

    num_nodes: int
    labels: list
    members: list
    incidence: np.ndarray

    @property
    def num_hyperedges(self):
        return len(self.labels)


@dataclass
class RegionGraph:
    """Region-level graph: node j is hyperedge j, ``features`` row j its embedding."""

    labels: list
    edges: list
    features: object

    @property
    def num_regions(self):
        return len(self.labels)

    def adjacency(self):
        k = self.num_regions
        A = np.zeros((k, k))
        for i, j in self.edges:
            A[i, j] = A[j, i] = 1.0
        return A

    def normalized_adjacency(self):
        """D~^{-1/2} (A + I) D~^{-1/2}."""
        A = self.adjacency() + np.eye(self.num_regions)
        s = A.sum(axis=1) ** -0.5
        return A * s[:, None] * s[None, :]


def build_hypergraph(g):
    if g.num_nodes == 0:
        raise ContractError("cannot build a hypergraph from an empty graph")
    labels = sorted(set(g.regions))
    col = {lab: j for j, lab in enumerate(labels)}
    H = np.zeros((g.num_nodes, len(labels)))
    for i, r in enumerate(g.regions):
        H[i, col[r]] = 1.0
    members = [np.flatnonzero(H[:, j]) for j in range(len(labels))]
    return Hypergraph(g.num_nodes, labels, members, H)


def aggregate_hyperedges(H, features):
    """Mean of member node features per hyperedge (numpy array or Tensor input)."""
    inc = H.incidence if isinstance(H, Hypergraph) else np.asarray(H, dtype=np.float64)
    if inc.shape[0] != features.shape[0]:
        raise ContractError(f"incidence has {inc.shape[0]} rows but features have {features.shape[0]}")
    sizes = inc.sum(axis=0)
    if np.any(sizes == 0):
        raise ContractError("empty hyperedge")
    avg = inc.T / sizes[:, None]
    if isinstance(features, ad.Tensor):
        return ad.matmul(avg, features)
    return avg @ np.asarray(features, dtype=np.float64)


def build_region_graph(h, g):
    """Regions are adjacent iff an original edge crosses between them."""
    region_of = h.incidence.argmax(axis=1)
    pairs = set()
    for u, v in g.edges:
        a, b = region_of[u], region_of[v]
        if a != b:
            pairs.add((min(a, b), max(a, b)))
    return RegionGraph(list(h.labels), sorted((int(a), int(b)) for a, b in pairs),
                       aggregate_hyperedges(h, g.features))


def region_gnn_layer(rg, W):
    """ReLU(D~^{-1/2} A~ D~^{-1/2} X W) over the region graph."""
    W = ad.as_tensor(W)
    X = rg.features
    if W.ndim != 2 or W.shape[0] != X.shape[1]:
        raise ContractError(f"weights {W.shape} do not accept region features of width {X.shape[1]}")
    out = ad.relu(ad.matmul(rg.normalized_adjacency(), ad.matmul(X, W)))
    return RegionGraph(rg.labels, rg.edges, out)


@dataclass
class EncoderInputs:
    """Weight-independent part of the encoder, cached once per graph."""

    labels: list
    region_means: np.ndarray
    propagation: np.ndarray

    @classmethod
    def from_graph(cls, g):
        h = build_hypergraph(g)
        rg = build_region_graph(h, g)
        return cls(rg.labels, np.asarray(rg.features), rg.normalized_adjacency())

    def encode(self, W):
        return ad.relu(ad.matmul(self.propagation, ad.matmul(self.region_means, W)))
