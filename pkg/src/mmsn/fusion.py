"""Shared latent graph, soft assignment of modality regions, sheaf diffusion, readout."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError
from .sheaf import SheafOperator, sheaf_gcn_layer


@dataclass
class LatentGraph:
    """Fixed topology of the global latent graph plus its initial values.

    Trainable node features and restriction maps live in the ParamStore; this
    object only carries what is frozen after construction.
    """

    num_nodes: int
    dim: int
    edges: np.ndarray
    init_features: np.ndarray
    init_edge_features: np.ndarray

    @property
    def num_edges(self):
        return len(self.edges)

    @property
    def src(self):
        return self.edges[:, 0]

    @property
    def dst(self):
        return self.edges[:, 1]

    def degrees(self):
        return np.bincount(self.edges.reshape(-1), minlength=self.num_nodes)

    def topology_hash(self):
        h = hashlib.sha256()
        h.update(np.asarray([self.num_nodes, self.dim], dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(self.edges, dtype="<i8").tobytes())
        return h.hexdigest()


def cosine_similarity_matrix(H):
    norms = np.linalg.norm(H, axis=1)
    norms = np.where(norms > 0, norms, 1.0)
    U = H / norms[:, None]
    return U @ U.T


def init_latent_graph(num_nodes, dim, tau, rng):
    """Random latent nodes joined where cosine similarity reaches ``tau``.

    Nodes left isolated are joined to their most similar neighbour.
    """
    if num_nodes < 2:
        raise ConfigError("latent graph needs at least 2 nodes")
    if dim < 1:
        raise ConfigError("latent dimension must be >= 1")
    if not -1.0 <= tau:
        raise ConfigError(f"similarity threshold must be >= -1, got {tau}")
    H = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(num_nodes, dim))
    S = cosine_similarity_matrix(H)
    edges = {(i, j) for i in range(num_nodes) for j in range(i + 1, num_nodes) if S[i, j] >= tau}
    deg = np.zeros(num_nodes, dtype=int)
    for i, j in edges:
        deg[i] += 1
        deg[j] += 1
    for i in range(num_nodes):
        if deg[i] == 0:
            sims = S[i].copy()
            sims[i] = -np.inf
            j = int(np.argmax(sims))
            edges.add((min(i, j), max(i, j)))
            deg[i] += 1
            deg[j] += 1
    E = np.asarray(sorted(edges), dtype=np.intp).reshape(-1, 2)
    edge_feats = 0.5 * (H[E[:, 0]] + H[E[:, 1]])
    return LatentGraph(num_nodes, dim, E, H, edge_feats)


def mlp(x, layers, final_activation=None):
    """Dense layers ``[(W, b), ...]`` with ReLU between them."""
    for i, (W, b) in enumerate(layers):
        x = ad.matmul(x, W) + b
        if i < len(layers) - 1:
            x = ad.relu(x)
    return final_activation(x) if final_activation else x


def soft_assign(x, layers):
    """Row-stochastic assignment P = softmax(MLP(x)) of regions to latent nodes."""
    return ad.softmax(mlp(x, layers), axis=-1)


def project_to_latent(P, x):
    """P^T x: latent-node features pooled from modality rows."""
    P, x = ad.as_tensor(P), ad.as_tensor(x)
    if P.shape[0] != x.shape[0]:
        raise ContractError(f"assignment has {P.shape[0]} rows but features have {x.shape[0]}")
    return ad.matmul(ad.transpose(P), x)


def fuse_modalities(base, *projections):
    """base + sum of the modality projections (None entries are skipped)."""
    out = base
    for p in projections:
        if p is not None:
            out = out + p
    return out


def sheaf_diffuse(X, operator, weights, activation="relu"):
    """Stacked sheaf GCN layers, then per-edge features 1/2 (rho_u h_u + rho_v h_v).

    ``X`` is (..., N, d). All layers but the last use ``activation``; the last
    is linear. Returns (node features, edge features of shape (..., E, d)).
    """
    if len(weights) < 1:
        raise ConfigError("sheaf diffusion needs at least one layer")
    h = X
    for i, W in enumerate(weights):
        h = sheaf_gcn_layer(h, operator, W, activation if i < len(weights) - 1 else "identity")
    ps, pd = operator.restrict(h)
    return h, 0.5 * (ps + pd)


def readout(nodes, edges):
    """CONCAT(sum of node features, sum of edge features) along the last axis."""
    nodes = ad.as_tensor(nodes)
    node_sum = ad.sum_(nodes, axis=-2)
    if edges is None or edges.shape[-2] == 0:
        edge_sum = ad.Tensor(np.zeros(node_sum.shape))
    else:
        edge_sum = ad.sum_(edges, axis=-2)
    return ad.concat([node_sum, edge_sum], axis=-1)


def latent_operator(graph, maps, eps=1e-8):
    return SheafOperator(maps, graph.src, graph.dst, graph.num_nodes, eps)
