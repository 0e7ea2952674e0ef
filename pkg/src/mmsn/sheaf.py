"""Cellular sheaves on graphs: Laplacians, normalisation, transport, energy.

The block-sparse routines work on plain numpy arrays and serve analysis and
diagnostics. :class:`SheafOperator` is the differentiable counterpart used
inside the model, where the restriction maps are trainable tensors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError


@dataclass(frozen=True)
class StalkGraph:
    """Undirected simple graph whose node and edge stalks are all R^d."""

    n: int
    edges: tuple
    d: int

    def __post_init__(self):
        if self.d < 1:
            raise ContractError("stalk dimension must be >= 1")
        if self.n < 1:
            raise ContractError("graph needs at least one node")
        seen = set()
        canon = []
        for u, v in self.edges:
            u, v = int(u), int(v)
            if u == v:
                raise ContractError(f"self-loop at node {u}")
            if not (0 <= u < self.n and 0 <= v < self.n):
                raise ContractError(f"edge ({u},{v}) out of range")
            key = (min(u, v), max(u, v))
            if key in seen:
                raise ContractError(f"duplicate edge {key}")
            seen.add(key)
            canon.append(key)
        object.__setattr__(self, "edges", tuple(canon))

    @property
    def num_edges(self):
        return len(self.edges)

    def edge_index(self):
        """(src, dst) integer arrays with src < dst."""
        if not self.edges:
            return np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp)
        arr = np.asarray(self.edges, dtype=np.intp)
        return arr[:, 0], arr[:, 1]


@dataclass
class CellularSheaf:
    """A StalkGraph plus two d x d restriction maps per edge.

    ``maps[e, 0]`` is F_{u<|e} and ``maps[e, 1]`` is F_{v<|e} for
    ``graph.edges[e] == (u, v)``.
    """

    graph: StalkGraph
    maps: np.ndarray

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=np.float64)
        d = self.graph.d
        if self.maps.shape != (self.graph.num_edges, 2, d, d):
            raise ContractError(
                f"restriction maps must have shape {(self.graph.num_edges, 2, d, d)}, got {self.maps.shape}")

    @classmethod
    def identity(cls, graph):
        eye = np.broadcast_to(np.eye(graph.d), (graph.num_edges, 2, graph.d, graph.d)).copy()
        return cls(graph, eye)

    @classmethod
    def random(cls, graph, rng, scale=1.0):
        return cls(graph, scale * rng.standard_normal((graph.num_edges, 2, graph.d, graph.d)))

    def restriction(self, e, node):
        u, v = self.graph.edges[e]
        if node == u:
            return self.maps[e, 0]
        if node == v:
            return self.maps[e, 1]
        raise ContractError(f"node {node} is not incident to edge {e}={self.graph.edges[e]}")


class BlockMatrix:
    """Symmetric nd x nd matrix stored as d x d blocks keyed by (row, col) node."""

    def __init__(self, n, d):
        self.n = n
        self.d = d
        self.blocks = {}

    def block(self, i, j):
        if (i, j) in self.blocks:
            return self.blocks[(i, j)]
        if (j, i) in self.blocks:
            return self.blocks[(j, i)].T
        return np.zeros((self.d, self.d))

    def add_block(self, i, j, value):
        if i == j:
            self.blocks[(i, i)] = self.blocks.get((i, i), np.zeros((self.d, self.d))) + value
        elif (j, i) in self.blocks:
            self.blocks[(j, i)] = self.blocks[(j, i)] + value.T
        else:
            self.blocks[(i, j)] = self.blocks.get((i, j), np.zeros((self.d, self.d))) + value

    def diagonal_blocks(self):
        return np.stack([self.block(i, i) for i in range(self.n)])

    def to_dense(self):
        n, d = self.n, self.d
        out = np.zeros((n * d, n * d))
        for (i, j), b in self.blocks.items():
            out[i * d:(i + 1) * d, j * d:(j + 1) * d] = b
            if i != j:
                out[j * d:(j + 1) * d, i * d:(i + 1) * d] = b.T
        return out

    def matvec(self, x):
        """Multiply by a row-per-node feature matrix ``x`` of shape (n, d)."""
        x = np.asarray(x, dtype=np.float64)
        out = np.zeros_like(x)
        for (i, j), b in self.blocks.items():
            out[i] += b @ x[j]
            if i != j:
                out[j] += b.T @ x[i]
        return out


def assemble_sheaf_laplacian(sheaf):
    """L_vv = sum_e F_v^T F_v and L_vu = -F_v^T F_u over incident edges."""
    g = sheaf.graph
    L = BlockMatrix(g.n, g.d)
    for i in range(g.n):
        L.blocks[(i, i)] = np.zeros((g.d, g.d))
    for e, (u, v) in enumerate(g.edges):
        fu, fv = sheaf.maps[e, 0], sheaf.maps[e, 1]
        L.add_block(u, u, fu.T @ fu)
        L.add_block(v, v, fv.T @ fv)
        L.add_block(u, v, -fu.T @ fv)
    return L


def inv_sqrt_psd(block, eps=1e-8):
    """Inverse square root of a symmetric block, eigenvalues clamped at eps."""
    sym = 0.5 * (block + block.T)
    w, q = np.linalg.eigh(sym)
    return (q * np.maximum(w, eps) ** -0.5) @ q.T


def normalize_laplacian(L, eps=1e-8):
    """D^{-1/2} L D^{-1/2} with D the block diagonal of L."""
    dinv = [inv_sqrt_psd(L.block(i, i), eps) for i in range(L.n)]
    out = BlockMatrix(L.n, L.d)
    for (i, j), b in L.blocks.items():
        out.blocks[(i, j)] = dinv[i] @ b @ dinv[j]
    return out


def transport(x, e, src, dst, sheaf):
    """Move a stalk vector from ``src`` to ``dst`` across edge ``e``: F_dst^T F_src x."""
    if set(sheaf.graph.edges[e]) != {src, dst} or src == dst:
        raise ContractError(f"nodes ({src},{dst}) are not the two endpoints of edge {e}")
    return sheaf.restriction(e, dst).T @ (sheaf.restriction(e, src) @ np.asarray(x, dtype=np.float64))


def dirichlet_energy(sheaf, X):
    """sum_e ||F_u x_u - F_v x_v||^2 for row-per-node features ``X``."""
    X = np.asarray(X, dtype=np.float64)
    src, dst = sheaf.graph.edge_index()
    if not len(src):
        return 0.0
    diff = np.einsum("eij,ej->ei", sheaf.maps[:, 0], X[src]) - np.einsum("eij,ej->ei", sheaf.maps[:, 1], X[dst])
    return float(np.sum(diff * diff))


def laplacian_spectrum(sheaf, eps=1e-8, normalized=True):
    L = assemble_sheaf_laplacian(sheaf)
    if normalized:
        L = normalize_laplacian(L, eps)
    return np.linalg.eigvalsh(L.to_dense())


class SheafOperator:
    """Differentiable normalised sheaf Laplacian over a fixed graph.

    ``maps`` is an (E, 2, d, d) tensor. The inverse square roots of the
    degree blocks are computed once at construction and reused by every call
    to :meth:`apply`, which accepts features of shape (..., n, d).
    """

    def __init__(self, maps, src, dst, n, eps=1e-8):
        self.maps = ad.as_tensor(maps)
        self.src = np.asarray(src, dtype=np.intp)
        self.dst = np.asarray(dst, dtype=np.intp)
        self.n = n
        if self.maps.ndim != 4 or self.maps.shape[1] != 2 or self.maps.shape[2] != self.maps.shape[3]:
            raise ContractError(f"restriction maps must be (E, 2, d, d), got {self.maps.shape}")
        if self.maps.shape[0] != len(self.src):
            raise ContractError("one pair of restriction maps is needed per edge")
        self.d = self.maps.shape[2]
        e = len(self.src)
        self.f_src = ad.reshape(ad.take(self.maps, [0], axis=1), (e, self.d, self.d))
        self.f_dst = ad.reshape(ad.take(self.maps, [1], axis=1), (e, self.d, self.d))
        gram_src = ad.matmul(ad.transpose(self.f_src), self.f_src)
        gram_dst = ad.matmul(ad.transpose(self.f_dst), self.f_dst)
        degree = ad.index_add(gram_src, self.src, n) + ad.index_add(gram_dst, self.dst, n)
        self.dinv = ad.sym_inv_sqrt(degree, eps)

    @classmethod
    def from_sheaf(cls, sheaf, eps=1e-8):
        src, dst = sheaf.graph.edge_index()
        return cls(ad.Tensor(sheaf.maps), src, dst, sheaf.graph.n, eps)

    def _check(self, X):
        if X.ndim < 2 or X.shape[-2] != self.n or X.shape[-1] != self.d:
            raise ContractError(f"features must be (..., {self.n}, {self.d}), got {X.shape}")

    def restrict(self, X):
        """Per-edge restricted features (F_u x_u, F_v x_v), each (..., E, d)."""
        X = ad.as_tensor(X)
        self._check(X)
        col = ad.reshape(X, X.shape + (1,))
        xs = ad.take(col, self.src, axis=-3)
        xd = ad.take(col, self.dst, axis=-3)
        ps = ad.matmul(self.f_src, xs)
        pd = ad.matmul(self.f_dst, xd)
        shape = pd.shape[:-1]
        return ad.reshape(ps, shape), ad.reshape(pd, shape)

    def laplacian_apply(self, X):
        """L_F X for features (..., n, d)."""
        X = ad.as_tensor(X)
        self._check(X)
        col = ad.reshape(X, X.shape + (1,))
        return ad.reshape(self._lap_col(col), X.shape)

    def _lap_col(self, col):
        xs = ad.take(col, self.src, axis=-3)
        xd = ad.take(col, self.dst, axis=-3)
        diff = ad.matmul(self.f_src, xs) - ad.matmul(self.f_dst, xd)
        back_src = ad.matmul(ad.transpose(self.f_src), diff)
        back_dst = ad.matmul(ad.transpose(self.f_dst), diff)
        return ad.index_add(back_src, self.src, self.n, axis=-3) - ad.index_add(back_dst, self.dst, self.n, axis=-3)

    def apply(self, X):
        """Delta_F X = D^{-1/2} L_F D^{-1/2} X for features (..., n, d)."""
        X = ad.as_tensor(X)
        self._check(X)
        col = ad.reshape(X, X.shape + (1,))
        z = ad.matmul(self.dinv, col)
        return ad.reshape(ad.matmul(self.dinv, self._lap_col(z)), X.shape)

    def dense(self):
        """Materialised nd x nd normalised Laplacian (no gradients)."""
        g = StalkGraph(self.n, tuple(zip(self.src.tolist(), self.dst.tolist())), self.d)
        return normalize_laplacian(assemble_sheaf_laplacian(CellularSheaf(g, self.maps.data))).to_dense()


ACTIVATIONS = {
    "relu": ad.relu,
    "sigmoid": ad.sigmoid,
    "identity": lambda x: x,
    None: lambda x: x,
}


def sheaf_gcn_layer(X, sheaf, W, activation="relu"):
    """sigma((I - Delta_F) X W).

    ``sheaf`` is a :class:`SheafOperator` or a :class:`CellularSheaf`; the
    stalk dimension must equal the input width.
    """
    op = sheaf if isinstance(sheaf, SheafOperator) else SheafOperator.from_sheaf(sheaf)
    X, W = ad.as_tensor(X), ad.as_tensor(W)
    if X.shape[-1] != op.d:
        raise ContractError(f"input width {X.shape[-1]} differs from stalk dimension {op.d}")
    if W.ndim != 2 or W.shape[0] != X.shape[-1]:
        raise ContractError(f"weight shape {W.shape} does not accept width {X.shape[-1]}")
    try:
        act = ACTIVATIONS[activation]
    except KeyError:
        raise ContractError(f"unknown activation '{activation}'") from None
    return act(ad.matmul(X - op.apply(X), W))
