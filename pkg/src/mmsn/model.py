"""The multimodal sheaf network: parameters, forward pass and loss terms."""
from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import atomic_write
from .encoder import EncoderInputs
from .errors import ConfigError, ContractError, NumericError, ParseError
from .fusion import (LatentGraph, fuse_modalities, init_latent_graph, latent_operator,
                     project_to_latent, readout, sheaf_diffuse, soft_assign)
from .reconstruction import aggregate_edge_stalks, recon_loss, reconstruct_missing

NUM_LABELS = 4
IMPUTATIONS = ("reconstruct", "zero")


@dataclass
class ModelConfig:
    latent_nodes: int = 16
    dim: int = 32
    tau: float = 0.2
    layers: int = 2
    imputation: str = "reconstruct"
    eps: float = 1e-8

    def validate(self):
        if self.latent_nodes < 2:
            raise ConfigError("latent_nodes must be >= 2")
        if self.dim < 1:
            raise ConfigError("dim must be >= 1")
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if self.tau < -1:
            raise ConfigError("tau must be >= -1")
        if self.imputation not in IMPUTATIONS:
            raise ConfigError(f"imputation must be one of {IMPUTATIONS}")
        if not self.eps > 0:
            raise ConfigError("eps must be positive")
        return self

    @classmethod
    def from_dict(cls, obj):
        unknown = set(obj) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**obj).validate()


@dataclass
class LossWeights:
    classification: float = 1.0
    recon: float = 0.05
    consistency: float = 0.1

    def __post_init__(self):
        vals = (self.classification, self.recon, self.consistency)
        if any(v < 0 for v in vals) or not any(v > 0 for v in vals):
            raise ConfigError("loss weights must be nonnegative and not all zero")

    @classmethod
    def from_seq(cls, seq):
        if len(seq) != 3:
            raise ConfigError("expected three loss weights")
        return cls(*map(float, seq))


@dataclass
class PreparedPatient:
    """Encoder inputs for one patient; ``histo`` is None when withheld."""

    patient_id: str
    labels: np.ndarray
    mri: EncoderInputs
    histo: EncoderInputs | None

    @classmethod
    def from_sample(cls, p):
        return cls(p.patient_id, np.asarray(p.labels, dtype=np.float64),
                   EncoderInputs.from_graph(p.mri), EncoderInputs.from_graph(p.histo))

    def without_histo(self):
        return PreparedPatient(self.patient_id, self.labels, self.mri, None)


@dataclass
class ForwardOutput:
    logits: ad.Tensor
    embeddings: ad.Tensor
    nodes: ad.Tensor
    masked_index: list
    reconstructed: ad.Tensor | None
    assignments: list


@dataclass
class LossParts:
    classification: ad.Tensor
    recon: ad.Tensor
    consistency: ad.Tensor
    total: ad.Tensor

    def values(self):
        return {k: getattr(self, k).item() for k in ("classification", "recon", "consistency", "total")}


def classification_head(embeddings, W, b):
    """Linear map from the 2d patient embedding to four subtype logits."""
    return ad.matmul(embeddings, W) + b


def classification_loss(logits, targets):
    return ad.bce_with_logits(logits, targets)


def consistency_loss(nodes, operator):
    """Mean over edges (and patients) of ||rho_u h_u - rho_v h_v||^2."""
    ps, pd = operator.restrict(nodes)
    n_edges = ps.shape[-2]
    if n_edges == 0:
        return ad.Tensor(0.0)
    batch = int(np.prod(ps.shape[:-2])) if ps.ndim > 2 else 1
    diff = ps - pd
    return ad.sum_(diff * diff) / (n_edges * batch)


def total_loss(parts, w):
    """lambda_1 L_cls + lambda_2 L_recon + lambda_3 L_cons."""
    cls_, rec, con = (ad.as_tensor(x) for x in parts)
    for name, t in (("classification", cls_), ("recon", rec), ("consistency", con)):
        if not np.all(np.isfinite(t.data)):
            raise NumericError(f"{name} loss is not finite")
    return cls_ * w.classification + rec * w.recon + con * w.consistency


class MMSN:
    """Model state: configuration, frozen latent topology and trainable parameters."""

    def __init__(self, cfg, d_mri, d_hist, rng, latent=None):
        self.cfg = cfg.validate()
        self.d_mri = d_mri
        self.d_hist = d_hist
        self.latent = latent if latent is not None else init_latent_graph(cfg.latent_nodes, cfg.dim, cfg.tau, rng)
        self.params = ad.ParamStore()
        self._init_params(rng)

    def _init_params(self, rng):
        d, n = self.cfg.dim, self.cfg.latent_nodes
        P = self.params
        P.add("enc.mri.W", ad.glorot_uniform(rng, (self.d_mri, d)))
        P.add("enc.histo.W", ad.glorot_uniform(rng, (self.d_hist, d)))
        for m in ("mri", "histo"):
            P.add(f"assign.{m}.W1", ad.glorot_uniform(rng, (d, d)))
            P.add(f"assign.{m}.b1", np.zeros(d))
            P.add(f"assign.{m}.W2", ad.glorot_uniform(rng, (d, n)))
            P.add(f"assign.{m}.b2", np.zeros(n))
        P.add("latent.h", self.latent.init_features.copy())
        P.add("latent.rho", ad.glorot_uniform(rng, (self.latent.num_edges, 2, d, d)))
        for i in range(self.cfg.layers):
            P.add(f"diffuse.W{i}", ad.glorot_uniform(rng, (d, d)))
        P.add("recon.W1", ad.glorot_uniform(rng, (d, d)))
        P.add("recon.b1", np.zeros(d))
        P.add("recon.W2", ad.glorot_uniform(rng, (d, d)))
        P.add("recon.b2", np.zeros(d))
        P.add("head.W", ad.glorot_uniform(rng, (2 * d, NUM_LABELS)))
        P.add("head.b", np.zeros(NUM_LABELS))

    # -- pieces ----------------------------------------------------------
    def _layers(self, prefix, count=2):
        P = self.params
        return [(P[f"{prefix}.W{i}"], P[f"{prefix}.b{i}"]) for i in range(1, count + 1)]

    @property
    def diffusion_weights(self):
        return [self.params[f"diffuse.W{i}"] for i in range(self.cfg.layers)]

    def operator(self):
        return latent_operator(self.latent, self.params["latent.rho"], self.cfg.eps)

    def encode(self, inputs, modality):
        return inputs.encode(self.params[f"enc.{modality}.W"])

    def assign(self, x, modality):
        return soft_assign(x, self._layers(f"assign.{modality}"))

    def project(self, inputs, modality):
        """Encoder output, assignment and latent projection for one modality."""
        x = self.encode(inputs, modality)
        P = self.assign(x, modality)
        return x, P, project_to_latent(P, x)

    def diffuse(self, X, op):
        return sheaf_diffuse(X, op, self.diffusion_weights)

    # -- forward -----------------------------------------------------------
    def forward(self, views, op=None):
        """Logits and embeddings for patients; a view with ``histo=None`` is masked.

        Masked patients are completed either by the reconstruction path
        (diffuse with MRI only, aggregate edge stalks, MLP_recon) or by zeros.
        """
        if not views:
            raise ContractError("empty batch")
        op = op or self.operator()
        h = self.params["latent.h"]
        proj_mri, proj_hist, assignments = [], [], []
        for v in views:
            _, Pm, Xm = self.project(v.mri, "mri")
            proj_mri.append(Xm)
            if v.histo is not None:
                _, Ph, Xh = self.project(v.histo, "histo")
                proj_hist.append(Xh)
                assignments.append((Pm, Ph))
            else:
                proj_hist.append(None)
                assignments.append((Pm, None))
        masked = [i for i, v in enumerate(views) if v.histo is None]
        recon = None
        if masked and self.cfg.imputation == "reconstruct":
            observed = ad.stack([fuse_modalities(h, proj_mri[i]) for i in masked])
            nodes_obs, _ = self.diffuse(observed, op)
            recon = reconstruct_missing(aggregate_edge_stalks(nodes_obs, op), self._layers("recon"))
            for j, i in enumerate(masked):
                proj_hist[i] = ad.reshape(ad.take(recon, [j], axis=0), recon.shape[1:])
        fused = ad.stack([fuse_modalities(h, proj_mri[i], proj_hist[i]) for i in range(len(views))])
        nodes, edges = self.diffuse(fused, op)
        emb = readout(nodes, edges)
        logits = classification_head(emb, self.params["head.W"], self.params["head.b"])
        return ForwardOutput(logits, emb, nodes, masked, recon, assignments)

    def recon_targets(self, patients, masked):
        """Latent projections P^T x of the withheld histopathology graphs."""
        return ad.stack([self.project(patients[i].histo, "histo")[2] for i in masked])

    def loss(self, patients, masks=None, weights=LossWeights()):
        """Total loss over a batch; ``masks[i]`` withholds patient i's histopathology."""
        masks = [False] * len(patients) if masks is None else list(masks)
        views = [p.without_histo() if m else p for p, m in zip(patients, masks)]
        op = self.operator()
        out = self.forward(views, op)
        labels = np.stack([p.labels for p in patients])
        l_cls = classification_loss(out.logits, labels)
        if out.reconstructed is not None:
            targets = self.recon_targets(patients, out.masked_index)
            l_rec = recon_loss(out.reconstructed, targets) / len(out.masked_index)
        else:
            l_rec = ad.Tensor(0.0)
        l_con = consistency_loss(out.nodes, op)
        return LossParts(l_cls, l_rec, l_con, total_loss((l_cls, l_rec, l_con), weights)), out

    def predict(self, views):
        with ad.no_grad():
            out = self.forward(views)
        return (out.logits.data > 0).astype(np.int64), out

    # -- persistence ---------------------------------------------------------
    def meta_vector(self):
        c = self.cfg
        return np.array([self.d_mri, self.d_hist, c.latent_nodes, c.dim, c.layers,
                         IMPUTATIONS.index(c.imputation), c.eps, c.tau], dtype=np.float64)

    def save(self, path):
        tensors = [("meta.config", self.meta_vector()), ("latent.edges", self.latent.edges.astype(np.float64)),
                   ("latent.init_features", self.latent.init_features)]
        tensors += list(self.params.state().items())
        write_params(path, tensors)

    @classmethod
    def load(cls, path):
        tensors = dict(read_params(path))
        try:
            meta = tensors.pop("meta.config")
            edges = tensors.pop("latent.edges").astype(np.intp).reshape(-1, 2)
            init = tensors.pop("latent.init_features")
        except KeyError as exc:
            raise ParseError(f"{path}: missing tensor {exc}") from None
        d_mri, d_hist, n, d, layers, imp = (int(round(x)) for x in meta[:6])
        cfg = ModelConfig(latent_nodes=n, dim=d, layers=layers, imputation=IMPUTATIONS[imp],
                          eps=float(meta[6]), tau=float(meta[7]))
        latent = LatentGraph(n, d, edges, init, 0.5 * (init[edges[:, 0]] + init[edges[:, 1]]))
        model = cls(cfg, d_mri, d_hist, np.random.default_rng(0), latent=latent)
        model.params.load_state(tensors)
        return model

    def snapshot(self):
        return self.params.state()

    def restore(self, state):
        self.params.load_state(state)


# -- params.bin ----------------------------------------------------------------
PARAMS_MAGIC = b"MMSN"
PARAMS_VERSION = 1


def write_params(path, tensors):
    """Little-endian dump: magic, u32 version, u32 count, then per tensor
    u32 name length, UTF-8 name, u32 ndim, u32 dims, float64 values."""
    chunks = [PARAMS_MAGIC, struct.pack("<II", PARAMS_VERSION, len(tensors))]
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    atomic_write(path, b"".join(chunks))


def read_params(path):
    buf = Path(path).read_bytes()
    if buf[:4] != PARAMS_MAGIC:
        raise ParseError(f"{path}: not an MMSN parameter file")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise ParseError(f"{path}: truncated parameter file")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != PARAMS_VERSION:
        raise ParseError(f"{path}: unsupported format version {version}")
    out = []
    for _ in range(count):
        (nlen,) = take("<I")
        if pos + nlen > len(buf):
            raise ParseError(f"{path}: truncated parameter file")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I") if ndim else ()
        n = int(math.prod(shape))
        if pos + 8 * n > len(buf):
            raise ParseError(f"{path}: truncated parameter file")
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
        out.append((name, arr))
    return out


def config_dict(cfg):
    return asdict(cfg)
