"""Patient-graph JSON files, cohort manifests and the synthetic cohort generator.

Generated cohorts follow one latent story per patient: a 4-bit subtype label
picks label-conditioned region prototypes in R^16, and both modalities see the
same prototypes through their own fixed linear map plus Gaussian noise. The
two graphs therefore share region structure by construction.
"""
from __future__ import annotations

import json
import math
import os
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .encoder import ModalityGraph
from .errors import ConfigError, MMSNError, ParseError, ValidationError

SUBTYPES = ("classical", "neural", "proneural", "mesenchymal")
PROTOTYPE_DIM = 16
MANIFEST_FORMAT = "mmsn-cohort"
MANIFEST_VERSION = 1


def stream(seed, name, *keys):
    """Independent numpy Generator for a named sub-stream of ``seed``."""
    words = [int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))]
    words += [int(k) & 0xFFFFFFFF for k in keys]
    return np.random.default_rng(np.random.SeedSequence(words))


@dataclass
class PatientSample:
    patient_id: str
    mri: ModalityGraph
    histo: ModalityGraph
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)

    def validate(self):
        if not self.patient_id:
            raise ValidationError("patient_id", "must be a nonempty string")
        if self.labels.shape != (4,) or not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValidationError("labels", "expected four 0/1 entries")
        if self.labels.sum() == 0:
            raise ValidationError("labels", "at least one subtype must be set")
        self.mri.validate()
        self.histo.validate()
        if self.mri.modality != "mri" or self.histo.modality != "histo":
            raise ValidationError("graph.modality", "modality tags do not match their slots")
        return self


# -- serialisation ---------------------------------------------------------
def _fmt(obj):
    """Deterministic JSON with floats written at 17 significant digits."""
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_fmt(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in obj) + "]"
    if isinstance(obj, np.ndarray):
        return _fmt(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        if not math.isfinite(obj):
            raise ValueError("non-finite float cannot be serialised")
        return format(float(obj), ".17g")
    if obj is None:
        return "null"
    return json.dumps(obj)


def dumps(obj):
    return _fmt(obj) + "\n"


def atomic_write(path, data):
    """Write ``data`` (str or bytes) to a temp file then rename over ``path``."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    mode = "wb" if isinstance(data, bytes) else "w"
    kwargs = {} if isinstance(data, bytes) else {"encoding": "utf-8", "newline": "\n"}
    with open(tmp, mode, **kwargs) as fh:
        fh.write(data)
    os.replace(tmp, path)


def graph_to_dict(g):
    return {
        "nodes": [{"id": i, "region": r, "features": g.features[i]} for i, r in enumerate(g.regions)],
        "edges": [[int(u), int(v)] for u, v in g.edges],
    }


def patient_to_dict(p):
    return {
        "patient_id": p.patient_id,
        "labels": [int(x) for x in p.labels],
        "mri": graph_to_dict(p.mri),
        "histo": graph_to_dict(p.histo),
    }


def save_patient(p, path):
    atomic_write(path, dumps(patient_to_dict(p)))


def _graph_from_dict(obj, modality):
    if not isinstance(obj, dict):
        raise ValidationError(modality, "graph must be an object")
    nodes = obj.get("nodes")
    if not isinstance(nodes, list):
        raise ValidationError(f"{modality}.nodes", "missing node list")
    edges = obj.get("edges", [])
    if not isinstance(edges, list):
        raise ValidationError(f"{modality}.edges", "edges must be a list")
    feats, regions = [], []
    for i, node in enumerate(nodes):
        if not isinstance(node, dict):
            raise ValidationError("node", f"{modality} node {i} is not an object")
        if node.get("id") != i:
            raise ValidationError("node.id", f"{modality} node ids must be 0..n-1 in order")
        region = node.get("region")
        if not isinstance(region, str) or not region:
            raise ValidationError("node.region", f"{modality} node {i} has no region label")
        f = node.get("features")
        if not isinstance(f, list) or not f or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in f):
            raise ValidationError("node.features", f"{modality} node {i} features must be a nonempty number list")
        if feats and len(f) != len(feats[0]):
            raise ValidationError("node.features", f"{modality} feature lengths are not uniform")
        feats.append(f)
        regions.append(region)
    for e in edges:
        if not (isinstance(e, list) and len(e) == 2 and all(isinstance(x, int) and not isinstance(x, bool) for x in e)):
            raise ValidationError("edge", f"{modality} edges must be [u, v] integer pairs")
    features = np.asarray(feats, dtype=np.float64) if feats else np.zeros((0, 0))
    return ModalityGraph(modality, features, regions, np.asarray(edges, dtype=np.int64).reshape(-1, 2))


def patient_from_dict(obj):
    if not isinstance(obj, dict):
        raise ValidationError("patient", "top level must be an object")
    for key in ("patient_id", "labels", "mri", "histo"):
        if key not in obj:
            raise ValidationError(key, "missing field")
    labels = obj["labels"]
    if not isinstance(labels, list) or len(labels) != 4 or any(x not in (0, 1) or isinstance(x, bool) for x in labels):
        raise ValidationError("labels", "expected four 0/1 entries")
    pid = obj["patient_id"]
    if not isinstance(pid, str):
        raise ValidationError("patient_id", "must be a string")
    p = PatientSample(pid, _graph_from_dict(obj["mri"], "mri"), _graph_from_dict(obj["histo"], "histo"), labels)
    return p.validate()


def load_patient(path):
    """Parse and validate one patient file."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return patient_from_dict(obj)


# -- generator -------------------------------------------------------------
@dataclass
class GeneratorConfig:
    n_patients: int = 30
    n_regions: int = 4
    nodes_per_region: int = 6
    d_mri: int = 24
    d_hist: int = 40
    noise: float = 0.05
    prototype_noise: float = 0.05
    knn: int = 2
    label_prior: float = 0.4

    def validate(self):
        if self.n_patients < 1:
            raise ConfigError("n_patients must be >= 1")
        if self.n_regions < 1:
            raise ConfigError("n_regions must be >= 1")
        if self.nodes_per_region < 1:
            raise ConfigError("nodes_per_region must be >= 1")
        if self.d_mri < 1 or self.d_hist < 1:
            raise ConfigError("feature dimensions must be >= 1")
        if self.noise < 0 or self.prototype_noise < 0:
            raise ConfigError("noise levels must be >= 0")
        if self.knn < 0:
            raise ConfigError("knn must be >= 0")
        if not 0.0 < self.label_prior <= 1.0:
            raise ConfigError("label_prior must lie in (0, 1]")
        return self

    @classmethod
    def from_dict(cls, obj):
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown generator keys: {sorted(unknown)}")
        return cls(**obj).validate()


def label_marginal(prior):
    """P(bit = 1) when bits are i.i.d. Bernoulli(prior) conditioned on not all zero."""
    return prior / (1.0 - (1.0 - prior) ** len(SUBTYPES))


@dataclass
class CohortModel:
    """Cohort-level latent parameters shared by every patient."""

    class_means: np.ndarray  # (4, K, 16)
    maps: dict               # modality -> (d_m, 16)


def cohort_model(cfg, seed):
    rng = stream(seed, "generator", 0xC0)
    means = rng.standard_normal((len(SUBTYPES), cfg.n_regions, PROTOTYPE_DIM))
    maps = {
        "mri": rng.normal(0.0, 1.0 / math.sqrt(PROTOTYPE_DIM), (cfg.d_mri, PROTOTYPE_DIM)),
        "histo": rng.normal(0.0, 1.0 / math.sqrt(PROTOTYPE_DIM), (cfg.d_hist, PROTOTYPE_DIM)),
    }
    return CohortModel(means, maps)


def sample_labels(rng, prior):
    while True:
        y = (rng.random(len(SUBTYPES)) < prior).astype(np.int64)
        if y.any():
            return y


def knn_edges(features, regions, k):
    """Complete graphs inside each region plus k nearest cross-region neighbours per node."""
    n = len(regions)
    regions = np.asarray(regions)
    edges = set()
    for i in range(n):
        for j in range(i + 1, n):
            if regions[i] == regions[j]:
                edges.add((i, j))
    if k > 0:
        dist = ((features[:, None, :] - features[None, :, :]) ** 2).sum(axis=-1)
        for i in range(n):
            others = np.flatnonzero(regions != regions[i])
            if not len(others):
                continue
            order = others[np.argsort(dist[i, others], kind="stable")][:k]
            for j in order:
                edges.add((min(i, int(j)), max(i, int(j))))
    return np.asarray(sorted(edges), dtype=np.int64).reshape(-1, 2)


def generate_patient(index, cfg, model, seed):
    rng = stream(seed, "generator", 1, index)
    y = sample_labels(rng, cfg.label_prior)
    protos = np.einsum("c,crk->rk", y.astype(np.float64), model.class_means)
    protos = protos + cfg.prototype_noise * rng.standard_normal(protos.shape)
    graphs = {}
    for modality in ("mri", "histo"):
        A = model.maps[modality]
        regions = [f"R{r}" for r in range(cfg.n_regions) for _ in range(cfg.nodes_per_region)]
        clean = np.repeat(protos @ A.T, cfg.nodes_per_region, axis=0)
        feats = clean + cfg.noise * rng.standard_normal(clean.shape)
        graphs[modality] = ModalityGraph(modality, feats, regions, knn_edges(feats, regions, cfg.knn))
    return PatientSample(f"P{index:03d}", graphs["mri"], graphs["histo"], y)


def generate_synthetic_cohort(cfg, seed):
    """In-memory cohort of ``cfg.n_patients`` patients, deterministic in ``seed``."""
    cfg.validate()
    model = cohort_model(cfg, seed)
    return [generate_patient(i, cfg, model, seed) for i in range(cfg.n_patients)]


def write_cohort(out_dir, cfg, seed):
    """Generate a cohort and write patient files plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    (out / "patients").mkdir(parents=True, exist_ok=True)
    patients = generate_synthetic_cohort(cfg, seed)
    rel = []
    for p in patients:
        name = f"patients/{p.patient_id}.json"
        save_patient(p, out / name)
        rel.append(name)
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "seed": int(seed),
        "generator": asdict(cfg),
        "d_mri": cfg.d_mri,
        "d_hist": cfg.d_hist,
        "patients": rel,
    }
    path = out / "manifest.json"
    atomic_write(path, dumps(manifest))
    return path


def read_manifest(path):
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: malformed JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(obj, dict) or obj.get("format") != MANIFEST_FORMAT:
        raise ValidationError("manifest.format", f"expected format '{MANIFEST_FORMAT}'")
    if not isinstance(obj.get("patients"), list) or not obj["patients"]:
        raise ValidationError("manifest.patients", "patient list missing or empty")
    return obj


def load_cohort(manifest_path):
    """Load every patient referenced by a manifest; raises on the first invalid file."""
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    patients = [load_patient(manifest_path.parent / rel) for rel in manifest["patients"]]
    _check_dims(manifest, patients)
    return manifest, patients


def _check_dims(manifest, patients):
    for p in patients:
        if manifest.get("d_mri") is not None and p.mri.dim != manifest["d_mri"]:
            raise ValidationError("mri.features", f"{p.patient_id}: width {p.mri.dim} != {manifest['d_mri']}")
        if manifest.get("d_hist") is not None and p.histo.dim != manifest["d_hist"]:
            raise ValidationError("histo.features", f"{p.patient_id}: width {p.histo.dim} != {manifest['d_hist']}")


@dataclass
class CohortReport:
    results: dict = field(default_factory=dict)   # relative path -> None or failing field
    messages: dict = field(default_factory=dict)
    label_counts: dict = field(default_factory=dict)
    n_valid: int = 0

    @property
    def ok(self):
        return all(v is None for v in self.results.values())

    def failures(self):
        return {k: v for k, v in self.results.items() if v is not None}


def validate_cohort(manifest_path):
    """Check every referenced file and summarise the label distribution."""
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    report = CohortReport(label_counts={s: 0 for s in SUBTYPES})
    for rel in manifest["patients"]:
        try:
            p = load_patient(manifest_path.parent / rel)
            _check_dims(manifest, [p])
        except ValidationError as exc:
            report.results[rel] = exc.field
            report.messages[rel] = str(exc)
            continue
        except (ParseError, OSError, MMSNError) as exc:
            report.results[rel] = "file"
            report.messages[rel] = str(exc)
            continue
        report.results[rel] = None
        report.n_valid += 1
        for s, bit in zip(SUBTYPES, p.labels):
            report.label_counts[s] += int(bit)
    return report
