"""Command-line entry point: ``mmsn <command> [options]``.

Exit codes: 0 ok, 2 configuration error, 3 I/O or input-file error,
4 numeric divergence, 5 failed check.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path


from . import __version__
from .data import GeneratorConfig, atomic_write, load_cohort, stream, validate_cohort, write_cohort
from .diagnostics import gradcheck_model, latent_spectrum, spectrum_csv
from .errors import ConfigError, NumericError, ParseError, ValidationError
from .model import MMSN, PreparedPatient
from .reconstruction import mask_modality
from .train import METRIC_NAMES, TrainConfig, cross_validate, embeddings, evaluate, write_artifacts

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4, 5

log = logging.getLogger("mmsn")


@dataclass
class RunConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str | None = None

    @classmethod
    def from_dict(cls, obj):
        if not isinstance(obj, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = set(obj) - {"generator", "train", "output_dir"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            gen = GeneratorConfig.from_dict(obj.get("generator", {}))
            tr = TrainConfig.from_dict(obj.get("train", {}))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        return cls(gen, tr, obj.get("output_dir"))

    @classmethod
    def load(cls, path):
        if path is None:
            return cls()
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON at line {exc.lineno}: {exc.msg}") from None
        return cls.from_dict(obj)

    def to_dict(self):
        return {"generator": asdict(self.generator), "train": self.train.to_dict(), "output_dir": self.output_dir}


def _setup_logging(out_dir=None, verbose=False):
    root = logging.getLogger("mmsn")
    root.handlers.clear()
    root.setLevel(logging.DEBUG)
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.DEBUG if verbose else logging.WARNING)
    console.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    root.addHandler(console)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        fh = logging.FileHandler(os.path.join(out_dir, "run.log"), encoding="utf-8")
        fh.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
        fh.setLevel(logging.INFO)
        root.addHandler(fh)


def _close_logging():
    for h in list(logging.getLogger("mmsn").handlers):
        h.close()
        logging.getLogger("mmsn").removeHandler(h)


def _emit(text, out=None):
    if out:
        atomic_write(out, text)
    else:
        sys.stdout.write(text)


def _load_data(path):
    manifest, samples = load_cohort(path)
    return manifest, samples, [PreparedPatient.from_sample(s) for s in samples]


def _load_model(path):
    try:
        return MMSN.load(path)
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from None


def parse_grid(text):
    try:
        grid = [float(x) for x in text.split(",")]
    except ValueError:
        raise ConfigError(f"bad p-grid {text!r}") from None
    if not grid or any(not 0.0 <= p <= 1.0 for p in grid):
        raise ConfigError(f"p-grid values must lie in [0, 1]: {text!r}")
    return grid


def _mask(patients, p, seed):
    return mask_modality([x.patient_id for x in patients], p, stream(seed, "masking", 2))


# -- commands ------------------------------------------------------------------
def cmd_synth(args):
    run = RunConfig.load(args.config)
    path = write_cohort(args.out, run.generator, args.seed)
    print(f"wrote {run.generator.n_patients} patients and {path}")
    return EXIT_OK


def cmd_validate(args):
    report = validate_cohort(args.data)
    for rel, fld in sorted(report.results.items()):
        status = "ok" if fld is None else f"FAIL {fld}: {report.messages[rel]}"
        print(f"{rel}: {status}")
    total = max(report.n_valid, 1)
    summary = ", ".join(f"{k}={v} ({100.0 * v / total:.1f}%)" for k, v in report.label_counts.items())
    print(f"{report.n_valid}/{len(report.results)} valid; labels: {summary}")
    return EXIT_OK if report.ok else EXIT_CHECK


def cmd_train(args):
    run = RunConfig.load(args.config)
    if args.seed is not None:
        run.train.seed = args.seed
    out = args.out or run.output_dir
    if not out:
        raise ConfigError("no output directory (use --out or output_dir)")
    run.output_dir = str(out)
    _setup_logging(out, args.verbose)
    _, samples, _ = _load_data(args.data)
    log.info("training %d patients, %d folds, seed %d", len(samples), run.train.folds, run.train.seed)
    folds = cross_validate(samples, run.train)
    doc = write_artifacts(out, folds, run.train, run.to_dict())
    mean = doc["mean"]["validation"]
    print("validation (per-fold mean): " + ", ".join(f"{k}={mean[k]:.2f}" for k in METRIC_NAMES))
    return EXIT_OK


def cmd_eval(args):
    _, _, patients = _load_data(args.data)
    model = _load_model(args.params)
    mask = _mask(patients, args.p, args.seed) if args.p > 0 else None
    metrics, _ = evaluate(model, patients, mask)
    _emit(json.dumps(metrics, indent=2, sort_keys=True) + "\n", args.out)
    return EXIT_OK


def cmd_reconstruct_eval(args):
    grid = parse_grid(args.p_grid)
    _, _, patients = _load_data(args.data)
    model = _load_model(args.params)
    cols = ["p", *METRIC_NAMES] + (["recon_loss"] if args.recon_stats else [])
    rows = [",".join(cols)]
    for p in grid:
        mask = _mask(patients, p, args.seed)
        metrics, _ = evaluate(model, patients, mask)
        vals = [p] + [metrics[k] for k in METRIC_NAMES]
        if args.recon_stats:
            # scored against the withheld graphs after prediction is done
            masks = [mask.is_masked(x.patient_id) for x in patients]
            vals.append(model.loss(patients, masks)[0].recon.item() if any(masks) else 0.0)
        rows.append(",".join(f"{v:.17g}" for v in vals))
    _emit("\n".join(rows) + "\n", args.out)
    return EXIT_OK


def cmd_gradcheck(args):
    report, used = gradcheck_model(args.seed, h=args.h, tol=args.tol)
    for line in report.lines():
        print(line)
    print(f"seed {used}: {'PASS' if report.ok else 'FAIL'} (worst {report.worst:.3e}, tol {args.tol:g})")
    return EXIT_OK if report.ok else EXIT_CHECK


def cmd_spectrum(args):
    if args.params:
        model = _load_model(args.params)
    else:
        run = RunConfig.load(args.config)
        model = MMSN(run.train.model, run.generator.d_mri, run.generator.d_hist, stream(args.seed, "init", 0))
    _emit("eigenvalue\n" + spectrum_csv(latent_spectrum(model)), args.out)
    return EXIT_OK


def cmd_export_embeddings(args):
    _, _, patients = _load_data(args.data)
    model = _load_model(args.params)
    mask = _mask(patients, args.p, args.seed) if args.p > 0 else None
    emb = embeddings(model, patients, mask)
    header = ["patient_id"] + [f"h{i}" for i in range(emb.shape[1])]
    lines = [",".join(header)]
    lines += [",".join([p.patient_id] + [f"{v:.17g}" for v in row]) for p, row in zip(patients, emb)]
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------
def build_parser():
    ap = argparse.ArgumentParser(prog="mmsn", description="Multimodal sheaf network on patient graphs.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic cohort")
    s.add_argument("--config", help="run config JSON (generator section is used)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("validate", help="validate every file of a cohort")
    s.add_argument("--data", required=True, help="manifest.json")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("train", help="k-fold cross-validated training")
    s.add_argument("--data", required=True, help="manifest.json")
    s.add_argument("--config", help="run config JSON")
    s.add_argument("--out", help="run directory (overrides output_dir)")
    s.add_argument("--seed", type=int, help="overrides train.seed")
    s.add_argument("-v", "--verbose", action="store_true")
    s.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "metrics of one parameter file"),
                                 ("export-embeddings", cmd_export_embeddings, "patient embeddings as CSV")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--data", required=True)
        s.add_argument("--params", required=True)
        s.add_argument("--p", type=float, default=0.0, help="histopathology dropout rate at evaluation")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--out")
        s.set_defaults(func=func)

    s = sub.add_parser("reconstruct-eval", help="metrics across histopathology dropout rates")
    s.add_argument("--data", required=True)
    s.add_argument("--params", required=True)
    s.add_argument("--p-grid", default="0,0.25,0.5,0.75,1")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--recon-stats", action="store_true", help="append mean reconstruction loss per row")
    s.add_argument("--out")
    s.set_defaults(func=cmd_reconstruct_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check on a toy batch")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--h", type=float, default=1e-5)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("spectrum", help="eigenvalues of the latent normalised sheaf Laplacian")
    s.add_argument("--params", help="params.bin (a fresh model is used when omitted)")
    s.add_argument("--config")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_spectrum)
    return ap


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, ParseError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_IO
    finally:
        _close_logging()


if __name__ == "__main__":
    sys.exit(main())
