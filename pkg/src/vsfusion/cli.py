"""Command-line entry point: synth, train, eval, ablate, dump-features.

Every science-bearing setting lives in one JSON run config. Runs land in
``<out>/<hash>`` where the hash covers the canonical resolved config, so an
identical rerun writes identical reports to the same place.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


from . import model as M
from .data import DatasetError, SynthSpec, load_dataset, synthesize_dataset
from .metrics import evaluate
from .preprocess import PrepConfig, Preprocessor
from .report import (DEFAULT_ABLATION, AblationRow, ReportError, ablation_suite, canonical_json,
                     emit_report, write_features, write_json)
from .training import TrainConfig, TrainingDiverged, run_cv

logger = logging.getLogger("vsfusion")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
RUN_SCHEMA = "vsfusion.run/1"
# architecture knobs a config may set; data-dependent dims are filled from the dataset
MODEL_KEYS = ("d_model", "conv_filters", "n_heads", "key_dim", "value_dim", "hidden_units", "l2")


class ConfigError(ValueError):
    pass


class UsageError(ConfigError):
    pass


# --- run config ----------------------------------------------------------------------

@dataclass
class RunConfig:
    manifest: str = ""
    out: str = "runs"
    seed: int = 7
    modalities: str = "em,ppg,vsi"
    ca: bool = True
    model: dict = field(default_factory=lambda: {k: getattr(M.ModelConfig(), k) for k in MODEL_KEYS})
    train: dict = field(default_factory=lambda: _public(asdict(TrainConfig())))
    preprocess: dict = field(default_factory=lambda: asdict(PrepConfig()))
    cv: dict = field(default_factory=lambda: {"k": 5, "ratio": 0.8, "folds": None})
    ablation: list | None = None
    semantic_variants: dict = field(default_factory=dict)
    base_dir: str = "."

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def model_template(self) -> M.ModelConfig:
        return M.ModelConfig(modalities=self.modalities, cross_attention=self.ca, seed=self.seed,
                             **self.model)

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **self.train)

    def prep_config(self) -> PrepConfig:
        return PrepConfig(**self.preprocess)

    def ablation_rows(self) -> list[AblationRow]:
        if self.ablation is None:
            return list(DEFAULT_ABLATION)
        return [AblationRow.from_dict(d) for d in self.ablation]

    def canonical(self) -> dict:
        """Science-bearing content only: no output location, paths made absolute."""
        d = asdict(self)
        for key in ("out", "base_dir"):
            d.pop(key)
        d["manifest"] = str(self.resolve(self.manifest).resolve())
        d["semantic_variants"] = {k: str(self.resolve(v).resolve()) for k, v in self.semantic_variants.items()}
        d["schema"] = RUN_SCHEMA
        return d

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.canonical()).encode()).hexdigest()[:12]

    def run_dir(self) -> Path:
        return self.resolve(self.out) / self.digest()


def _public(d: dict) -> dict:
    d.pop("seed", None)
    return d


def parse_value(text: str):
    """JSON if it parses (numbers, booleans, null, lists), otherwise the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(doc: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, _, raw = item.partition("=")
    parts = key.strip().split(".")
    node = doc
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"override {key!r}: {p!r} is not a config block")
        node = node[p]
    node[parts[-1]] = parse_value(raw.strip())


def build_run_config(doc: dict, overrides=(), seed: int | None = None, out: str | None = None,
                     base_dir: str = ".") -> RunConfig:
    """Merge defaults, file contents, overrides and flags, then validate everything."""
    merged = asdict(RunConfig())
    merged.pop("base_dir")
    for key, value in doc.items():
        if key not in merged:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(merged[key], dict) and isinstance(value, dict) and key != "semantic_variants":
            merged[key] = {**merged[key], **value}
        else:
            merged[key] = copy.deepcopy(value)
    for item in overrides:
        apply_override(merged, item)
    if seed is not None:
        merged["seed"] = seed
    if out is not None:
        merged["out"] = out
    if isinstance(merged["modalities"], list):
        merged["modalities"] = ",".join(merged["modalities"])
    cfg = RunConfig(**merged, base_dir=base_dir)
    validate_run_config(cfg)
    return cfg


def validate_run_config(cfg: RunConfig) -> None:
    def check_keys(block: str, allowed) -> None:
        extra = set(getattr(cfg, block)) - set(allowed)
        if extra:
            raise ConfigError(f"unknown {block} key(s): {', '.join(sorted(extra))}")

    check_keys("model", MODEL_KEYS)
    check_keys("train", [f.name for f in fields(TrainConfig) if f.name != "seed"])
    check_keys("preprocess", [f.name for f in fields(PrepConfig)])
    check_keys("cv", ("k", "ratio", "folds"))
    if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool) or cfg.seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    if not isinstance(cfg.ca, bool):
        raise ConfigError("ca must be true or false")
    try:
        cfg.model_template().validate()
        cfg.train_config().validate()
        cfg.prep_config().validate()
        rows = cfg.ablation_rows()
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from None
    k, ratio = cfg.cv.get("k"), cfg.cv.get("ratio")
    if not isinstance(k, int) or k < 2:
        raise ConfigError("cv.k must be an integer >= 2")
    if not isinstance(ratio, (int, float)) or not 0 < ratio < 1:
        raise ConfigError("cv.ratio must lie in (0, 1)")
    folds = cfg.cv.get("folds")
    if folds is not None and (not isinstance(folds, list) or any(not isinstance(f, int) or not 0 <= f < k
                                                                 for f in folds) or not folds):
        raise ConfigError(f"cv.folds must be a non-empty list of fold indices in [0, {k})")
    if not cfg.manifest:
        raise ConfigError("no dataset manifest given (set 'manifest' or --override manifest=PATH)")
    if not cfg.resolve(cfg.manifest).is_file():
        raise ConfigError(f"manifest not found: {cfg.resolve(cfg.manifest)}")
    for name, path in cfg.semantic_variants.items():
        if not cfg.resolve(path).is_file():
            raise ConfigError(f"semantic variant {name!r}: table not found: {cfg.resolve(path)}")
    for r in rows:
        if r.semantic_variant is not None and r.semantic_variant not in cfg.semantic_variants:
            raise ConfigError(f"ablation row {r.config_id}: unknown semantic variant {r.semantic_variant!r}")


def load_run_config(args) -> RunConfig:
    doc, base = {}, "."
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        base = str(path.parent)
    return build_run_config(doc, args.override or (), args.seed, args.out, base)


# --- artifacts -----------------------------------------------------------------------

def save_fold(fold_dir: Path, result) -> None:
    pca, scalers = result.preprocessor.to_dicts()
    M.save_params(_mkdir(fold_dir) / "params.json", result.params, result.model_config)
    write_json(fold_dir / "pca.json", pca)
    write_json(fold_dir / "standardizer.json", scalers)
    write_json(fold_dir / "record.json", result.record.to_dict())
    write_json(fold_dir / "eval_val.json", result.val_report.to_dict())
    write_json(fold_dir / "eval_test.json", result.test_report.to_dict())
    if result.resample is not None:
        write_json(fold_dir / "resample.json", result.resample.to_dict())


def _mkdir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ReportError(f"cannot create {path}: {exc.strerror or exc}") from None
    return path


def load_inference(params_path) -> tuple[dict, M.ModelConfig, Preprocessor]:
    """Parameters plus the serialized preprocessing stored beside them."""
    params_path = Path(params_path)
    if not params_path.is_file():
        raise ConfigError(f"missing parameter file {params_path}")
    try:
        params, config = M.load_params(params_path)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{params_path}: {exc}") from None
    docs = {}
    for name in ("pca.json", "standardizer.json"):
        path = params_path.parent / name
        if not path.is_file():
            raise ConfigError(f"missing preprocessing artifact {path}")
        docs[name] = json.loads(path.read_text(encoding="utf-8"))
    return params, config, Preprocessor.from_dicts(docs["pca.json"], docs["standardizer.json"])


def _inference_inputs(manifest, prep: Preprocessor, config: M.ModelConfig):
    dataset = load_dataset(manifest)
    raw = dataset.feature_dims["semantic"]
    if prep.pca is not None and prep.pca.components.shape[1] != raw:
        raise ConfigError(f"manifest semantic width {raw} does not match the stored PCA input "
                          f"width {prep.pca.components.shape[1]}")
    dims = prep.output_dims(dataset)
    for m, want in (("eye", config.eye_dim), ("ppg", config.ppg_dim), ("semantic", config.semantic_dim)):
        if dims[m] != want:
            raise ConfigError(f"manifest {m} width {dims[m]} does not match parameters ({want})")
    if dataset.n_classes != config.n_classes:
        raise ConfigError(f"manifest has {dataset.n_classes} classes, parameters expect {config.n_classes}")
    return dataset, prep.transform(dataset)


# --- commands ------------------------------------------------------------------------

def cmd_synth(args) -> int:
    doc = {}
    if args.config:
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
    flags = {"n_classes": args.classes, "samples_per_class": args.per_class, "separation": args.separation,
             "n_videos": args.videos, "seed": args.seed}
    doc.update({k: v for k, v in flags.items() if v is not None})
    if args.imbalanced:
        try:
            counts = [int(c) for c in args.imbalanced.split(",")]
        except ValueError:
            raise ConfigError(f"--imbalanced expects comma-separated integers, got {args.imbalanced!r}") from None
        doc["class_counts"] = counts
        doc["n_classes"] = len(counts)
    if args.uninformative:
        doc["semantic_informative"] = False
    if args.context_coupling:
        doc["context_coupling"] = True
    for item in args.override or ():
        apply_override(doc, item)
    try:
        spec = SynthSpec(**doc)
        spec.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"synthetic spec: {exc}") from None
    _, manifest = synthesize_dataset(spec, args.out or "synth")
    print(manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args)
    dataset = load_dataset(cfg.resolve(cfg.manifest))
    cv = run_cv(dataset, cfg.model_template(), cfg.train_config(), cfg.prep_config(),
                cfg.cv["k"], cfg.cv["ratio"], cfg.seed, cfg.cv["folds"])
    run_dir = _mkdir(cfg.run_dir())
    write_json(run_dir / "config.json", cfg.canonical())
    write_json(run_dir / "split.json", {"test": list(cv.plan.test),
                                        "folds": [{"train": list(t), "val": list(v)} for t, v in cv.plan.folds]})
    for result in cv.folds:
        save_fold(run_dir / f"fold_{result.fold}", result)
    write_json(run_dir / "aggregate.json", cv.aggregate)
    emit_report([r.test_report for r in cv.folds], run_dir, "report", cv.aggregate["test"])
    print(run_dir)
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.params or not args.manifest:
        raise UsageError("eval needs --params and --manifest")
    params, config, prep = load_inference(args.params)
    dataset, inputs = _inference_inputs(args.manifest, prep, config)
    n = M.count_params(params)
    report = evaluate(M.predict_proba(params, inputs, config), dataset.labels, config.n_classes,
                      param_count=n, param_mb=M.params_megabytes(n), config=config.to_dict())
    out = Path(args.out) if args.out else Path(args.params).parent / "eval"
    paths = emit_report([report], out, "eval")
    print(paths["json"])
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_run_config(args)
    rows = cfg.ablation_rows()
    if not rows:
        raise ConfigError("nothing to run")
    dataset = load_dataset(cfg.resolve(cfg.manifest))
    variants = {name: load_dataset(cfg.resolve(cfg.manifest),
                                   json.loads(cfg.resolve(path).read_text(encoding="utf-8")))
                for name, path in cfg.semantic_variants.items()}
    table = ablation_suite(dataset, rows, cfg.model_template(), cfg.train_config(), cfg.prep_config(),
                           cfg.cv["k"], cfg.cv["ratio"], cfg.seed, cfg.cv["folds"], variants)
    run_dir = _mkdir(cfg.run_dir())
    write_json(run_dir / "config.json", cfg.canonical())
    paths = table.write(run_dir)
    print(paths["csv"])
    return EXIT_OK


def cmd_dump_features(args) -> int:
    if not args.params or not args.manifest:
        raise UsageError("dump-features needs --params and --manifest")
    params, config, prep = load_inference(args.params)
    dataset, inputs = _inference_inputs(args.manifest, prep, config)
    feats = M.extract_features(params, inputs, config)
    out = Path(args.out) if args.out else Path(args.params).parent / "features.csv"
    print(write_features(out, feats, dataset.ids, dataset.labels))
    return EXIT_OK


# --- argument parsing ----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory (file for dump-features)")
    common.add_argument("--override", nargs="+", action="extend", metavar="KEY=VALUE",
                        help="dotted-path override, e.g. train.max_epochs=50 ca=false")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="vsfusion", description="Cross-attention fusion of eye, PPG and video-semantic signals.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    p.add_argument("--classes", type=int)
    p.add_argument("--per-class", type=int)
    p.add_argument("--imbalanced", help="comma-separated per-class counts")
    p.add_argument("--separation", type=float)
    p.add_argument("--videos", type=int, help="share semantic blocks among this many videos")
    p.add_argument("--uninformative", action="store_true", help="semantic block carries no class signal")
    p.add_argument("--context-coupling", action="store_true",
                   help="physiological polarity depends on a context only the semantic block reveals")
    p.set_defaults(func=cmd_synth)

    sub.add_parser("train", parents=[common], help="cross-validated training").set_defaults(func=cmd_train)
    sub.add_parser("ablate", parents=[common], help="run the ablation table").set_defaults(func=cmd_ablate)
    for name, func in (("eval", cmd_eval), ("dump-features", cmd_dump_features)):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--params", help="params.json from a training fold")
        p.add_argument("--manifest", help="dataset manifest to run on")
        p.set_defaults(func=func)
    return parser


def _fail(code: int, exc: BaseException) -> int:
    msg = " ".join(str(exc).split())
    print(json.dumps({"error": type(exc).__name__, "exit": code, "message": msg}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_CONFIG, exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except (DatasetError, ReportError, TrainingDiverged, OSError, ValueError) as exc:
        return _fail(EXIT_RUNTIME, exc)


if __name__ == "__main__":
    sys.exit(main())
