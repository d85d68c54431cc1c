"""Report files (JSON, CSV, ROC points, feature dumps) and the ablation runner."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import model as M
from .data import Dataset
from .metrics import EvalReport
from .preprocess import PrepConfig
from .training import CVResult, TrainConfig, run_cv

logger = logging.getLogger(__name__)

ABLATION_SCHEMA = "vsfusion.ablation/1"
SUMMARY_COLUMNS = ("config_id", "modalities", "ca", "acc_mean", "acc_std", "recall", "f1", "params")
_SHORT = {"e": "em", "p": "ppg", "s": "vsi"}


class ReportError(OSError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def _write(path: Path, text: str) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise ReportError(f"cannot write {path}: {exc.strerror or exc}") from None
    return path


def write_json(path, obj) -> Path:
    return _write(path, canonical_json(obj))


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def roc_rows(report: EvalReport) -> list[list]:
    """Long-format ROC points: fold, class, point index, fpr, tpr, threshold."""
    rows = []
    for c, curve in enumerate(report.roc):
        # the (0, 0) start has no threshold of its own
        thresholds = [""] + [repr(t) for t in curve.thresholds]
        for i, (f, t) in enumerate(zip(curve.fpr, curve.tpr)):
            rows.append([report.fold if report.fold is not None else "", c, i, repr(f), repr(t), thresholds[i]])
    return rows


def emit_report(reports: list[EvalReport], out_dir, name: str = "report",
                aggregate: dict | None = None) -> dict[str, Path]:
    """Write ``<name>.json``, a per-report CSV summary and the raw ROC points.

    The JSON holds every report plus the optional cross-fold aggregate; keys
    are sorted so identical runs give identical bytes.
    """
    out_dir = Path(out_dir)
    doc = {"reports": [r.to_dict() for r in reports]}
    if aggregate is not None:
        doc["aggregate"] = aggregate
    summary = [[r.fold if r.fold is not None else "", repr(r.accuracy), repr(r.macro_recall),
                repr(r.macro_f1), r.param_count, r.n_samples] for r in reports]
    roc = [row for r in reports for row in roc_rows(r)]
    return {
        "json": write_json(out_dir / f"{name}.json", doc),
        "csv": _write(out_dir / f"{name}.csv", _csv_text(
            ("fold", "accuracy", "macro_recall", "macro_f1", "params", "n_samples"), summary)),
        "roc": _write(out_dir / f"{name}_roc.csv", _csv_text(
            ("fold", "class", "point", "fpr", "tpr", "threshold"), roc)),
    }


def load_report_json(path) -> tuple[list[EvalReport], dict | None]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return [EvalReport.from_dict(d) for d in doc["reports"]], doc.get("aggregate")


def write_features(path, features: np.ndarray, ids, labels) -> Path:
    """One row per sample: id, label, then the classifier-input columns."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != len(ids):
        raise ValueError(f"feature matrix {features.shape} does not match {len(ids)} ids")
    header = ["id", "label"] + [f"f{j}" for j in range(features.shape[1])]
    rows = [[i, int(y)] + [repr(float(v)) for v in row] for i, y, row in zip(ids, labels, features)]
    return _write(path, _csv_text(header, rows))


# --- ablation -------------------------------------------------------------------------

@dataclass(frozen=True)
class AblationRow:
    config_id: str
    modalities: tuple
    cross_attention: bool
    semantic_variant: str | None = None

    @classmethod
    def make(cls, config_id: str, modalities, cross_attention: bool, semantic_variant=None):
        mods = M.parse_modalities(modalities)
        # attention needs a partner modality, so single-modality rows never use it
        return cls(config_id, mods, bool(cross_attention) and len(mods) > 1, semantic_variant)

    @property
    def label(self) -> str:
        return "+".join(_SHORT[t] for t in self.modalities)

    def to_dict(self) -> dict:
        return {"config_id": self.config_id, "modalities": list(self.modalities),
                "cross_attention": self.cross_attention, "semantic_variant": self.semantic_variant}

    @classmethod
    def from_dict(cls, d: dict) -> "AblationRow":
        return cls.make(d["config_id"], d["modalities"], d.get("cross_attention", True),
                        d.get("semantic_variant"))


# Rows I-VII: EM, PPG, EM+PPG+CA, PPG+VSI+CA, EM+VSI+CA, trimodal without CA, trimodal with CA
DEFAULT_ABLATION = (
    AblationRow.make("I", "em", False),
    AblationRow.make("II", "ppg", False),
    AblationRow.make("III", "em,ppg", True),
    AblationRow.make("IV", "ppg,vsi", True),
    AblationRow.make("V", "em,vsi", True),
    AblationRow.make("VI", "em,ppg,vsi", False),
    AblationRow.make("VII", "em,ppg,vsi", True),
)


@dataclass
class AblationResult:
    row: AblationRow
    aggregate: dict
    reports: list[EvalReport] = field(default_factory=list)

    def summary(self) -> list:
        a = self.aggregate
        return [self.row.config_id, self.row.label, str(self.row.cross_attention).lower(),
                repr(a["accuracy_mean"]), repr(a["accuracy_std"]), repr(a["macro_recall_mean"]),
                repr(a["macro_f1_mean"]), a["param_count"]]


@dataclass
class AblationTable:
    results: list[AblationResult]

    def to_dict(self) -> dict:
        return {"schema": ABLATION_SCHEMA,
                "rows": [{"row": r.row.to_dict(), "aggregate": r.aggregate,
                          "reports": [rep.to_dict() for rep in r.reports]} for r in self.results]}

    def csv_text(self) -> str:
        return _csv_text(SUMMARY_COLUMNS, [r.summary() for r in self.results])

    def by_id(self, config_id: str) -> AblationResult:
        for r in self.results:
            if r.row.config_id == config_id:
                return r
        raise KeyError(config_id)

    def write(self, out_dir, name: str = "ablation") -> dict[str, Path]:
        out_dir = Path(out_dir)
        return {"json": write_json(out_dir / f"{name}.json", self.to_dict()),
                "csv": _write(out_dir / f"{name}.csv", self.csv_text())}


def ablation_suite(dataset: Dataset, rows=DEFAULT_ABLATION, template: M.ModelConfig | None = None,
                   tconfig: TrainConfig | None = None, pconfig: PrepConfig | None = None,
                   k: int = 5, ratio: float = 0.8, seed: int = 7, folds=None,
                   variants: dict[str, Dataset] | None = None) -> AblationTable:
    """Run each row through the CV harness, in declared order.

    Accuracy mean and std are taken over the per-fold test reports. Rows with
    a ``semantic_variant`` use ``variants[name]``, the same samples with a
    different semantic embedding table.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("nothing to run")
    ids = [r.config_id for r in rows]
    if len(set(ids)) != len(ids):
        raise ValueError("ablation config ids must be unique")
    variants = variants or {}
    for r in rows:
        if r.semantic_variant is not None and r.semantic_variant not in variants:
            raise ValueError(f"row {r.config_id}: unknown semantic variant {r.semantic_variant!r}")
    template = template or M.ModelConfig()
    tconfig = tconfig or TrainConfig()
    pconfig = pconfig or PrepConfig()
    results = []
    for r in rows:
        data = dataset if r.semantic_variant is None else variants[r.semantic_variant]
        logger.info("ablation row %s: %s ca=%s", r.config_id, r.label, r.cross_attention)
        cv: CVResult = run_cv(data, replace(template, modalities=r.modalities, cross_attention=r.cross_attention),
                              tconfig, pconfig, k, ratio, seed, folds)
        results.append(AblationResult(r, cv.aggregate["test"], [f.test_report for f in cv.folds]))
    return AblationTable(results)
