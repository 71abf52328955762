"""
Dataset and model persistence

A dataset directory holds manifest.json, data.csv (n*r rows x p columns,
sample i in rows i*r .. i*r+r-1) and optionally labels.csv. Models are
model.json documents. Floats are written as shortest round-trip decimals,
so reading back is bit-exact.
"""
import csv
import hashlib
import io
import json
from pathlib import Path
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticValidationError, model_validator

from errors import DatasetFormatError, LengthMismatch
from logger import get_logger
from matnorm import ComponentParams, MatrixStack
from mixture import FitReport, MixtureModel, PenaltyKind, PenaltySpec, component_separation

logger = get_logger(__name__)

MANIFEST_FILE = "manifest.json"
DATA_FILE = "data.csv"
LABELS_FILE = "labels.csv"
MODEL_FILE = "model.json"
SCHEMA_VERSION = "1.0"


class DatasetManifest(BaseModel):
    n: int = Field(ge=1)
    r: int = Field(ge=1)
    p: int = Field(ge=1)
    layout: Literal["row-major-stacked"] = "row-major-stacked"
    labels_present: bool = False
    checksum: str


class ComponentDocument(BaseModel):
    M: List[List[float]]
    U: List[List[float]]
    V: List[List[float]]


class PenaltyDocument(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    kind: Literal["none", "l1", "l2", "nuclear"]
    lam: float = Field(alias="lambda", ge=0)


class FitDocument(BaseModel):
    iterations: int
    converged: bool
    final_objective: float
    seed: int
    reseeds: int = 0
    diverged: bool = False
    # smallest eigenvalues of U_h U_j^-1 and V_h V_j^-1, absent for k = 1
    separation: Optional[List[float]] = None


class ModelDocument(BaseModel):
    schema_version: str = SCHEMA_VERSION
    k: int = Field(ge=1)
    r: int = Field(ge=1)
    p: int = Field(ge=1)
    weights: List[float]
    components: List[ComponentDocument]
    penalty: PenaltyDocument
    fit: FitDocument

    @model_validator(mode="after")
    def _check_sizes(self):
        if len(self.weights) != self.k or len(self.components) != self.k:
            raise ValueError("weights and components must both have k entries")
        return self

    @classmethod
    def from_report(cls, report: FitReport) -> "ModelDocument":
        model = report.model
        separation = component_separation(model)
        return cls(
            k=model.k, r=model.r, p=model.p,
            weights=model.weights.tolist(),
            components=[ComponentDocument(M=c.M.tolist(), U=c.U.tolist(), V=c.V.tolist())
                        for c in model.components],
            penalty=PenaltyDocument(kind=report.penalty.kind.value, lam=report.penalty.lam),
            fit=FitDocument(
                iterations=report.iterations,
                converged=report.converged,
                final_objective=report.final_objective,
                seed=report.seed,
                reseeds=report.reseeds,
                diverged=report.diverged,
                separation=list(separation) if separation is not None else None,
            ),
        )

    def to_model(self) -> MixtureModel:
        return MixtureModel(
            components=tuple(ComponentParams(M=np.array(c.M), U=np.array(c.U), V=np.array(c.V))
                             for c in self.components),
            weights=np.array(self.weights),
        )

    def to_penalty(self) -> PenaltySpec:
        return PenaltySpec(PenaltyKind(self.penalty.kind), self.penalty.lam)


def _format_row(values) -> str:
    return ",".join(repr(v) for v in values)


def _write_text(path: Path, text: str):
    path.write_bytes(text.encode("utf-8"))


def _decode(path: Path, payload: bytes) -> str:
    """UTF-8 text of a file; bad bytes are reported with their 1-based row"""
    try:
        return payload.decode("utf-8")
    except UnicodeDecodeError as e:
        row = payload.count(b"\n", 0, e.start) + 1
        raise DatasetFormatError(f"{path.name} is not valid UTF-8", row=row) from e


def _read_text(path: Path) -> str:
    return _decode(path, path.read_bytes())


def write_labels(path: Path, labels) -> Path:
    path = Path(path)
    body = "label\n" + "".join(f"{int(x)}\n" for x in np.asarray(labels))
    _write_text(path, body)
    return path


def read_labels(path: Path) -> np.ndarray:
    """Integer labels, one per line, optional 'label' header"""
    path = Path(path)
    if not path.exists():
        raise DatasetFormatError(f"labels file {path} not found")
    lines = _read_text(path).splitlines()
    values = []
    for row, line in enumerate(lines, start=1):
        text = line.strip()
        if row == 1 and text == "label":
            continue
        try:
            values.append(int(text))
        except ValueError:
            raise DatasetFormatError(f"not an integer label: {text!r}", row=row) from None
    return np.array(values, dtype=int)


def write_dataset(out_dir: Path, stack: MatrixStack, labels=None) -> DatasetManifest:
    """Write data.csv, labels.csv (if given) and manifest.json"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n, r, p = stack.shape
    rows = np.asarray(stack, dtype=float).reshape(n * r, p).tolist()
    payload = ("\n".join(_format_row(row) for row in rows) + "\n").encode("utf-8")
    (out_dir / DATA_FILE).write_bytes(payload)

    if labels is not None:
        if len(labels) != n:
            raise LengthMismatch(f"{len(labels)} labels for {n} samples")
        write_labels(out_dir / LABELS_FILE, labels)

    manifest = DatasetManifest(n=n, r=r, p=p, labels_present=labels is not None,
                               checksum=hashlib.sha256(payload).hexdigest())
    _write_text(out_dir / MANIFEST_FILE, json.dumps(manifest.model_dump(), indent=2) + "\n")
    logger.info(f"Wrote dataset n={n} r={r} p={p} to {out_dir}")
    return manifest


def read_dataset(data_dir: Path) -> Tuple[MatrixStack, Optional[np.ndarray], DatasetManifest]:
    """Load and validate a dataset directory"""
    data_dir = Path(data_dir)
    manifest_path = data_dir / MANIFEST_FILE
    if not manifest_path.exists():
        raise DatasetFormatError(f"{manifest_path} not found")
    try:
        manifest = DatasetManifest.model_validate(json.loads(_read_text(manifest_path)))
    except (json.JSONDecodeError, PydanticValidationError) as e:
        raise DatasetFormatError(f"invalid manifest: {e}") from e

    data_path = data_dir / DATA_FILE
    if not data_path.exists():
        raise DatasetFormatError(f"{data_path} not found")
    payload = data_path.read_bytes()

    expected_rows = manifest.n * manifest.r
    values = []
    for row, fields in enumerate(csv.reader(io.StringIO(_decode(data_path, payload))), start=1):
        if row > expected_rows:
            raise DatasetFormatError(f"more than the {expected_rows} rows the manifest declares", row=row)
        if len(fields) != manifest.p:
            raise DatasetFormatError(f"expected {manifest.p} columns, found {len(fields)}", row=row)
        try:
            parsed = [float(x) for x in fields]
        except ValueError:
            raise DatasetFormatError("non-numeric value", row=row) from None
        if not all(np.isfinite(parsed)):
            raise DatasetFormatError("non-finite value", row=row)
        values.append(parsed)
    if len(values) != expected_rows:
        raise DatasetFormatError(f"expected {expected_rows} rows, found {len(values)}", row=len(values) + 1)

    if hashlib.sha256(payload).hexdigest() != manifest.checksum:
        raise DatasetFormatError("data.csv checksum does not match manifest")

    stack = np.array(values, dtype=float).reshape(manifest.n, manifest.r, manifest.p)
    labels = None
    labels_path = data_dir / LABELS_FILE
    if labels_path.exists():
        labels = read_labels(labels_path)
        if len(labels) != manifest.n:
            raise LengthMismatch(f"{len(labels)} labels for {manifest.n} samples")
    return stack, labels, manifest


def save_model(path: Path, doc: ModelDocument) -> Path:
    path = Path(path)
    _write_text(path, json.dumps(doc.model_dump(by_alias=True), indent=2) + "\n")
    return path


def load_model(path: Path) -> ModelDocument:
    path = Path(path)
    try:
        return ModelDocument.model_validate(json.loads(_read_text(path)))
    except (OSError, json.JSONDecodeError, PydanticValidationError) as e:
        raise DatasetFormatError(f"invalid model file {path}: {e}") from e
