"""Cost-model assembly: per-operator predictors, fitting, evaluation, files.

A `CostModel` answers "how long does this operator invocation take, in
microseconds". Each operator is served either analytically (roofline over a
hardware profile) or by a learned tree ensemble loaded from a portable model
file. The GEMM operator is always analytic: its runtime is a clean function
of its dimensions.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from frontier_sim.costmodel import analytic
from frontier_sim.costmodel.analytic import NonPositiveDim
from frontier_sim.costmodel.features import (
    SCHEMAS,
    AttentionFeatures,
    GroupedGemmFeatures,
)
from frontier_sim.costmodel.forest import BaggedForest, ForestHyperparams, RegressionTree
from frontier_sim.topology import HardwareSpec

MODEL_FILE_FORMAT = "frontier-sim-operator-model"
MIN_FIT_ROWS = 50
_MIN_PREDICTION_US = 1e-6


class SchemaMismatch(Exception):
    pass


class InsufficientData(Exception):
    pass


class DegenerateTarget(Exception):
    """Targets unusable as durations (non-positive or non-finite)."""


class EmptyDataset(Exception):
    pass


class ModelFileError(Exception):
    pass


@dataclass(frozen=True)
class OperatorDataset:
    schema: str
    X: np.ndarray  # (n, n_features)
    y: np.ndarray  # runtimes in microseconds

    def __post_init__(self) -> None:
        if self.schema not in SCHEMAS:
            raise SchemaMismatch(
                f"unknown schema {self.schema!r}; expected one of {sorted(SCHEMAS)}"
            )
        if self.X.ndim != 2 or self.X.shape[1] != len(SCHEMAS[self.schema]):
            raise SchemaMismatch(
                f"schema {self.schema!r} has {len(SCHEMAS[self.schema])} features, "
                f"got matrix of shape {self.X.shape}"
            )
        if len(self.X) != len(self.y):
            raise SchemaMismatch("feature matrix and target vector lengths differ")

    def __len__(self) -> int:
        return len(self.y)


class ErrorCdf:
    """Sorted relative errors |pred - true| / true of one evaluation."""

    def __init__(self, errors: np.ndarray) -> None:
        if len(errors) == 0:
            raise EmptyDataset("no samples to evaluate")
        self.errors = np.sort(np.asarray(errors, dtype=np.float64))

    def cdf(self, threshold: float) -> float:
        """Fraction of samples with relative error <= threshold."""
        return float(np.searchsorted(self.errors, threshold, side="right") / len(self.errors))

    @property
    def median(self) -> float:
        return float(np.median(self.errors))

    def __len__(self) -> int:
        return len(self.errors)


@dataclass(frozen=True)
class FitReport:
    n_train: int
    n_holdout: int
    train_median_rel_err: float
    holdout_median_rel_err: float
    holdout_cdf: dict[float, float]

    def to_dict(self) -> dict:
        return {
            "n_train": self.n_train,
            "n_holdout": self.n_holdout,
            "train_median_rel_err": self.train_median_rel_err,
            "holdout_median_rel_err": self.holdout_median_rel_err,
            "holdout_cdf": {f"{k:.2f}": v for k, v in self.holdout_cdf.items()},
        }


@dataclass
class LearnedOperatorModel:
    operator: str  # attention | grouped_gemm
    schema: str
    forest: BaggedForest

    def check_schema(self, schema: str) -> None:
        if schema != self.schema:
            raise SchemaMismatch(
                f"model was fit for schema {self.schema!r}, got features for {schema!r}"
            )

    def predict_matrix(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != len(SCHEMAS[self.schema]):
            raise SchemaMismatch(
                f"schema {self.schema!r} expects {len(SCHEMAS[self.schema])} features, "
                f"got {X.shape[1]}"
            )
        return np.maximum(self.forest.predict(X), _MIN_PREDICTION_US)

    def predict_us(self, vector: np.ndarray) -> float:
        return float(self.predict_matrix(vector.reshape(1, -1))[0])

    # -- portable model file -------------------------------------------------

    def to_document(self) -> dict:
        body = {
            "format": MODEL_FILE_FORMAT,
            "version": 1,
            "operator": self.operator,
            "schema": self.schema,
            "seed": self.forest.seed,
            "hyperparams": self.forest.hyperparams.to_dict(),
            "feature_names": SCHEMAS[self.schema],
            "trees": [{"nodes": tree.node_documents()} for tree in self.forest.trees],
        }
        body["hash"] = _document_hash(body)
        return body

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_document(), fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")


def _document_hash(body: dict) -> str:
    canonical = json.dumps(
        {k: v for k, v in body.items() if k != "hash"},
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_model_file(path: str) -> LearnedOperatorModel:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != MODEL_FILE_FORMAT:
        raise ModelFileError(f"{path}: not a {MODEL_FILE_FORMAT} file")
    if doc.get("hash") != _document_hash(doc):
        raise ModelFileError(f"{path}: hash footer does not match document body")
    if doc["schema"] not in SCHEMAS:
        raise SchemaMismatch(f"{path}: unknown schema {doc['schema']!r}")
    trees = [RegressionTree.from_node_documents(t["nodes"]) for t in doc["trees"]]
    forest = BaggedForest(
        trees, ForestHyperparams.from_dict(doc["hyperparams"]), doc["seed"]
    )
    return LearnedOperatorModel(operator=doc["operator"], schema=doc["schema"], forest=forest)


def _operator_for_schema(schema: str) -> str:
    return "grouped_gemm" if schema.startswith("grouped_gemm") else "attention"


def fit_model(
    dataset: OperatorDataset,
    hyperparams: ForestHyperparams | None = None,
    seed: int = 0,
    holdout_fraction: float = 0.2,
) -> tuple[LearnedOperatorModel, FitReport]:
    """Fit a bagged ensemble on the dataset and report held-out error.

    A constant strictly-positive target is legitimate (the model predicts the
    constant); targets that are non-positive or non-finite cannot be durations
    and are rejected.
    """
    if len(dataset) < MIN_FIT_ROWS:
        raise InsufficientData(
            f"need at least {MIN_FIT_ROWS} rows, got {len(dataset)}"
        )
    y = dataset.y.astype(np.float64)
    if not np.isfinite(y).all() or (y <= 0).any():
        raise DegenerateTarget("runtimes must be finite and strictly positive")
    rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence([seed, 0xD5]).generate_state(2, np.uint64))
    )
    order = rng.permutation(len(y))
    n_holdout = max(1, int(len(y) * holdout_fraction))
    hold, train = order[:n_holdout], order[n_holdout:]
    forest = BaggedForest.fit(dataset.X[train], y[train], hyperparams, seed=seed)
    model = LearnedOperatorModel(
        operator=_operator_for_schema(dataset.schema), schema=dataset.schema, forest=forest
    )
    train_err = _relative_errors(model.predict_matrix(dataset.X[train]), y[train])
    hold_err = _relative_errors(model.predict_matrix(dataset.X[hold]), y[hold])
    hold_cdf = ErrorCdf(hold_err)
    report = FitReport(
        n_train=len(train),
        n_holdout=len(hold),
        train_median_rel_err=float(np.median(train_err)),
        holdout_median_rel_err=hold_cdf.median,
        holdout_cdf={0.06: hold_cdf.cdf(0.06), 0.10: hold_cdf.cdf(0.10)},
    )
    return model, report


def _relative_errors(pred: np.ndarray, true: np.ndarray) -> np.ndarray:
    return np.abs(pred - true) / true


def eval_model(model: LearnedOperatorModel, dataset: OperatorDataset) -> ErrorCdf:
    if len(dataset) == 0:
        raise EmptyDataset("no samples to evaluate")
    model.check_schema(dataset.schema)
    return ErrorCdf(_relative_errors(model.predict_matrix(dataset.X), dataset.y))


# -- profiling CSV ------------------------------------------------------------

def write_profiling_csv(dataset: OperatorDataset, path: str) -> None:
    names = SCHEMAS[dataset.schema]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#schema={dataset.schema}\n")
        fh.write(",".join(names + ["runtime_us"]) + "\n")
        for row, target in zip(dataset.X, dataset.y):
            fh.write(",".join(repr(float(v)) for v in row) + f",{float(target)!r}\n")


def read_profiling_csv(path: str, expected_schema: str | None = None) -> OperatorDataset:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
        if not first.startswith("#schema="):
            raise SchemaMismatch(f"{path}:1: missing '#schema=' comment line")
        schema = first.removeprefix("#schema=")
        if schema not in SCHEMAS:
            raise SchemaMismatch(f"{path}:1: unknown schema {schema!r}")
        if expected_schema is not None and schema != expected_schema:
            raise SchemaMismatch(
                f"{path}: schema is {schema!r}, expected {expected_schema!r}"
            )
        names = SCHEMAS[schema]
        header = fh.readline().strip().split(",")
        if header != names + ["runtime_us"]:
            raise SchemaMismatch(
                f"{path}:2: header must be {','.join(names + ['runtime_us'])}"
            )
        rows, targets = [], []
        for lineno, line in enumerate(fh, start=3):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(names) + 1:
                raise SchemaMismatch(f"{path}:{lineno}: expected {len(names) + 1} columns")
            try:
                values = [float(p) for p in parts]
            except ValueError as exc:
                raise SchemaMismatch(f"{path}:{lineno}: {exc}") from None
            rows.append(values[:-1])
            targets.append(values[-1])
    return OperatorDataset(
        schema=schema,
        X=np.array(rows, dtype=np.float64),
        y=np.array(targets, dtype=np.float64),
    )


# -- the assembled cost model --------------------------------------------------

@dataclass
class CostModel:
    """Per-operator runtime oracle used by every simulation workflow."""

    hardware: HardwareSpec
    dtype_bytes: int = 2
    ffn_matrices: int = 2  # 3 for gated FFN variants
    attention_model: LearnedOperatorModel | None = None
    grouped_gemm_model: LearnedOperatorModel | None = None

    def __post_init__(self) -> None:
        if self.attention_model is not None and self.attention_model.operator != "attention":
            raise SchemaMismatch("attention slot needs an attention-operator model")
        if self.grouped_gemm_model is not None and self.grouped_gemm_model.operator != "grouped_gemm":
            raise SchemaMismatch("grouped_gemm slot needs a grouped_gemm-operator model")

    def predict_linear(self, m: int, n: int, k: int) -> float:
        return analytic.linear_us(m, n, k, self.hardware, self.dtype_bytes)

    def predict_attention(self, f: AttentionFeatures) -> float:
        if self.attention_model is not None:
            if self.attention_model.schema != "attention_v1":
                raise SchemaMismatch(
                    f"attention predictor uses schema {self.attention_model.schema!r}; "
                    "expected attention_v1"
                )
            return self.attention_model.predict_us(f.vector())
        return analytic.attention_us(f, self.hardware, self.dtype_bytes)

    def predict_grouped_gemm(self, f: GroupedGemmFeatures) -> float:
        if self.grouped_gemm_model is not None:
            self.grouped_gemm_model.check_schema("grouped_gemm_v1")
            return self.grouped_gemm_model.predict_us(f.vector())
        return analytic.grouped_gemm_us(f, self.hardware, self.dtype_bytes, self.ffn_matrices)
