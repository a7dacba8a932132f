"""Deep Recursive Feature Machine.

Each layer normalizes the columns of its input, fits kernel ridge(less)
regression to the labels, computes the AGOP ``M`` of that predictor and maps
the data through ``Phi(M^{1/2} X)`` with an untrained random feature map. A
final kernel machine is fit on the normalized output of the last layer.

Collapse metrics are recorded at three stages per layer: the normalized
input, the data after ``M^{1/2}`` and the data after the feature map.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Collection

import numpy as np

from .collapse import CollapseMetrics, centered_gram, collapse_metrics
from .data import Dataset, LabelMatrix, encode_labels
from .features import FeatureMapSpec, apply_feature_map
from .kernels import AgopMatrix, KernelSpec, KrrModel, agop, krr_fit, krr_predict
from .linalg import column_normalize

STAGES = ("input", "agop", "feature")

MANIFEST_NAME = "pipeline.json"
MANIFEST_FORMAT = "agop-collapse/deeprfm-pipeline/v1"


@dataclass(frozen=True)
class DeepRfmConfig:
    depth: int = 20
    kernel: KernelSpec = field(default_factory=KernelSpec)
    feature_map: FeatureMapSpec = field(default_factory=FeatureMapSpec)
    ridge: float = 0.0
    label_encoding: str = "pm-one"
    master_seed: int = 0
    mean_mode: str = "class"

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.ridge < 0:
            raise ValueError("ridge must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DeepRfmConfig":
        d = dict(d)
        if "kernel" in d:
            d["kernel"] = KernelSpec(**d["kernel"])
        if "feature_map" in d:
            d["feature_map"] = FeatureMapSpec(**d["feature_map"])
        return cls(**d)


def layer_seed(master_seed: int, layer: int) -> int:
    """Feature-map seed for a layer; a pure function of (master_seed, layer)."""
    ss = np.random.SeedSequence([int(master_seed), int(layer)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass(eq=False)
class LayerArtifacts:
    layer_index: int
    feature_map: FeatureMapSpec
    sqrtM: np.ndarray
    jitter: float
    metrics: dict[str, CollapseMetrics]
    # the matrices below are dropped for layers the caller does not retain
    X_l: np.ndarray | None = None
    agop: AgopMatrix | None = None
    X_tilde: np.ndarray | None = None
    X_next: np.ndarray | None = None


@dataclass(eq=False)
class DeepRfmPipeline:
    config: DeepRfmConfig
    K: int
    layers: list[LayerArtifacts]
    final_model: KrrModel

    @property
    def sqrtMs(self) -> list[np.ndarray]:
        return [layer.sqrtM for layer in self.layers]

    @property
    def feature_maps(self) -> list[FeatureMapSpec]:
        return [layer.feature_map for layer in self.layers]


def layer_step(
    X_l,
    Y: LabelMatrix | np.ndarray,
    labels,
    config: DeepRfmConfig,
    layer_index: int,
    K: int | None = None,
    threads: int | None = None,
) -> LayerArtifacts:
    X_l = column_normalize(X_l)
    model = krr_fit(X_l, Y, config.kernel, config.ridge)
    A = agop(model, threads=threads)
    X_tilde = A.sqrtM @ X_l
    fmap = config.feature_map.with_seed(layer_seed(config.master_seed, layer_index))
    X_next = apply_feature_map(fmap, X_tilde)
    metrics = {
        stage: collapse_metrics(mat, labels, K, config.mean_mode)
        for stage, mat in zip(STAGES, (X_l, X_tilde, X_next))
    }
    return LayerArtifacts(
        layer_index=layer_index,
        feature_map=fmap,
        sqrtM=A.sqrtM,
        jitter=model.jitter,
        metrics=metrics,
        X_l=X_l,
        agop=A,
        X_tilde=X_tilde,
        X_next=X_next,
    )


def run(
    ds: Dataset,
    config: DeepRfmConfig,
    retain: Collection[int] | None = None,
    threads: int | None = None,
    on_layer=None,
) -> DeepRfmPipeline:
    """Train a Deep RFM on ``ds``.

    ``retain`` lists the 1-based layers whose intermediate matrices are kept
    on the returned artifacts (all layers when ``None``); metrics and the
    maps needed for prediction are always kept.
    """
    Y = encode_labels(ds, config.label_encoding)
    X = ds.X
    layers = []
    for l in range(1, config.depth + 1):
        art = layer_step(X, Y, ds.labels, config, l, ds.K, threads)
        X = art.X_next
        if retain is not None and l not in retain:
            art.X_l = art.agop = art.X_tilde = art.X_next = None
        layers.append(art)
        if on_layer is not None:
            on_layer(art)
    final = krr_fit(column_normalize(X), Y, config.kernel, config.ridge)
    return DeepRfmPipeline(config, ds.K, layers, final)


def transform(pipeline: DeepRfmPipeline, Z) -> np.ndarray:
    """Push columns of Z through every stored layer (normalize, M^{1/2}, Phi)."""
    Z = np.asarray(Z, dtype=np.float64)
    d_in = pipeline.sqrtMs[0].shape[0] if pipeline.layers else pipeline.final_model.train_X.shape[0]
    if Z.ndim != 2 or Z.shape[0] != d_in:
        raise ValueError(f"expected inputs with {d_in} rows, got shape {Z.shape}")
    for layer in pipeline.layers:
        Z = apply_feature_map(layer.feature_map, layer.sqrtM @ column_normalize(Z))
    return column_normalize(Z)


def predict_scores(pipeline: DeepRfmPipeline, Z) -> np.ndarray:
    return krr_predict(pipeline.final_model, transform(pipeline, Z))


def predict(pipeline: DeepRfmPipeline, Z) -> np.ndarray:
    """Class index per column of Z; ties go to the lowest index."""
    return np.argmax(predict_scores(pipeline, Z), axis=0)


def final_stage_gram(layer: LayerArtifacts, labels, K: int, mean_mode: str = "class") -> np.ndarray:
    if layer.X_tilde is None:
        raise ValueError(f"layer {layer.layer_index} was not retained")
    return centered_gram(layer.X_tilde, labels, K, mean_mode)


# -- serialization ----------------------------------------------------------


def _write_f64(path: Path, a: np.ndarray) -> dict:
    a = np.asarray(a, dtype="<f8")
    path.write_bytes(a.tobytes(order="F"))
    return {"file": path.name, "shape": list(a.shape), "dtype": "<f8", "order": "F"}


def _read_f64(root: Path, entry: dict) -> np.ndarray:
    raw = (root / entry["file"]).read_bytes()
    shape = tuple(entry["shape"])
    if len(raw) != 8 * int(np.prod(shape)):
        raise ValueError(f"{entry['file']}: expected {8 * int(np.prod(shape))} bytes, found {len(raw)}")
    a = np.frombuffer(raw, dtype="<f8").reshape(shape, order="F")
    return np.ascontiguousarray(a, dtype=np.float64)


def save_pipeline(pipeline: DeepRfmPipeline, directory) -> Path:
    """Write a JSON manifest plus raw little-endian column-major float64 blobs."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    layers = []
    for layer in pipeline.layers:
        layers.append(
            {
                "index": layer.layer_index,
                "feature_map": asdict(layer.feature_map),
                "jitter": layer.jitter,
                "sqrtM": _write_f64(root / f"layer{layer.layer_index:03d}_sqrtM.bin", layer.sqrtM),
            }
        )
    fm = pipeline.final_model
    manifest = {
        "format": MANIFEST_FORMAT,
        "config": pipeline.config.to_dict(),
        "K": pipeline.K,
        "layers": layers,
        "final": {
            "kernel": asdict(fm.spec),
            "ridge": fm.ridge,
            "jitter": fm.jitter,
            "alpha": _write_f64(root / "final_alpha.bin", fm.alpha),
            "train_X": _write_f64(root / "final_train_X.bin", fm.train_X),
        },
    }
    path = root / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_pipeline(directory) -> DeepRfmPipeline:
    root = Path(directory)
    manifest = json.loads((root / MANIFEST_NAME).read_text())
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"unsupported pipeline format {manifest.get('format')!r}")
    config = DeepRfmConfig.from_dict(manifest["config"])
    layers = [
        LayerArtifacts(
            layer_index=entry["index"],
            feature_map=FeatureMapSpec(**entry["feature_map"]),
            sqrtM=_read_f64(root, entry["sqrtM"]),
            jitter=entry["jitter"],
            metrics={},
        )
        for entry in manifest["layers"]
    ]
    fin = manifest["final"]
    final = KrrModel(
        _read_f64(root, fin["train_X"]),
        _read_f64(root, fin["alpha"]),
        KernelSpec(**fin["kernel"]),
        fin["ridge"],
        fin["jitter"],
    )
    return DeepRfmPipeline(config, manifest["K"], layers, final)
