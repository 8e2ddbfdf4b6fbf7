"""GNN architectures, structure-agnostic baselines and the shared linear head.

Every family maps its input to a graph (or sample) embedding and finishes with
the same single linear layer, so family comparisons differ only in the
embedding function.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Literal, Mapping

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from scipy.special import expit

from braingraph_bench.errors import ConfigurationError, ContractError, SchemaError
from braingraph_bench.graphs import BrainGraph, DiffusionConfig
from braingraph_bench.numerics import (
    Tensor,
    add,
    broadcast_to,
    concat,
    conv1d,
    conv_output_length,
    dropout,
    init_params,
    leaky_relu,
    masked_softmax,
    matmul,
    mul,
    reduce_max,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    sigmoid,
    softmax,
    sparsemax,
    tanh,
    transpose,
)

logger = logging.getLogger(__name__)

Family = Literal["gcn", "gat", "gin", "stgcn", "astgcn", "mlp", "cnn1d", "svm_rbf"]
Readout = Literal["mean", "mean_cat_max", "sum"]

GRAPH_FAMILIES = ("gcn", "gat", "gin", "stgcn", "astgcn")
STATIC_FAMILIES = ("gcn", "gat", "gin")
DYNAMIC_FAMILIES = ("stgcn", "astgcn")
NEURAL_FAMILIES = ("gcn", "gat", "gin", "stgcn", "astgcn", "mlp", "cnn1d")
ALL_FAMILIES = NEURAL_FAMILIES + ("svm_rbf",)
GAT_SLOPE = 0.2


class ModelSpec(BaseModel):
    """Architecture plus every hyperparameter needed to train it."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    family: Family
    hidden_dim: int = Field(default=64, gt=0)
    num_layers: int = Field(default=2, gt=0)
    readout: Readout = "mean"
    heads: int = Field(default=1, ge=1)
    embedding_dim: int = Field(default=16, gt=0)
    normalizer: Literal["softmax", "sparsemax"] = "softmax"
    kernel_size: int = Field(default=3, gt=0)
    blocks: int = Field(default=1, ge=1)
    stride: int = Field(default=1, ge=1)
    dropout: float = Field(default=0.0, ge=0.0, lt=1.0)
    init_std: float = Field(default=0.1, gt=0.0)
    learning_rate: float = Field(default=1e-3, gt=0.0)
    weight_decay: float = Field(default=0.0, ge=0.0)
    batch_size: int = Field(default=32, gt=0)
    max_epochs: int = Field(default=200, gt=0)
    patience: int = Field(default=20, gt=0)
    keep_fraction: float = Field(default=0.25, gt=0.0, le=1.0)
    by_magnitude: bool = False
    diffusion_scheme: Literal["none", "heat", "ppr"] = "none"
    diffusion_t: float = Field(default=1.0, gt=0.0)
    diffusion_alpha: float = Field(default=0.15, gt=0.0, le=1.0)
    diffusion_transition: Literal["sym", "rw"] = "sym"
    diffusion_order: int = Field(default=2, ge=1)
    C: float = Field(default=1.0, gt=0.0)
    gamma: float | None = Field(default=None, gt=0.0)

    @classmethod
    def build(cls, **values: Any) -> "ModelSpec":
        try:
            return cls(**values)
        except ValidationError as exc:
            raise ConfigurationError(f"Invalid model spec: {exc}") from exc

    def with_overrides(self, **values: Any) -> "ModelSpec":
        return ModelSpec.build(**{**self.model_dump(), **values})

    @property
    def diffusion(self) -> DiffusionConfig:
        return DiffusionConfig(
            scheme=self.diffusion_scheme,
            t=self.diffusion_t,
            alpha=self.diffusion_alpha,
            transition=self.diffusion_transition,
            order=self.diffusion_order,
        )


@dataclass(slots=True)
class Prediction:
    logit: float

    @classmethod
    def from_logit(cls, logit: Tensor | float) -> "Prediction":
        value = logit.item() if isinstance(logit, Tensor) else float(logit)
        return cls(value)

    @property
    def probability(self) -> float:
        return float(expit(self.logit))

    @property
    def label(self) -> int:
        return int(self.probability > 0.5)


@dataclass(slots=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass(slots=True)
class TrainedModel:
    spec: ModelSpec
    parameters: dict[str, np.ndarray]
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def best_val_loss(self) -> float:
        if not self.history:
            return float("nan")
        return self.history[self.best_epoch].val_loss

    def tensors(self) -> dict[str, Tensor]:
        return {name: Tensor(value, name=name) for name, value in self.parameters.items()}

    def predict(self, inputs: BrainGraph | np.ndarray) -> Prediction:
        if self.spec.family == "svm_rbf":
            from braingraph_bench.svm import SVMModel, svm_rbf_predict

            return svm_rbf_predict(SVMModel.from_parameters(self.parameters), inputs)
        return Prediction.from_logit(model_logit(self.spec, self.tensors(), inputs))


# --------------------------------------------------------------------------
# Shared pieces
# --------------------------------------------------------------------------


def _dense(h: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    out = matmul(h, weight)
    return add(out, broadcast_to(reshape(bias, (1, bias.shape[0])), out.shape))


def _head(embedding: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    weight = params["head.w"]
    if weight.shape != embedding.shape:
        raise ContractError(f"head expects an embedding of shape {weight.shape}, got {embedding.shape}")
    return add(reduce_sum(mul(embedding, weight)), params["head.b"])


def readout(node_features: Tensor, kind: str) -> Tensor:
    """Permutation-invariant pooling over nodes (rows)."""
    node_features = node_features if isinstance(node_features, Tensor) else Tensor(node_features)
    if node_features.ndim != 2 or node_features.shape[0] < 1:
        raise ContractError(f"readout needs an N x F matrix with N >= 1, got {node_features.shape}")
    if kind == "mean":
        return reduce_mean(node_features, axis=0)
    if kind == "sum":
        return reduce_sum(node_features, axis=0)
    if kind == "mean_cat_max":
        return concat([reduce_mean(node_features, axis=0), reduce_max(node_features, axis=0)], axis=0)
    raise ConfigurationError(f"unknown readout {kind!r}")


def readout_width(kind: str, width: int) -> int:
    return 2 * width if kind == "mean_cat_max" else width


def _require_graph(graph: BrainGraph, *kinds: str) -> None:
    if not isinstance(graph, BrainGraph) or graph.kind not in kinds:
        found = getattr(graph, "kind", type(graph).__name__)
        raise ContractError(f"expected a {' or '.join(kinds)} graph, got {found}")


def _require_rows(name: str, weight: Tensor, width: int) -> None:
    if weight.shape[0] != width:
        raise ContractError(f"{name} expects {weight.shape[0]} input features, got {width}")


# --------------------------------------------------------------------------
# Static GNNs
# --------------------------------------------------------------------------


def gcn_forward(graph: BrainGraph, params: Mapping[str, Tensor], spec: ModelSpec, rng=None) -> Tensor:
    _require_graph(graph, "static")
    _require_rows("gcn.0.W", params["gcn.0.W"], graph.node_features.shape[1])
    s = Tensor(graph.adjacency.values)
    h = Tensor(graph.node_features)
    for layer in range(spec.num_layers):
        prefix = f"gcn.{layer}"
        message = relu(matmul(matmul(s, h), params[f"{prefix}.W"]))
        h = relu(_dense(message, params[f"{prefix}.U"], params[f"{prefix}.c"]))
        h = dropout(h, spec.dropout, rng)
    return _head(readout(h, spec.readout), params)


def neighbourhood_mask(adjacency: np.ndarray) -> np.ndarray:
    mask = adjacency != 0
    np.fill_diagonal(mask, True)
    return mask


def gat_attention(h: Tensor, weight: Tensor, a_src: Tensor, a_dst: Tensor, mask: np.ndarray) -> Tensor:
    """Row-normalised attention softmax_j(LeakyReLU(m^T [W h_i || W h_j])) over the neighbourhood."""
    wh = matmul(h, weight)
    n = wh.shape[0]
    source = broadcast_to(matmul(wh, a_src), (n, n))
    target = broadcast_to(reshape(matmul(wh, a_dst), (1, n)), (n, n))
    return masked_softmax(leaky_relu(add(source, target), GAT_SLOPE), mask, axis=1)


def gat_forward(graph: BrainGraph, params: Mapping[str, Tensor], spec: ModelSpec, rng=None) -> Tensor:
    _require_graph(graph, "static")
    _require_rows("gat.0.0.W", params["gat.0.0.W"], graph.node_features.shape[1])
    mask = neighbourhood_mask(graph.adjacency.values)
    h = Tensor(graph.node_features)
    for layer in range(spec.num_layers):
        prefix = f"gat.{layer}"
        heads = []
        for head in range(spec.heads):
            hp = f"{prefix}.{head}"
            alpha = gat_attention(h, params[f"{hp}.W"], params[f"{hp}.a_src"], params[f"{hp}.a_dst"], mask)
            heads.append(matmul(alpha, matmul(h, params[f"{hp}.W"])))
        merged = heads[0]
        for extra in heads[1:]:
            merged = add(merged, extra)
        message = relu(mul(merged, 1.0 / spec.heads))
        h = relu(_dense(message, params[f"{prefix}.U"], params[f"{prefix}.c"]))
        h = dropout(h, spec.dropout, rng)
    return _head(readout(h, spec.readout), params)


def gin_layer(
    h: Tensor,
    adjacency: np.ndarray,
    eps: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
) -> Tensor:
    """MLP((1 + eps) h_i + sum_j c_ij h_j) with edge weights c_ij (self-loops excluded)."""
    neighbours = np.array(adjacency, dtype=np.float64)
    np.fill_diagonal(neighbours, 0.0)
    combined = add(mul(add(eps, 1.0), h), matmul(Tensor(neighbours), h))
    return relu(_dense(relu(_dense(combined, w1, b1)), w2, b2))


def gin_forward(graph: BrainGraph, params: Mapping[str, Tensor], spec: ModelSpec, rng=None) -> Tensor:
    _require_graph(graph, "static")
    _require_rows("gin.0.W1", params["gin.0.W1"], graph.node_features.shape[1])
    h = Tensor(graph.node_features)
    for layer in range(spec.num_layers):
        p = f"gin.{layer}"
        h = gin_layer(
            h, graph.adjacency.values, params[f"{p}.eps"],
            params[f"{p}.W1"], params[f"{p}.b1"], params[f"{p}.W2"], params[f"{p}.b2"],
        )
        h = dropout(h, spec.dropout, rng)
    return _head(readout(h, spec.readout), params)


# --------------------------------------------------------------------------
# Spatio-temporal GNNs
# --------------------------------------------------------------------------


def _channel_bias(bias: Tensor, like: Tensor) -> Tensor:
    channels = bias.shape[0]
    shape = (channels, 1) if like.ndim == 2 else (1, channels, 1)
    return broadcast_to(reshape(bias, shape), like.shape)


def gated_tcn(
    x: Tensor,
    w_a: Tensor,
    b: Tensor,
    w_b: Tensor,
    c: Tensor,
    *,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """tanh(W_a * x + b) (.) sigmoid(W_b * x + c) for x [C x T] or [N x C x T]."""
    filt = conv1d(x, w_a, padding=padding, dilation=dilation)
    gate = conv1d(x, w_b, padding=padding, dilation=dilation)
    return mul(tanh(add(filt, _channel_bias(b, filt))), sigmoid(add(gate, _channel_bias(c, gate))))


def _spatial_step(h: Tensor, propagation: Tensor, weight: Tensor) -> Tensor:
    """Graph convolution applied at every time frame with shared weights."""
    n, channels, steps = h.shape
    mixed = reshape(matmul(propagation, reshape(h, (n, channels * steps))), (n, channels, steps))
    frames = reshape(transpose(mixed, (0, 2, 1)), (n * steps, channels))
    out = reshape(matmul(frames, weight), (n, steps, weight.shape[1]))
    return relu(transpose(out, (0, 2, 1)))


def receptive_field(spec: ModelSpec) -> int:
    return spec.blocks * (spec.kernel_size - 1) + 1


def _spatio_temporal(
    features: np.ndarray, propagation: Tensor, params: Mapping[str, Tensor], spec: ModelSpec, rng
) -> Tensor:
    n, steps = features.shape
    if steps < receptive_field(spec):
        raise ConfigurationError(
            f"{steps} timepoints is shorter than the receptive field {receptive_field(spec)}"
        )
    padding = (spec.kernel_size - 1) // 2
    h = Tensor(features.reshape(n, 1, steps))
    for block in range(spec.blocks):
        p = f"st.{block}"
        h = gated_tcn(h, params[f"{p}.Wa"], params[f"{p}.b"], params[f"{p}.Wb"], params[f"{p}.c"], padding=padding)
        h = _spatial_step(h, propagation, params[f"{p}.W"])
        h = dropout(h, spec.dropout, rng)
    pooled = reduce_mean(h, axis=2)
    return _head(readout(pooled, spec.readout), params)


def stgcn_forward(graph: BrainGraph, params: Mapping[str, Tensor], spec: ModelSpec, rng=None) -> Tensor:
    _require_graph(graph, "dynamic")
    return _spatio_temporal(graph.node_features, Tensor(graph.adjacency.values), params, spec, rng)


def adaptive_adjacency(embedding: Tensor, normalizer: str = "softmax") -> Tensor:
    """I + rownorm(ReLU(E E^T)) with softmax or sparsemax row normalisation."""
    scores = relu(matmul(embedding, transpose(embedding)))
    if normalizer == "softmax":
        rows = softmax(scores, axis=1)
    elif normalizer == "sparsemax":
        rows = sparsemax(scores)
    else:
        raise ConfigurationError(f"unknown row normaliser {normalizer!r}")
    return add(rows, Tensor(np.eye(embedding.shape[0])))


def astgcn_forward(graph: BrainGraph, params: Mapping[str, Tensor], spec: ModelSpec, rng=None) -> Tensor:
    _require_graph(graph, "dynamic_adaptive")
    embedding = params["ast.E"]
    if embedding.shape[0] != graph.num_nodes:
        raise ContractError(f"node embedding has {embedding.shape[0]} rows, graph has {graph.num_nodes} nodes")
    propagation = adaptive_adjacency(embedding, spec.normalizer)
    return _spatio_temporal(graph.node_features, propagation, params, spec, rng)


# --------------------------------------------------------------------------
# Baselines
# --------------------------------------------------------------------------


def mlp_forward(fc_vector: np.ndarray, params: Mapping[str, Tensor], spec: ModelSpec, rng=None) -> Tensor:
    fc_vector = np.asarray(fc_vector, dtype=np.float64)
    if fc_vector.ndim != 1:
        raise ContractError(f"mlp expects a flat FC vector, got shape {fc_vector.shape}")
    _require_rows("mlp.0.W", params["mlp.0.W"], fc_vector.shape[0])
    h = Tensor(fc_vector.reshape(1, -1))
    for layer in range(spec.num_layers):
        h = relu(_dense(h, params[f"mlp.{layer}.W"], params[f"mlp.{layer}.b"]))
        h = dropout(h, spec.dropout, rng)
    return _head(reshape(h, (h.shape[1],)), params)


def cnn1d_temporal_features(timecourses: np.ndarray, params: Mapping[str, Tensor], spec: ModelSpec, rng=None) -> Tensor:
    """Two strided temporal convolutions over ROI channels, before pooling."""
    x = np.asarray(timecourses, dtype=np.float64)
    if x.ndim != 2:
        raise ContractError(f"cnn1d expects an N x T matrix, got shape {x.shape}")
    if params["cnn.0.K"].shape[1] != x.shape[0]:
        raise ContractError(f"cnn1d expects {params['cnn.0.K'].shape[1]} ROI channels, got {x.shape[0]}")
    first = conv_output_length(x.shape[1], spec.kernel_size, spec.stride)
    if first < spec.kernel_size:
        raise ConfigurationError(
            f"{x.shape[1]} timepoints is too short for two kernel-{spec.kernel_size} stride-{spec.stride} convolutions"
        )
    h = Tensor(x)
    for layer in range(2):
        p = f"cnn.{layer}"
        out = conv1d(h, params[f"{p}.K"], stride=spec.stride)
        h = relu(add(out, _channel_bias(params[f"{p}.b"], out)))
        h = dropout(h, spec.dropout, rng)
    return h


def cnn1d_forward(timecourses: np.ndarray, params: Mapping[str, Tensor], spec: ModelSpec, rng=None) -> Tensor:
    pooled = reduce_mean(cnn1d_temporal_features(timecourses, params, spec, rng), axis=1)
    return _head(pooled, params)


# --------------------------------------------------------------------------
# Parameters and dispatch
# --------------------------------------------------------------------------


_FORWARDS: dict[str, Callable[..., Tensor]] = {
    "gcn": gcn_forward,
    "gat": gat_forward,
    "gin": gin_forward,
    "stgcn": stgcn_forward,
    "astgcn": astgcn_forward,
    "mlp": mlp_forward,
    "cnn1d": cnn1d_forward,
}


def model_logit(spec: ModelSpec, params: Mapping[str, Tensor], inputs, rng=None) -> Tensor:
    """Scalar logit for one sample; `rng` enables dropout (training mode)."""
    forward = _FORWARDS.get(spec.family)
    if forward is None:
        raise ConfigurationError(f"{spec.family} has no differentiable forward pass")
    return forward(inputs, params, spec, rng)


def _parameter_shapes(spec: ModelSpec, inputs) -> dict[str, tuple[tuple[int, ...], str]]:
    d = spec.hidden_dim
    shapes: dict[str, tuple[tuple[int, ...], str]] = {}
    if spec.family in STATIC_FAMILIES:
        width = inputs.node_features.shape[1]
        for layer in range(spec.num_layers):
            p = f"{spec.family}.{layer}"
            if spec.family == "gcn":
                shapes[f"{p}.W"] = ((width, d), "glorot_uniform")
                shapes[f"{p}.U"] = ((d, d), "glorot_uniform")
                shapes[f"{p}.c"] = ((d,), "zeros")
            elif spec.family == "gat":
                for head in range(spec.heads):
                    shapes[f"{p}.{head}.W"] = ((width, d), "glorot_uniform")
                    shapes[f"{p}.{head}.a_src"] = ((d, 1), "glorot_uniform")
                    shapes[f"{p}.{head}.a_dst"] = ((d, 1), "glorot_uniform")
                shapes[f"{p}.U"] = ((d, d), "glorot_uniform")
                shapes[f"{p}.c"] = ((d,), "zeros")
            else:
                shapes[f"{p}.eps"] = ((), "zeros")
                shapes[f"{p}.W1"] = ((width, d), "glorot_uniform")
                shapes[f"{p}.b1"] = ((d,), "zeros")
                shapes[f"{p}.W2"] = ((d, d), "glorot_uniform")
                shapes[f"{p}.b2"] = ((d,), "zeros")
            width = d
        embedding = readout_width(spec.readout, d)
    elif spec.family in DYNAMIC_FAMILIES:
        channels = 1
        for block in range(spec.blocks):
            p = f"st.{block}"
            shapes[f"{p}.Wa"] = ((d, channels, spec.kernel_size), "glorot_uniform")
            shapes[f"{p}.b"] = ((d,), "zeros")
            shapes[f"{p}.Wb"] = ((d, channels, spec.kernel_size), "glorot_uniform")
            shapes[f"{p}.c"] = ((d,), "zeros")
            shapes[f"{p}.W"] = ((d, d), "glorot_uniform")
            channels = d
        if spec.family == "astgcn":
            shapes["ast.E"] = ((inputs.num_nodes, spec.embedding_dim), "normal")
        embedding = readout_width(spec.readout, d)
    elif spec.family == "mlp":
        width = np.asarray(inputs).shape[0]
        for layer in range(spec.num_layers):
            shapes[f"mlp.{layer}.W"] = ((width, d), "glorot_uniform")
            shapes[f"mlp.{layer}.b"] = ((d,), "zeros")
            width = d
        embedding = d
    elif spec.family == "cnn1d":
        channels = np.asarray(inputs).shape[0]
        for layer in range(2):
            shapes[f"cnn.{layer}.K"] = ((d, channels, spec.kernel_size), "glorot_uniform")
            shapes[f"cnn.{layer}.b"] = ((d,), "zeros")
            channels = d
        embedding = d
    else:
        raise ConfigurationError(f"{spec.family} has no trainable tensors")
    shapes["head.w"] = ((embedding,), "glorot_uniform")
    shapes["head.b"] = ((), "zeros")
    return shapes


def init_model_params(spec: ModelSpec, example_input, rng: np.random.Generator) -> dict[str, Tensor]:
    """Fresh parameters sized from one example input."""
    return {
        name: init_params(shape, scheme, rng, std=spec.init_std, name=name)
        for name, (shape, scheme) in _parameter_shapes(spec, example_input).items()
    }


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(model: TrainedModel, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    spec_rows = [(key, "" if value is None else str(value)) for key, value in model.spec.model_dump().items()]
    spec_rows.append(("best_epoch", str(model.best_epoch)))
    pd.DataFrame(spec_rows, columns=["key", "value"]).to_csv(directory / "spec.csv", index=False, lineterminator="\n")

    for name, value in model.parameters.items():
        header = ",".join(["# shape", *(str(d) for d in value.shape)])
        rows = value.reshape(value.shape[0], -1) if value.ndim >= 1 and value.shape[0] > 0 else value.reshape(1, -1)
        body = "\n".join(",".join(repr(float(v)) for v in row) for row in rows)
        (directory / f"param_{name}.csv").write_text(f"{header}\n{body}\n", encoding="utf-8")
    return directory


def load_checkpoint(directory: str | Path) -> TrainedModel:
    from braingraph_bench.config import parse_scalar

    directory = Path(directory)
    spec_path = directory / "spec.csv"
    if not spec_path.exists():
        raise SchemaError(f"Checkpoint {directory} has no spec.csv")
    table = pd.read_csv(spec_path, dtype=str, keep_default_na=False)
    values = {row.key: parse_scalar(row.value) for row in table.itertuples(index=False)}
    best_epoch = int(values.pop("best_epoch", 0) or 0)
    spec = ModelSpec.build(**values)

    parameters: dict[str, np.ndarray] = {}
    for path in sorted(directory.glob("param_*.csv")):
        lines = path.read_text(encoding="utf-8").splitlines()
        header = lines[0].split(",")
        if header[0] != "# shape":
            raise SchemaError(f"{path.name} is missing its '# shape' header")
        shape = tuple(int(d) for d in header[1:])
        flat = [float(v) for line in lines[1:] if line for v in line.split(",")]
        parameters[path.stem[len("param_"):]] = np.array(flat, dtype=np.float64).reshape(shape)
    return TrainedModel(spec, parameters, best_epoch=best_epoch)
