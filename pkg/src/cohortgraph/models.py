"""GraphSAGE classifier, LR/MLP baselines, training loop, grid search.

Training is full-batch and transductive: every epoch runs a forward pass
over all nodes, the loss is taken on the train mask, and validation loss
drives early stopping (patience of 10 epochs, 150 epochs max). The
returned parameters are the ones from the best validation-loss epoch.
All three model families share the same loop, class weighting, and Adam
settings so that comparisons isolate the architecture.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import neuro
from .errors import ConfigError
from .evalstat import Splits, auroc, balanced_accuracy
from .neuro import Parameter, Tensor
from .simgraph import SimilarityGraph

GRID_LEARNING_RATES = (1e-3, 1e-4, 1e-5, 1e-6)
GRID_LAYERS = (2, 3, 4)
GRID_HIDDEN = (32, 64, 128)
GRID_AGGREGATORS = ("mean", "max", "add")

DECISION_THRESHOLD = 0.5


@dataclass(frozen=True)
class SageConfig:
    n_layers: int = 2
    hidden: int = 64
    aggregator: str = "mean"
    learning_rate: float = 1e-5
    max_epochs: int = 150
    patience: int = 10
    seed: int = 0


def validate_sage_config(config: SageConfig) -> None:
    if config.n_layers not in GRID_LAYERS:
        raise ConfigError(f"n_layers must be one of {GRID_LAYERS}, got {config.n_layers}")
    if config.hidden not in GRID_HIDDEN:
        raise ConfigError(f"hidden must be one of {GRID_HIDDEN}, got {config.hidden}")
    if config.aggregator not in GRID_AGGREGATORS:
        raise ConfigError(
            f"aggregator must be one of {GRID_AGGREGATORS}, got {config.aggregator!r}"
        )
    if config.learning_rate not in GRID_LEARNING_RATES:
        raise ConfigError(
            f"learning_rate must be one of {GRID_LEARNING_RATES}, got {config.learning_rate}"
        )
    if config.max_epochs <= 0 or config.patience <= 0:
        raise ConfigError("max_epochs and patience must be positive")


@dataclass
class SageLayer:
    w_self: Parameter
    w_neigh: Parameter
    bias: Parameter


class SageModel:
    def __init__(self, config: SageConfig, in_dim: int):
        if in_dim <= 0:
            raise ConfigError(f"in_dim must be positive, got {in_dim}")
        self.config = config
        rng = np.random.default_rng(config.seed)
        dims = [in_dim] + [config.hidden] * (config.n_layers - 1) + [1]
        self.layers = []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            self.layers.append(
                SageLayer(
                    w_self=Parameter(neuro.glorot_uniform(rng, d_in, d_out)),
                    w_neigh=Parameter(neuro.glorot_uniform(rng, d_in, d_out)),
                    bias=Parameter(np.zeros(d_out)),
                )
            )

    def parameters(self) -> list[Parameter]:
        out = []
        for layer in self.layers:
            out.extend((layer.w_self, layer.w_neigh, layer.bias))
        return out

    def parameter_count(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def forward(self, x: Tensor, graph: SimilarityGraph) -> Tensor:
        h = x
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            h = neuro.sage_layer(
                h,
                graph,
                layer.w_self,
                layer.w_neigh,
                layer.bias,
                self.config.aggregator,
                activation=(i != last),
            )
        return neuro.sigmoid(h)


def build_sage(config: SageConfig, in_dim: int) -> SageModel:
    validate_sage_config(config)
    return SageModel(config, in_dim)


class DenseModel:
    """Dense ReLU stack with a sigmoid head; no hidden layers = logistic
    regression."""

    def __init__(self, in_dim: int, hidden_layers: Sequence[int], seed: int):
        if in_dim <= 0:
            raise ConfigError(f"in_dim must be positive, got {in_dim}")
        rng = np.random.default_rng(seed)
        dims = [in_dim] + list(hidden_layers) + [1]
        self.weights: list[Parameter] = []
        self.biases: list[Parameter] = []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            self.weights.append(Parameter(neuro.glorot_uniform(rng, d_in, d_out)))
            self.biases.append(Parameter(np.zeros(d_out)))

    def parameters(self) -> list[Parameter]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def forward(self, x: Tensor) -> Tensor:
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = neuro.add(neuro.matmul(h, w), b)
            if i != last:
                h = neuro.relu(h)
        return neuro.sigmoid(h)


class EarlyStopper:
    """Stops after `patience` consecutive epochs without a strict
    improvement of the validation loss; keeps the best epoch's snapshot."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = np.inf
        self.best_epoch = 0
        self.best_snapshot: list[np.ndarray] | None = None
        self.stale = 0

    def update(self, epoch: int, val_loss: float, params: list[Parameter]) -> bool:
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.best_snapshot = [p.value.copy() for p in params]
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience

    def restore(self, params: list[Parameter]) -> None:
        if self.best_snapshot is not None:
            for p, value in zip(params, self.best_snapshot):
                p.value = value.copy()


@dataclass
class TrainResult:
    train_losses: list[float]
    val_losses: list[float]
    stopped_epoch: int
    best_epoch: int
    val_auroc: float
    val_bacc: float
    test_auroc: float
    test_bacc: float
    scores: np.ndarray = field(repr=False, default=None)


def _fit(
    forward: Callable[[], Tensor],
    params: list[Parameter],
    labels: np.ndarray,
    splits: Splits,
    learning_rate: float,
    max_epochs: int,
    patience: int,
    log_fn: Callable[[int, float, float, float], None] | None = None,
) -> TrainResult:
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    train_mask, val_mask, test_mask = splits.masks
    if train_mask.sum() == 0:
        raise ConfigError("training mask selects no rows")
    w_pos, w_neg = neuro.class_weights(y, train_mask)

    stopper = EarlyStopper(patience)
    train_losses: list[float] = []
    val_losses: list[float] = []
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        p = forward()
        train_loss = neuro.weighted_bce(p, y, w_pos, w_neg, train_mask)
        val_loss = neuro.weighted_bce(p, y, w_pos, w_neg, val_mask)
        train_losses.append(float(train_loss.value))
        val_losses.append(float(val_loss.value))
        if log_fn is not None:
            scores = p.value.reshape(-1)
            try:
                va = auroc(scores[val_mask], y[val_mask])
            except Exception:
                va = float("nan")
            log_fn(epoch, train_losses[-1], val_losses[-1], va)
        if stopper.update(epoch, val_losses[-1], params):
            break
        train_loss.backward()
        neuro.adam_step(params, learning_rate)

    stopper.restore(params)
    scores = forward().value.reshape(-1)
    preds = scores >= DECISION_THRESHOLD
    return TrainResult(
        train_losses=train_losses,
        val_losses=val_losses,
        stopped_epoch=epoch,
        best_epoch=stopper.best_epoch,
        val_auroc=auroc(scores[val_mask], y[val_mask]),
        val_bacc=balanced_accuracy(preds[val_mask], y[val_mask]),
        test_auroc=auroc(scores[test_mask], y[test_mask]),
        test_bacc=balanced_accuracy(preds[test_mask], y[test_mask]),
        scores=scores,
    )


def train(
    model: SageModel,
    graph: SimilarityGraph,
    features: np.ndarray,
    labels: np.ndarray,
    splits: Splits,
    log_fn: Callable[[int, float, float, float], None] | None = None,
) -> TrainResult:
    x = Tensor(np.asarray(features, dtype=np.float64))
    return _fit(
        forward=lambda: model.forward(x, graph),
        params=model.parameters(),
        labels=labels,
        splits=splits,
        learning_rate=model.config.learning_rate,
        max_epochs=model.config.max_epochs,
        patience=model.config.patience,
        log_fn=log_fn,
    )


BASELINE_LEARNING_RATE = 1e-2
DEFAULT_MLP_HIDDEN = (64, 64)


def train_logreg(
    features: np.ndarray,
    labels: np.ndarray,
    splits: Splits,
    learning_rate: float = BASELINE_LEARNING_RATE,
    max_epochs: int = 150,
    patience: int = 10,
    seed: int = 0,
    log_fn: Callable[[int, float, float, float], None] | None = None,
) -> TrainResult:
    return train_mlp(
        features,
        labels,
        splits,
        hidden_layers=(),
        learning_rate=learning_rate,
        max_epochs=max_epochs,
        patience=patience,
        seed=seed,
        log_fn=log_fn,
    )


def train_mlp(
    features: np.ndarray,
    labels: np.ndarray,
    splits: Splits,
    hidden_layers: Sequence[int] = DEFAULT_MLP_HIDDEN,
    learning_rate: float = BASELINE_LEARNING_RATE,
    max_epochs: int = 150,
    patience: int = 10,
    seed: int = 0,
    log_fn: Callable[[int, float, float, float], None] | None = None,
) -> TrainResult:
    features = np.asarray(features, dtype=np.float64)
    model = DenseModel(features.shape[1], hidden_layers, seed)
    x = Tensor(features)
    return _fit(
        forward=lambda: model.forward(x),
        params=model.parameters(),
        labels=labels,
        splits=splits,
        learning_rate=learning_rate,
        max_epochs=max_epochs,
        patience=patience,
        log_fn=log_fn,
    )


def full_grid(
    max_epochs: int = 150, patience: int = 10, seed: int = 0
) -> list[SageConfig]:
    """The 108-point hyperparameter grid (4 lr x 3 layers x 3 hidden x 3
    aggregators)."""
    return [
        SageConfig(
            n_layers=layers,
            hidden=hidden,
            aggregator=agg,
            learning_rate=lr,
            max_epochs=max_epochs,
            patience=patience,
            seed=seed,
        )
        for lr, layers, hidden, agg in itertools.product(
            GRID_LEARNING_RATES, GRID_LAYERS, GRID_HIDDEN, GRID_AGGREGATORS
        )
    ]


def grid_search(
    grid: Sequence[SageConfig],
    graph: SimilarityGraph,
    features: np.ndarray,
    labels: np.ndarray,
    splits: Splits,
    progress_fn: Callable[[str], None] | None = None,
) -> list[tuple[SageConfig, TrainResult]]:
    """Train every configuration; rank by validation AUROC (descending),
    with the config tuple as a deterministic tiebreak."""
    if not grid:
        raise ConfigError("grid_search requires a non-empty grid")
    results = []
    for config in grid:
        model = build_sage(config, np.asarray(features).shape[1])
        result = train(model, graph, features, labels, splits)
        results.append((config, result))
        if progress_fn is not None:
            progress_fn(
                f"grid point lr={config.learning_rate} layers={config.n_layers} "
                f"hidden={config.hidden} agg={config.aggregator} "
                f"val_auroc={result.val_auroc:.4f}"
            )
    results.sort(
        key=lambda item: (
            -item[1].val_auroc,
            item[0].learning_rate,
            item[0].n_layers,
            item[0].hidden,
            item[0].aggregator,
        )
    )
    return results


def crossval_config(config: SageConfig, fold_seed: int) -> SageConfig:
    return replace(config, seed=fold_seed)


def save_checkpoint(model: SageModel, json_path, bin_path) -> None:
    """JSON architecture manifest + one flat CGEMB1 parameter blob."""
    import json
    from dataclasses import asdict

    from .featurize import write_matrix

    params = model.parameters()
    flat = np.concatenate([p.value.reshape(-1) for p in params])
    write_matrix(bin_path, flat[None, :])
    manifest = {
        "kind": "graphsage",
        "config": asdict(model.config),
        "in_dim": int(model.layers[0].w_self.value.shape[0]),
        "param_shapes": [list(p.value.shape) for p in params],
    }
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_checkpoint(json_path, bin_path) -> SageModel:
    import json

    from .featurize import read_matrix

    with open(json_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    config = SageConfig(**manifest["config"])
    model = build_sage(config, manifest["in_dim"])
    flat = read_matrix(bin_path).reshape(-1)
    offset = 0
    for p, shape in zip(model.parameters(), manifest["param_shapes"]):
        size = int(np.prod(shape))
        p.value = flat[offset : offset + size].reshape(shape)
        offset += size
    if offset != flat.size:
        raise ConfigError(
            f"checkpoint blob has {flat.size} values, architecture needs {offset}"
        )
    return model
