"""AdamW optimization, the training/evaluation protocol, and the grid sweep.

Training is deterministic for a given seed: the seed is split into
independent streams for CNN initialization, GNN initialization, and epoch
shuffling, so a coupled run and a CNN-only run under the same seed draw
identical CNN parameters and identical minibatch orders. Validation accuracy
(hybrid accuracy for coupled runs) selects the retained checkpoint, with
early stopping after a configurable number of stagnant epochs.

The canonical report serialization (JSONL) contains no timestamps so that
repeated seeded runs are byte-identical; wall-clock goes to a sidecar.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import models as M
from . import tensor as T
from .errors import (CheckpointError, ConfigError, ConsistencyError,
                     DivergenceError, ShapeError)
from .imaging import LabeledDataset
from .models import (CnnModel, CoupledModel, GnnModel, HybridConfig, Logits,
                     batch_graphs, hybrid_loss, hybrid_predict)
from .tensor import Tape, Tensor

EVAL_BATCH = 256

SWEEP_BATCH_SIZES = (128, 256)
SWEEP_LEARNING_RATES = (1e-3, 1e-4, 1e-5)
SWEEP_WEIGHT_DECAYS = (0.0, 0.001)


@dataclass
class AdamWConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"betas must be in [0, 1), got {self.beta1}, {self.beta2}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")


def adamw_update(value: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
                 t: int, cfg: AdamWConfig) -> None:
    """One in-place decoupled-weight-decay update at step t (1-based).

    m and v are the first/second moment buffers; the decay term uses the
    pre-update parameter value, independent of the gradient path.
    """
    m *= cfg.beta1
    m += (1.0 - cfg.beta1) * grad
    v *= cfg.beta2
    v += (1.0 - cfg.beta2) * grad * grad
    m_hat = m / (1.0 - cfg.beta1 ** t)
    v_hat = v / (1.0 - cfg.beta2 ** t)
    step = cfg.learning_rate * (m_hat / (np.sqrt(v_hat) + cfg.epsilon))
    if cfg.weight_decay:
        step = step + cfg.learning_rate * cfg.weight_decay * value
    value -= step


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], cfg: AdamWConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.state = {
            name: (np.zeros_like(p.data), np.zeros_like(p.data))
            for name, p in params.items()
        }

    def step(self) -> None:
        self.t += 1
        for name in sorted(self.params):
            p = self.params[name]
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(grad)):
                raise DivergenceError(f"non-finite gradient in parameter {name!r}")
            m, v = self.state[name]
            adamw_update(p.data, grad, m, v, self.t, self.cfg)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 30
    seed: int = 0
    alpha: float = 0.75
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    patience: int = 5
    hidden_dim: int | None = None

    def as_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "alpha": self.alpha,
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "patience": self.patience,
            "hidden_dim": self.hidden_dim,
        }


@dataclass
class DataBundle:
    """Aligned image and graph splits feeding one training run.

    For coupled runs, graph k must have been built from image k of the same
    split; alignment is checked through the labels.
    """

    train_images: LabeledDataset | None = None
    val_images: LabeledDataset | None = None
    test_images: LabeledDataset | None = None
    train_graphs: list | None = None
    val_graphs: list | None = None
    test_graphs: list | None = None

    def _check_aligned(self, images: LabeledDataset, graphs: list, name: str) -> None:
        if len(images) != len(graphs):
            raise ConsistencyError(
                f"{name}: {len(images)} images but {len(graphs)} graphs"
            )
        graph_labels = np.array([g.label for g in graphs], dtype=np.int64)
        if not np.array_equal(graph_labels, images.labels):
            raise ConsistencyError(f"{name}: image and graph labels disagree")

    def validate(self, kind: str) -> None:
        needs_images = kind in ("cnn", "coupled")
        needs_graphs = kind in ("gnn", "coupled")
        if needs_images and (self.train_images is None or self.val_images is None):
            raise ConfigError(f"{kind} training needs train/val image datasets")
        if needs_graphs and (self.train_graphs is None or self.val_graphs is None):
            raise ConfigError(f"{kind} training needs train/val graph lists")
        if kind == "coupled":
            self._check_aligned(self.train_images, self.train_graphs, "train")
            self._check_aligned(self.val_images, self.val_graphs, "val")
            if self.test_images is not None and self.test_graphs is not None:
                self._check_aligned(self.test_images, self.test_graphs, "test")

    @property
    def num_classes(self) -> int:
        if self.train_images is not None:
            return self.train_images.num_classes
        return int(max(g.label for g in self.train_graphs)) + 1

    @property
    def feature_dim(self) -> int:
        return self.train_graphs[0].node_features.shape[1]


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class RunReport:
    kind: str
    config: dict
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    test: dict | None = None
    wall_clock_s: float = 0.0

    def to_jsonl(self) -> str:
        """Canonical line-delimited serialization (no volatile fields)."""
        lines = []
        for e in self.epochs:
            lines.append(json.dumps({
                "type": "epoch", "epoch": e.epoch,
                "train_loss": e.train_loss, "train_acc": e.train_acc,
                "val_loss": e.val_loss, "val_acc": e.val_acc,
            }, sort_keys=True))
        lines.append(json.dumps({
            "type": "summary", "kind": self.kind, "config": self.config,
            "best_epoch": self.best_epoch, "test": self.test,
        }, sort_keys=True))
        return "\n".join(lines) + "\n"


def _batch_bounds(n: int, batch_size: int) -> list[tuple[int, int]]:
    """Contiguous batch bounds; a trailing singleton is folded into its neighbor."""
    bounds = [(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]
    if len(bounds) > 1 and bounds[-1][1] - bounds[-1][0] == 1:
        bounds[-2] = (bounds[-2][0], bounds[-1][1])
        bounds.pop()
    return bounds


def _predictions(kind: str, h_cnn, h_gnn, alpha: float) -> np.ndarray:
    if kind == "cnn":
        return np.argmax(h_cnn.data, axis=1)
    if kind == "gnn":
        return np.argmax(h_gnn.data, axis=1)
    return hybrid_predict(Logits(h_cnn, h_gnn), HybridConfig(alpha))


def _forward_split(kind: str, model, images, graphs, idx, mode: str):
    """(h_cnn, h_gnn) logits for the selected rows; unused tower returns None."""
    h_cnn = h_gnn = None
    if kind in ("cnn", "coupled"):
        xb = Tensor(images.images[idx])
        h_cnn = model.forward(xb, train=(mode == "train")) if kind == "cnn" \
            else model.cnn.forward(xb, train=(mode == "train"))
    if kind in ("gnn", "coupled"):
        gb = batch_graphs([graphs[i] for i in idx])
        h_gnn = (model if kind == "gnn" else model.gnn).forward(gb, train=(mode == "train"))
    return h_cnn, h_gnn


def _eval_pass(kind: str, model, images, graphs, alpha: float) -> tuple[float, float]:
    """(mean loss, accuracy percent) over a split in eval mode."""
    n = len(images) if images is not None else len(graphs)
    labels = images.labels if images is not None else np.array([g.label for g in graphs])
    loss_sum, correct = 0.0, 0
    for s, e in _batch_bounds(n, EVAL_BATCH):
        idx = np.arange(s, e)
        h_cnn, h_gnn = _forward_split(kind, model, images, graphs, idx, "eval")
        yb = labels[idx]
        if kind == "cnn":
            loss = T.softmax_cross_entropy(h_cnn, yb)
        elif kind == "gnn":
            loss = T.softmax_cross_entropy(h_gnn, yb)
        else:
            loss, _, _ = hybrid_loss(h_cnn, h_gnn, yb, HybridConfig(alpha))
        loss_sum += float(loss.data) * (e - s)
        correct += int((_predictions(kind, h_cnn, h_gnn, alpha) == yb).sum())
    return loss_sum / n, 100.0 * correct / n


def _snapshot(model) -> dict:
    return {
        "params": {k: v.data.copy() for k, v in model.params.items()},
        "state": {k: v.copy() for k, v in model.state.items()},
    }


def _restore(model, snap: dict) -> None:
    for k, v in snap["params"].items():
        model.params[k].data = v.copy()
    state = model.state
    for k, v in snap["state"].items():
        state[k][...] = v


def build_model(kind: str, bundle: DataBundle, cfg: TrainConfig):
    """Seed-deterministic model construction with per-tower RNG streams."""
    streams = np.random.SeedSequence(cfg.seed).spawn(3)
    k = bundle.num_classes
    cnn = gnn = None
    if kind in ("cnn", "coupled"):
        hw = bundle.train_images.images.shape[2:]
        cnn = CnnModel(bundle.train_images.images.shape[1], k, tuple(hw),
                       hidden_dim=cfg.hidden_dim,
                       rng=np.random.Generator(np.random.PCG64(streams[0])))
    if kind in ("gnn", "coupled"):
        gnn = GnnModel(bundle.feature_dim, k,
                       rng=np.random.Generator(np.random.PCG64(streams[1])))
    if kind == "cnn":
        return cnn
    if kind == "gnn":
        return gnn
    return CoupledModel(cnn, gnn, HybridConfig(cfg.alpha))


def train_model(kind: str, bundle: DataBundle, cfg: TrainConfig,
                restore_best: bool = True, log=None):
    """Train a cnn/gnn/coupled model; returns (RunReport, model at best epoch)."""
    if kind not in ("cnn", "gnn", "coupled"):
        raise ConfigError(f"unknown model kind {kind!r}")
    bundle.validate(kind)
    started = time.monotonic()

    model = build_model(kind, bundle, cfg)
    shuffle_rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(cfg.seed).spawn(3)[2]))
    opt = AdamW(model.params, AdamWConfig(
        learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay))

    train_images, train_graphs = bundle.train_images, bundle.train_graphs
    n = len(train_images) if train_images is not None else len(train_graphs)
    labels = (train_images.labels if train_images is not None
              else np.array([g.label for g in train_graphs], dtype=np.int64))

    report = RunReport(kind=kind, config=cfg.as_dict())
    best_acc, best_snap, stall = -1.0, None, 0
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for s, e in _batch_bounds(n, cfg.batch_size):
            idx = order[s:e]
            yb = labels[idx]
            opt.zero_grad()
            with Tape() as tape:
                h_cnn, h_gnn = _forward_split(kind, model, train_images,
                                              train_graphs, idx, "train")
                if kind == "cnn":
                    loss = T.softmax_cross_entropy(h_cnn, yb)
                elif kind == "gnn":
                    loss = T.softmax_cross_entropy(h_gnn, yb)
                else:
                    loss, _, _ = hybrid_loss(h_cnn, h_gnn, yb, HybridConfig(cfg.alpha))
                if not np.isfinite(loss.data):
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch}, step {s // cfg.batch_size}")
                tape.backward(loss)
            opt.step()
            loss_sum += float(loss.data) * len(idx)
            correct += int((_predictions(kind, h_cnn, h_gnn, cfg.alpha) == yb).sum())

        val_loss, val_acc = _eval_pass(kind, model, bundle.val_images,
                                       bundle.val_graphs, cfg.alpha)
        stats = EpochStats(epoch=epoch, train_loss=loss_sum / n,
                           train_acc=100.0 * correct / n,
                           val_loss=val_loss, val_acc=val_acc)
        report.epochs.append(stats)
        if log:
            log(f"epoch {epoch:3d}  train_loss {stats.train_loss:.4f}  "
                f"train_acc {stats.train_acc:6.2f}  val_loss {val_loss:.4f}  "
                f"val_acc {val_acc:6.2f}")
        if val_acc > best_acc:
            best_acc, best_snap, stall = val_acc, _snapshot(model), 0
            report.best_epoch = epoch
        else:
            stall += 1
            if stall >= cfg.patience:
                break

    if restore_best and best_snap is not None:
        _restore(model, best_snap)
    if bundle.test_images is not None or bundle.test_graphs is not None:
        report.test = evaluate(model, bundle.test_images, bundle.test_graphs)
    report.wall_clock_s = time.monotonic() - started
    return report, model


def evaluate(model_or_path, images: LabeledDataset | None = None,
             graphs: list | None = None) -> dict:
    """Accuracy percentages on a test split.

    Coupled checkpoints report cnn/gnn/hybrid accuracy; single-tower
    checkpoints report one accuracy. Accepts a model object or a checkpoint
    path.
    """
    model = model_or_path
    if isinstance(model_or_path, (str, Path)):
        model = M.load_checkpoint(model_or_path)
    if isinstance(model, CoupledModel):
        kind = "coupled"
    elif isinstance(model, CnnModel):
        kind = "cnn"
    elif isinstance(model, GnnModel):
        kind = "gnn"
    else:
        raise CheckpointError(f"not a model or checkpoint: {type(model_or_path)}")

    if kind in ("cnn", "coupled") and images is None:
        raise CheckpointError(f"{kind} evaluation needs an image dataset")
    if kind in ("gnn", "coupled") and graphs is None:
        raise CheckpointError(f"{kind} evaluation needs a graph dataset")

    try:
        if kind == "cnn":
            _, acc = _eval_pass("cnn", model, images, None, 1.0)
            return {"accuracy": acc}
        if kind == "gnn":
            _, acc = _eval_pass("gnn", model, None, graphs, 0.0)
            return {"accuracy": acc}
        if images is not None and graphs is not None:
            if len(images) != len(graphs):
                raise ConsistencyError(
                    f"test: {len(images)} images but {len(graphs)} graphs")
        alpha = model.hybrid.alpha
        n = len(images)
        labels = images.labels
        correct = {"cnn": 0, "gnn": 0, "hybrid": 0}
        for s, e in _batch_bounds(n, EVAL_BATCH):
            idx = np.arange(s, e)
            h_cnn, h_gnn = _forward_split("coupled", model, images, graphs, idx, "eval")
            yb = labels[idx]
            correct["cnn"] += int((np.argmax(h_cnn.data, axis=1) == yb).sum())
            correct["gnn"] += int((np.argmax(h_gnn.data, axis=1) == yb).sum())
            hybrid = hybrid_predict(Logits(h_cnn, h_gnn), HybridConfig(alpha))
            correct["hybrid"] += int((hybrid == yb).sum())
        return {
            "cnn_accuracy": 100.0 * correct["cnn"] / n,
            "gnn_accuracy": 100.0 * correct["gnn"] / n,
            "hybrid_accuracy": 100.0 * correct["hybrid"] / n,
        }
    except ShapeError as e:
        raise CheckpointError(f"checkpoint does not match the data: {e}") from e


@dataclass
class SweepResult:
    points: list  # (config dict, summary dict) in run order
    best: dict | None

    def to_jsonl(self) -> str:
        lines = [json.dumps({"type": "point", "config": c, "result": r}, sort_keys=True)
                 for c, r in self.points]
        lines.append(json.dumps({"type": "best", "config": self.best}, sort_keys=True))
        return "\n".join(lines) + "\n"


def sweep(kind: str, bundle: DataBundle, base_cfg: TrainConfig, log=None) -> SweepResult:
    """Run the full hyperparameter grid; select by max validation accuracy.

    Ties prefer the lower learning rate, then the smaller batch. A diverging
    point is recorded and skipped, not fatal.
    """
    points = []
    best_key, best_cfg = None, None
    for batch_size in SWEEP_BATCH_SIZES:
        for lr in SWEEP_LEARNING_RATES:
            for wd in SWEEP_WEIGHT_DECAYS:
                cfg = TrainConfig(
                    batch_size=batch_size, epochs=base_cfg.epochs, seed=base_cfg.seed,
                    alpha=base_cfg.alpha, learning_rate=lr, weight_decay=wd,
                    patience=base_cfg.patience, hidden_dim=base_cfg.hidden_dim)
                if log:
                    log(f"sweep point: batch={batch_size} lr={lr} wd={wd}")
                try:
                    report, _ = train_model(kind, bundle, cfg)
                    val_acc = max(e.val_acc for e in report.epochs)
                    summary = {"val_accuracy": val_acc, "best_epoch": report.best_epoch,
                               "diverged": False}
                    key = (val_acc, -lr, -batch_size)
                    if best_key is None or key > best_key:
                        best_key, best_cfg = key, cfg.as_dict()
                except DivergenceError as e:
                    summary = {"val_accuracy": None, "best_epoch": None,
                               "diverged": True, "error": str(e)}
                points.append((cfg.as_dict(), summary))
    return SweepResult(points=points, best=best_cfg)
