"""The three classifiers: CNN baseline, superpixel GNN, and the coupled model.

CNN: three blocks of conv3x3(pad 1) -> batchnorm -> relu -> maxpool2, with
32/64/64 channels, then a linear head (optionally one hidden layer of 128).

GNN: three single-head graph-attention layers with 32/64/64 channels and ELU
between them, a global mean-pool readout, and a linear head. Attention per
directed edge (j -> i):

    e_ij  = LeakyReLU(a_dst . W h_i + a_src . W h_j)
    alpha = softmax of e over i's in-edges
    h'_i  = sum_j alpha_ij * W h_j  (+ bias)

Self-loops are added for every node, so an isolated node reduces to W h_i.

The coupled model trains both towers jointly with the blended loss
alpha * L_cnn + (1 - alpha) * L_gnn and predicts from the blended logits
argmax_j(alpha * h_cnn + (1 - alpha) * h_gnn).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, EmptyGraphError, FormatError, ShapeError
from .tensor import Tensor

CHECKPOINT_MAGIC = b"SPXC"
CHECKPOINT_VERSION = 1

CNN_CHANNELS = (32, 64, 64)
GAT_CHANNELS = (32, 64, 64)
LEAKY_SLOPE = 0.2


@dataclass
class HybridConfig:
    """Mixing weight between the CNN loss/logits and the GNN loss/logits."""

    alpha: float = 0.75

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")


@dataclass
class Logits:
    """Per-sample class scores from both towers, rows aligned by input."""

    h_cnn: np.ndarray
    h_gnn: np.ndarray

    def __post_init__(self):
        c = self.h_cnn.data if isinstance(self.h_cnn, Tensor) else self.h_cnn
        g = self.h_gnn.data if isinstance(self.h_gnn, Tensor) else self.h_gnn
        if c.shape != g.shape:
            raise ShapeError(f"logit shapes differ: {c.shape} vs {g.shape}")


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def _bias_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class CnnModel:
    """Three conv/batchnorm/relu/maxpool blocks plus a linear classifier head."""

    def __init__(self, in_channels: int, num_classes: int, image_hw: tuple[int, int],
                 hidden_dim: int | None = None, rng: np.random.Generator | None = None):
        h, w = image_hw
        if h < 8 or w < 8:
            raise ShapeError(f"input {image_hw} too small for three 2x pools")
        rng = rng or np.random.default_rng(0)
        self.arch = {
            "model": "cnn",
            "in_channels": in_channels,
            "num_classes": num_classes,
            "image_hw": [h, w],
            "hidden_dim": hidden_dim,
        }
        self.params: dict[str, Tensor] = {}
        self.state: dict[str, np.ndarray] = {}

        c_prev = in_channels
        for i, c_out in enumerate(CNN_CHANNELS, start=1):
            fan_in = c_prev * 9
            self._add(f"block{i}.conv.w", _kaiming_uniform(rng, (c_out, c_prev, 3, 3), fan_in))
            self._add(f"block{i}.conv.b", _bias_uniform(rng, (c_out,), fan_in))
            self._add(f"block{i}.bn.gamma", np.ones(c_out))
            self._add(f"block{i}.bn.beta", np.zeros(c_out))
            self.state[f"block{i}.bn.mean"] = np.zeros(c_out)
            self.state[f"block{i}.bn.var"] = np.ones(c_out)
            c_prev = c_out

        for _ in range(3):
            h, w = (h - 2) // 2 + 1, (w - 2) // 2 + 1
        flat = CNN_CHANNELS[-1] * h * w
        self.arch["flat_dim"] = flat
        if hidden_dim:
            self._add("hidden.w", _kaiming_uniform(rng, (flat, hidden_dim), flat))
            self._add("hidden.b", _bias_uniform(rng, (hidden_dim,), flat))
            flat = hidden_dim
        self._add("head.w", _kaiming_uniform(rng, (flat, num_classes), flat))
        self._add("head.b", _bias_uniform(rng, (num_classes,), flat))

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True)

    @classmethod
    def from_arch(cls, arch: dict) -> "CnnModel":
        return cls(arch["in_channels"], arch["num_classes"], tuple(arch["image_hw"]),
                   hidden_dim=arch.get("hidden_dim"))

    def forward(self, x: Tensor, train: bool) -> Tensor:
        n, c, h, w = x.data.shape
        if (c, h, w) != (self.arch["in_channels"], *self.arch["image_hw"]):
            raise ShapeError(
                f"input {(c, h, w)} does not match model "
                f"{(self.arch['in_channels'], *self.arch['image_hw'])}"
            )
        if h < 8 or w < 8:
            raise ShapeError(f"spatial dims {(h, w)} too small for three 2x pools")
        p = self.params
        for i in range(1, 4):
            x = T.conv2d(x, p[f"block{i}.conv.w"], p[f"block{i}.conv.b"], stride=1, padding=1)
            x = T.batchnorm(x, p[f"block{i}.bn.gamma"], p[f"block{i}.bn.beta"],
                            self.state[f"block{i}.bn.mean"], self.state[f"block{i}.bn.var"],
                            train=train)
            x = T.relu(x)
            x = T.maxpool2d(x, 2, 2)
        x = T.reshape(x, (n, self.arch["flat_dim"]))
        if self.arch.get("hidden_dim"):
            x = T.relu(T.linear(x, p["hidden.w"], p["hidden.b"]))
        return T.linear(x, p["head.w"], p["head.b"])


def cnn_forward(model: CnnModel, batch: np.ndarray | Tensor, mode: str = "eval") -> Tensor:
    """Logits for a (n, c, h, w) batch; eval mode uses running batch-norm stats."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    return model.forward(x, train=(mode == "train"))


@dataclass
class GraphBatch:
    """Graphs concatenated into one node/edge block with a graph-id vector."""

    node_features: np.ndarray
    edge_src: np.ndarray
    edge_dst: np.ndarray
    graph_ids: np.ndarray
    num_graphs: int
    num_nodes: int
    labels: np.ndarray


def batch_graphs(graphs) -> GraphBatch:
    """Concatenate graphs block-diagonally; undirected pairs become both directions."""
    if not graphs:
        raise EmptyGraphError("cannot batch zero graphs")
    feats, srcs, dsts, gids, labels = [], [], [], [], []
    offset = 0
    for gi, g in enumerate(graphs):
        if g.num_nodes == 0:
            raise EmptyGraphError(f"graph {gi} has no nodes")
        feats.append(np.asarray(g.node_features, dtype=np.float64))
        if len(g.edges):
            e = np.asarray(g.edges, dtype=np.int64) + offset
            srcs.append(np.concatenate([e[:, 0], e[:, 1]]))
            dsts.append(np.concatenate([e[:, 1], e[:, 0]]))
        gids.append(np.full(g.num_nodes, gi, dtype=np.int64))
        labels.append(g.label)
        offset += g.num_nodes
    empty = np.empty(0, dtype=np.int64)
    return GraphBatch(
        node_features=np.concatenate(feats),
        edge_src=np.concatenate(srcs) if srcs else empty,
        edge_dst=np.concatenate(dsts) if dsts else empty,
        graph_ids=np.concatenate(gids),
        num_graphs=len(graphs),
        num_nodes=offset,
        labels=np.asarray(labels, dtype=np.int64),
    )


def gat_attention(wh: Tensor, edge_src: np.ndarray, edge_dst: np.ndarray,
                  att_dst: Tensor, att_src: Tensor, num_nodes: int) -> Tensor:
    """Per-edge attention weights, softmax-normalized over each in-neighborhood."""
    s_dst = T.matmul(wh, att_dst)
    s_src = T.matmul(wh, att_src)
    e = T.add(T.gather_rows(s_dst, edge_dst), T.gather_rows(s_src, edge_src))
    return T.segment_softmax(T.leaky_relu(e, LEAKY_SLOPE), edge_dst, num_nodes)


def gat_layer(node_feats: Tensor, edge_src: np.ndarray, edge_dst: np.ndarray,
              w: Tensor, att_dst: Tensor, att_src: Tensor,
              bias: Tensor | None = None, num_nodes: int | None = None) -> Tensor:
    """One single-head graph-attention layer over a directed edge list.

    The edge list must already contain self-loops; attention is normalized
    over each node's in-neighborhood.
    """
    v = num_nodes if num_nodes is not None else node_feats.data.shape[0]
    wh = T.matmul(node_feats, w)
    alpha = gat_attention(wh, edge_src, edge_dst, att_dst, att_src, v)
    messages = T.scale_rows(T.gather_rows(wh, edge_src), alpha)
    agg = T.segment_sum(messages, edge_dst, v)
    if bias is not None:
        agg = T.add_bias(agg, bias)
    return agg


class GnnModel:
    """Three-layer single-head GAT with mean-pool readout and a linear head."""

    def __init__(self, in_features: int, num_classes: int,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.arch = {
            "model": "gnn",
            "in_features": in_features,
            "num_classes": num_classes,
        }
        self.params: dict[str, Tensor] = {}
        f_prev = in_features
        for i, f_out in enumerate(GAT_CHANNELS, start=1):
            self.params[f"gat{i}.w"] = Tensor(
                _kaiming_uniform(rng, (f_prev, f_out), f_prev), requires_grad=True)
            self.params[f"gat{i}.att_dst"] = Tensor(
                _xavier_uniform(rng, (f_out, 1), 2 * f_out, 1), requires_grad=True)
            self.params[f"gat{i}.att_src"] = Tensor(
                _xavier_uniform(rng, (f_out, 1), 2 * f_out, 1), requires_grad=True)
            self.params[f"gat{i}.bias"] = Tensor(np.zeros(f_out), requires_grad=True)
            f_prev = f_out
        self.params["head.w"] = Tensor(
            _kaiming_uniform(rng, (f_prev, num_classes), f_prev), requires_grad=True)
        self.params["head.b"] = Tensor(
            _bias_uniform(rng, (num_classes,), f_prev), requires_grad=True)
        self.state: dict[str, np.ndarray] = {}

    @classmethod
    def from_arch(cls, arch: dict) -> "GnnModel":
        return cls(arch["in_features"], arch["num_classes"])

    def forward(self, batch: GraphBatch, train: bool = False) -> Tensor:
        if batch.node_features.shape[1] != self.arch["in_features"]:
            raise ShapeError(
                f"graph feature_dim {batch.node_features.shape[1]} does not match "
                f"model in_features {self.arch['in_features']}"
            )
        v = batch.num_nodes
        loops = np.arange(v, dtype=np.int64)
        src = np.concatenate([batch.edge_src, loops])
        dst = np.concatenate([batch.edge_dst, loops])
        h = Tensor(batch.node_features)
        p = self.params
        for i in range(1, 4):
            h = gat_layer(h, src, dst, p[f"gat{i}.w"], p[f"gat{i}.att_dst"],
                          p[f"gat{i}.att_src"], p[f"gat{i}.bias"], num_nodes=v)
            h = T.elu(h)
        pooled = T.segment_mean(h, batch.graph_ids, batch.num_graphs)
        return T.linear(pooled, p["head.w"], p["head.b"])


def gnn_forward(model: GnnModel, batch, mode: str = "eval") -> Tensor:
    """Logits for a GraphBatch or sequence of graphs, one row per graph."""
    if not isinstance(batch, GraphBatch):
        batch = batch_graphs(batch)
    return model.forward(batch, train=(mode == "train"))


class CoupledModel:
    """CNN and GNN towers sharing no parameters, blended by HybridConfig."""

    def __init__(self, cnn: CnnModel, gnn: GnnModel, hybrid: HybridConfig):
        self.cnn = cnn
        self.gnn = gnn
        self.hybrid = hybrid
        self.arch = {
            "model": "coupled",
            "cnn": cnn.arch,
            "gnn": gnn.arch,
            "alpha": hybrid.alpha,
        }

    @property
    def params(self) -> dict[str, Tensor]:
        merged = {f"cnn.{k}": v for k, v in self.cnn.params.items()}
        merged.update({f"gnn.{k}": v for k, v in self.gnn.params.items()})
        return merged

    @property
    def state(self) -> dict[str, np.ndarray]:
        return {f"cnn.{k}": v for k, v in self.cnn.state.items()}

    @classmethod
    def from_arch(cls, arch: dict) -> "CoupledModel":
        return cls(CnnModel.from_arch(arch["cnn"]), GnnModel.from_arch(arch["gnn"]),
                   HybridConfig(arch["alpha"]))


def hybrid_loss(h_cnn: Tensor, h_gnn: Tensor, targets: np.ndarray,
                cfg: HybridConfig) -> tuple[Tensor, Tensor, Tensor]:
    """(blended, cnn, gnn) mean cross-entropies; gradients scale by alpha / 1-alpha."""
    if h_cnn.data.shape != h_gnn.data.shape:
        raise ShapeError(f"logit shapes differ: {h_cnn.data.shape} vs {h_gnn.data.shape}")
    l_c = T.softmax_cross_entropy(h_cnn, targets)
    l_g = T.softmax_cross_entropy(h_gnn, targets)
    l_cg = T.add(T.scale(l_c, cfg.alpha), T.scale(l_g, 1.0 - cfg.alpha))
    return l_cg, l_c, l_g


def hybrid_predict(logits: Logits, cfg: HybridConfig) -> np.ndarray:
    """Argmax of alpha * h_cnn + (1 - alpha) * h_gnn per row; ties pick the lower class."""
    h_c = logits.h_cnn.data if isinstance(logits.h_cnn, Tensor) else np.asarray(logits.h_cnn)
    h_g = logits.h_gnn.data if isinstance(logits.h_gnn, Tensor) else np.asarray(logits.h_gnn)
    return np.argmax(cfg.alpha * h_c + (1.0 - cfg.alpha) * h_g, axis=1)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model) -> None:
    """Versioned binary: JSON header (arch + tensor index) then raw f64 buffers."""
    entries = []
    buffers = []
    for name in sorted(model.params):
        arr = model.params[name].data
        entries.append({"name": name, "shape": list(arr.shape), "role": "param"})
        buffers.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    for name in sorted(model.state):
        arr = model.state[name]
        entries.append({"name": name, "shape": list(arr.shape), "role": "state"})
        buffers.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    header = json.dumps({"arch": model.arch, "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        for buf in buffers:
            f.write(buf)


def load_checkpoint(path):
    """Rebuild a model from a checkpoint file; exact inverse of save_checkpoint."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {data[:4]!r}")
    version, header_len = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[12:12 + header_len].decode())
    arch = header["arch"]
    builders = {"cnn": CnnModel, "gnn": GnnModel, "coupled": CoupledModel}
    model = builders[arch["model"]].from_arch(arch)

    off = 12 + header_len
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
        name = entry["name"]
        if entry["role"] == "param":
            target = model.params[name]
            if target.data.shape != shape:
                raise FormatError(f"{path}: tensor {name} shape {shape} vs {target.data.shape}")
            target.data = arr
        else:
            if arch["model"] == "coupled":
                prefix, rest = name.split(".", 1)
                model.cnn.state[rest][...] = arr
            else:
                model.state[name][...] = arr
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    return model
