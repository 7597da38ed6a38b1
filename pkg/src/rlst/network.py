"""The recurrent approximator: embeddings, dense layers, residual GRU stack, head.

One call of :func:`forward_step` is one decision step. The head emits
``trg_vocab_size + 2`` values per row: token logits followed by the READ and
WRITE return estimates.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .data import RESERVED

READ_COL, WRITE_COL = 0, 1


@dataclass(frozen=True)
class RLSTNetConfig:
    src_vocab_size: int
    trg_vocab_size: int
    emb_dim: int = 256
    hidden_dim: int = 512
    num_gru_layers: int = 4
    leaky_slope: float = 0.01
    dropout_in: float = 0.2
    dropout_out: float = 0.5
    precision: str = "float64"

    def __post_init__(self):
        if min(self.src_vocab_size, self.trg_vocab_size) < len(RESERVED):
            raise ValueError("vocabulary sizes must be >= 4 to hold the reserved tokens")
        for name in ("emb_dim", "hidden_dim", "num_gru_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("dropout_in", "dropout_out"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def to_dict(self):
        return asdict(self)


class RLSTNet:
    """Parameters of the approximator, kept in a fixed, named order."""

    def __init__(self, config: RLSTNetConfig, params: dict):
        self.config = config
        self.params = params
        h = config.hidden_dim
        for l in range(config.num_gru_layers):
            if params[f"gru{l}.W"].shape != (h, 3 * h):
                raise ValueError("GRU input width must equal hidden_dim for the residual sum")

    def __getitem__(self, name) -> ad.Tensor:
        return self.params[name]

    def num_parameters(self):
        return sum(p.value.size for p in self.params.values())

    def node_names(self):
        return {p.node: name for name, p in self.params.items()}

    def named_grads(self, grads: dict) -> dict:
        """Re-key a node-id gradient map by parameter name."""
        return {name: grads[p.node] for name, p in self.params.items() if p.node in grads}


def param_shapes(config: RLSTNetConfig):
    e, h = config.emb_dim, config.hidden_dim
    shapes = {
        "src_emb": (config.src_vocab_size, e),
        "trg_emb": (config.trg_vocab_size, e),
        "in_dense.W": (2 * e, h),
        "in_dense.b": (h,),
    }
    for l in range(config.num_gru_layers):
        shapes[f"gru{l}.W"] = (h, 3 * h)
        shapes[f"gru{l}.U"] = (h, 3 * h)
        shapes[f"gru{l}.b"] = (3 * h,)
        shapes[f"gru{l}.b_n"] = (h,)
    shapes["out_dense.W"] = (h, h)
    shapes["out_dense.b"] = (h,)
    shapes["head.W"] = (h, config.trg_vocab_size + 2)
    shapes["head.b"] = (config.trg_vocab_size + 2,)
    return shapes


def init_network(config: RLSTNetConfig, seed=0) -> RLSTNet:
    """Embeddings ~ N(0, 1); weight matrices ~ U(+-1/sqrt(fan_in)); biases 0."""
    rng = np.random.default_rng(seed)
    dtype = config.dtype
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("_emb"):
            value = rng.standard_normal(shape)
        elif len(shape) == 1:
            value = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            value = rng.uniform(-bound, bound, size=shape)
        params[name] = ad.parameter(value, dtype=dtype)
    return RLSTNet(config, params)


def with_values(config: RLSTNetConfig, values: dict) -> RLSTNet:
    """Build a network from raw arrays (e.g. a checkpoint)."""
    shapes = param_shapes(config)
    if set(values) != set(shapes):
        raise ValueError("parameter names do not match the configuration")
    params = {}
    for name, shape in shapes.items():
        v = np.asarray(values[name])
        if v.shape != shape:
            raise ValueError(f"{name}: shape {v.shape}, expected {shape}")
        params[name] = ad.parameter(v, dtype=config.dtype)
    return RLSTNet(config, params)


def initial_hidden(net: RLSTNet, batch_size: int = 1) -> list[ad.Tensor]:
    h = net.config.hidden_dim
    return [ad.constant(np.zeros((batch_size, h)), dtype=net.config.dtype)
            for _ in range(net.config.num_gru_layers)]


def _dropout(x: ad.Tensor, p: float, train: bool, rng):
    if not train or p == 0.0:
        return x
    keep = 1.0 - p
    return ad.dropout(x, rng.random(x.shape) < keep, keep)


def gru_cell(x: ad.Tensor, h: ad.Tensor, W, U, b, b_n) -> ad.Tensor:
    """u, r = sigma(xW + hU + b); n = tanh(xW_n + r*(hU_n + b_n) + b_xn)."""
    return ad.gru(x, h, W, U, b, b_n)


def step(net: RLSTNet, src_ids, trg_ids, hidden, train=False, rng=None):
    """One decision step for a batch of rows.

    Returns the raw head output Tensor ``[rows, trg_vocab + 2]`` and the new
    per-layer hidden states.
    """
    cfg = net.config
    src_ids = np.atleast_1d(np.asarray(src_ids))
    trg_ids = np.atleast_1d(np.asarray(trg_ids))
    if src_ids.shape != trg_ids.shape or src_ids.ndim != 1:
        raise ValueError(f"token id arrays disagree: {src_ids.shape} vs {trg_ids.shape}")
    if len(hidden) != cfg.num_gru_layers:
        raise ValueError(f"hidden state has {len(hidden)} layers, network has {cfg.num_gru_layers}")
    if train and rng is None:
        raise ValueError("training mode needs a random generator for dropout")
    p = net.params
    x = ad.concat([ad.embedding_row(p["src_emb"], src_ids),
                   ad.embedding_row(p["trg_emb"], trg_ids)], axis=1)
    x = ad.leaky_relu(ad.affine(x, p["in_dense.W"], p["in_dense.b"]), cfg.leaky_slope)
    x = _dropout(x, cfg.dropout_in, train, rng)
    new_hidden = []
    for l, h in enumerate(hidden):
        h_new = gru_cell(x, h, p[f"gru{l}.W"], p[f"gru{l}.U"], p[f"gru{l}.b"], p[f"gru{l}.b_n"])
        new_hidden.append(h_new)
        x = ad.add(x, h_new)
    x = ad.leaky_relu(ad.affine(x, p["out_dense.W"], p["out_dense.b"]), cfg.leaky_slope)
    x = _dropout(x, cfg.dropout_out, train, rng)
    out = ad.affine(x, p["head.W"], p["head.b"])
    return out, new_hidden


def forward_step(net: RLSTNet, src_tok, trg_tok, hidden, mode="eval", rng=None):
    """Split form of :func:`step`: ``(logits, q_read, q_write, hidden')``."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    out, new_hidden = step(net, src_tok, trg_tok, hidden, mode == "train", rng)
    v = net.config.trg_vocab_size
    return (ad.slice_cols(out, 0, v), ad.slice_cols(out, v, v + 1),
            ad.slice_cols(out, v + 1, v + 2), new_hidden)
