"""Tensor-level computing graph and selection-mask algebra.

Tensors are stored in backpropagation order: bp_index 1 is the tensor
closest to the loss, bp_index N the deepest one.  A selection mask is a
boolean vector over that order; ``sigma`` derives which bp slots must run
gradient-propagation work for a given mask.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


class TensorKind(str, enum.Enum):
    TIED_EMBEDDING = "tied_embedding"
    LINEAR_WEIGHT = "linear_weight"
    BIAS = "bias"
    LN_GAIN = "ln_gain"
    LN_BIAS = "ln_bias"


@dataclass(frozen=True)
class ModelDims:
    """Hyperparameters of the toy decoder architecture."""

    blocks: int
    d: int
    h: int
    ffn: int
    vocab: int
    n: int

    def validate(self) -> None:
        for name in ("blocks", "d", "h", "ffn", "vocab", "n"):
            if getattr(self, name) < 1:
                raise ConfigError(f"dims.{name} must be >= 1, got {getattr(self, name)}")
        if self.d % self.h != 0:
            raise ConfigError(f"dims.d={self.d} not divisible by dims.h={self.h}")
        if self.vocab < 4:
            raise ConfigError(f"dims.vocab must be >= 4 (PAD/BOS/SEP/EOS), got {self.vocab}")


@dataclass(frozen=True)
class TensorMeta:
    id: int
    name: str
    kind: TensorKind
    shape: tuple[int, ...]
    bp_index: int  # 1 = closest to the loss
    segment_id: int


@dataclass
class ModelGraph:
    tensors: list[TensorMeta]  # sorted by bp_index
    family: str  # "decoder" or "chain"
    dims: ModelDims | None = None
    chain_widths: tuple[int, ...] | None = None
    tied_ids: tuple[int, ...] = ()
    _by_name: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.tensors = sorted(self.tensors, key=lambda t: t.bp_index)
        bp = [t.bp_index for t in self.tensors]
        if bp != list(range(1, len(self.tensors) + 1)):
            raise ConfigError("bp_index values must form a permutation of 1..N")
        for t in self.tensors:
            if any(s < 1 for s in t.shape):
                raise ConfigError(f"tensor {t.name} has non-positive shape entry")
        self._by_name = {t.name: t for t in self.tensors}

    def __len__(self) -> int:
        return len(self.tensors)

    def by_name(self, name: str) -> TensorMeta:
        return self._by_name[name]

    def slot(self, name: str) -> int:
        return self._by_name[name].bp_index

    def names_in_bp_order(self) -> list[str]:
        return [t.name for t in self.tensors]

    @property
    def tied_slots(self) -> tuple[int, ...]:
        by_id = {t.id: t for t in self.tensors}
        return tuple(by_id[i].bp_index for i in self.tied_ids)

    # ---- serialization ------------------------------------------------

    def to_json(self) -> str:
        doc = {
            "family": self.family,
            "dims": None if self.dims is None else vars(self.dims),
            "chain_widths": None if self.chain_widths is None else list(self.chain_widths),
            "tied_ids": list(self.tied_ids),
            "tensors": [
                {
                    "id": t.id,
                    "name": t.name,
                    "kind": t.kind.value,
                    "shape": list(t.shape),
                    "bp_index": t.bp_index,
                    "segment_id": t.segment_id,
                }
                for t in self.tensors
            ],
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ModelGraph":
        doc = json.loads(text)
        tensors = [
            TensorMeta(
                id=t["id"],
                name=t["name"],
                kind=TensorKind(t["kind"]),
                shape=tuple(t["shape"]),
                bp_index=t["bp_index"],
                segment_id=t["segment_id"],
            )
            for t in doc["tensors"]
        ]
        dims = ModelDims(**doc["dims"]) if doc.get("dims") else None
        widths = tuple(doc["chain_widths"]) if doc.get("chain_widths") else None
        return cls(
            tensors=tensors,
            family=doc["family"],
            dims=dims,
            chain_widths=widths,
            tied_ids=tuple(doc.get("tied_ids", ())),
        )


# ---- graph builders ----------------------------------------------------

#: per-block tensor names in backprop order (shallowest first); LN gains come
#: after their bias because the bias add is the last forward op, and the V
#: projector leads the QKV group so it can carry the attention backward cost.
_BLOCK_BP_ORDER = [
    ("ffn.b2", TensorKind.BIAS),
    ("ffn.w2", TensorKind.LINEAR_WEIGHT),
    ("ffn.b1", TensorKind.BIAS),
    ("ffn.w1", TensorKind.LINEAR_WEIGHT),
    ("ln2.bias", TensorKind.LN_BIAS),
    ("ln2.gain", TensorKind.LN_GAIN),
    ("attn.b_o", TensorKind.BIAS),
    ("attn.w_o", TensorKind.LINEAR_WEIGHT),
    ("attn.w_v", TensorKind.LINEAR_WEIGHT),
    ("attn.b_v", TensorKind.BIAS),
    ("attn.w_k", TensorKind.LINEAR_WEIGHT),
    ("attn.b_k", TensorKind.BIAS),
    ("attn.w_q", TensorKind.LINEAR_WEIGHT),
    ("attn.b_q", TensorKind.BIAS),
    ("ln1.bias", TensorKind.LN_BIAS),
    ("ln1.gain", TensorKind.LN_GAIN),
]


def _block_shape(name: str, dims: ModelDims) -> tuple[int, ...]:
    d, f = dims.d, dims.ffn
    return {
        "ffn.b2": (d,),
        "ffn.w2": (f, d),
        "ffn.b1": (f,),
        "ffn.w1": (d, f),
        "ln2.bias": (d,),
        "ln2.gain": (d,),
        "attn.b_o": (d,),
        "attn.w_o": (d, d),
        "attn.w_v": (d, d),
        "attn.b_v": (d,),
        "attn.w_k": (d, d),
        "attn.b_k": (d,),
        "attn.w_q": (d, d),
        "attn.b_q": (d,),
        "ln1.bias": (d,),
        "ln1.gain": (d,),
    }[name]


def build_graph(dims: ModelDims) -> ModelGraph:
    """Build the tensor graph of the toy decoder.

    The tied embedding is registered once, at its output-projection use
    (the earliest backprop touch, bp_index 1).
    """
    dims.validate()
    tensors: list[TensorMeta] = []
    next_id = 0
    next_seg = 0
    bp = 1

    def add(name: str, kind: TensorKind, shape: tuple[int, ...], seg: int):
        nonlocal next_id, bp
        tensors.append(TensorMeta(next_id, name, kind, shape, bp, seg))
        next_id += 1
        bp += 1

    embed_seg = next_seg
    next_seg += 1
    add("embed", TensorKind.TIED_EMBEDDING, (dims.vocab, dims.d), embed_seg)
    tied_id = tensors[0].id

    lnf_seg = next_seg
    next_seg += 1
    add("ln_f.bias", TensorKind.LN_BIAS, (dims.d,), lnf_seg)
    add("ln_f.gain", TensorKind.LN_GAIN, (dims.d,), lnf_seg)

    for b in reversed(range(dims.blocks)):
        seg_of = {}
        for part in ("ffn", "ln2", "attn", "ln1"):
            seg_of[part] = next_seg
            next_seg += 1
        for short, kind in _BLOCK_BP_ORDER:
            part = short.split(".")[0]
            add(f"block{b}.{short}", kind, _block_shape(short, dims), seg_of[part])

    return ModelGraph(tensors=tensors, family="decoder", dims=dims, tied_ids=(tied_id,))


def build_dense_chain_graph(widths: tuple[int, ...]) -> ModelGraph:
    """Graph of a bias-free dense chain x -> W1 -> ... -> WL -> squared loss.

    Layer L (closest to the loss) gets bp_index 1.
    """
    if len(widths) < 2:
        raise ConfigError("chain_widths needs at least 2 entries")
    if any(w < 1 for w in widths):
        raise ConfigError("chain_widths entries must be >= 1")
    n_layers = len(widths) - 1
    tensors = []
    for i in range(n_layers):  # i = 0 is the layer closest to the loss
        layer = n_layers - i  # 1-based, input-to-output numbering
        shape = (widths[layer - 1], widths[layer])
        tensors.append(
            TensorMeta(
                id=i,
                name=f"layer{layer}.w",
                kind=TensorKind.LINEAR_WEIGHT,
                shape=shape,
                bp_index=i + 1,
                segment_id=i,
            )
        )
    return ModelGraph(tensors=tensors, family="chain", chain_widths=tuple(widths))


# ---- selection masks ----------------------------------------------------


def as_mask(values, n: int) -> np.ndarray:
    m = np.asarray(values, dtype=bool)
    if m.shape != (n,):
        raise ConfigError(f"mask length {m.shape} does not match tensor count {n}")
    return m


def sigma(mask: np.ndarray) -> np.ndarray:
    """Gradient-path indicator: sigma_i = 1 iff i <= deepest selected slot.

    Index 0 of the vector is bp_index 1 (closest to the loss).  The all-zero
    mask maps to the all-zero sigma.
    """
    m = np.asarray(mask, dtype=bool)
    out = np.zeros_like(m)
    idx = np.flatnonzero(m)
    if idx.size:
        out[: idx[-1] + 1] = True
    return out


def flow_limits(graph: ModelGraph, mask: np.ndarray, convention: str = "inclusive"):
    """Depth limits of gradient flow for a selection mask.

    Returns (arr_limit, prop_limit, tied_selected):
      arr_limit  — deepest bp slot whose gradient-arrival work must run;
      prop_limit — deepest bp slot whose pure-propagation work must run.
    Selecting a tied tensor forces flow to full depth (its weight gradient
    needs the input-side contribution), regardless of convention.
    """
    if convention not in ("inclusive", "exclusive"):
        raise ConfigError(f"dy_convention must be inclusive or exclusive, got {convention!r}")
    m = as_mask(mask, len(graph))
    idx = np.flatnonzero(m)
    n = len(graph)
    if idx.size == 0:
        return 0, 0, False
    kmax = int(idx[-1]) + 1
    tied = any(m[s - 1] for s in graph.tied_slots)
    if tied:
        return n, n, True
    arr = kmax
    prop = kmax if convention == "inclusive" else kmax - 1
    return arr, prop, False
