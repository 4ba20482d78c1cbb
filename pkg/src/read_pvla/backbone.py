"""Cross-modal transformer stand-in for a pre-trained grounding model.

Language tokens attend over video frames in each block; video features pass
through every block untouched. A block computes::

    X = MultiHeadAttention(Q = H_L W_q, K = H_V W_k, V = H_V W_v)
    P = LN(X + H_L)
    O = GELU(P W_ff + b_ff)
    H = LN(O + P)

and inserted modules hook in at fixed points: READ adapters rewrite ``O``
before the last Add & Norm, plain adapters rewrite ``X`` and ``O`` (one of
each), LoRA patches the query and value weights, and prompt rows are
prepended after embedding.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .adapters import (
    LoraPatch,
    PlainAdapter,
    ReadAdapter,
    lora_effective_weight,
    plain_adapter_forward,
    read_forward,
)
from .autodiff import (
    Tensor,
    activation,
    add,
    as_tensor,
    cols,
    concat_cols,
    concat_rows,
    layer_norm,
    matmul,
    mean_rows,
    mul,
    reshape,
    rows,
    softmax_rows,
    transpose,
)
from .errors import ConfigError, DimensionError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    num_blocks: int = 4
    num_heads: int = 4
    d_in_video: int = 1024
    d_in_lang: int = 1024
    max_len_video: int = 64
    max_len_lang: int = 32
    adapters_per_block: int = 1
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in (
            "d",
            "num_blocks",
            "num_heads",
            "d_in_video",
            "d_in_lang",
            "max_len_video",
            "max_len_lang",
            "adapters_per_block",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d % self.num_heads:
            raise ConfigError(f"d={self.d} is not divisible by num_heads={self.num_heads}")
        if self.ln_eps <= 0:
            raise ConfigError("ln_eps must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def block_param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.d
    return {
        "query.weight": (d, d),
        "query.bias": (d,),
        "key.weight": (d, d),
        "key.bias": (d,),
        "value.weight": (d, d),
        "value.bias": (d,),
        "ln1.gain": (d,),
        "ln1.bias": (d,),
        "ffn.weight": (d, d),
        "ffn.bias": (d,),
        "ln2.gain": (d,),
        "ln2.bias": (d,),
    }


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every backbone parameter name with its shape, in canonical order."""
    d = cfg.d
    shapes = {
        "embed.video.weight": (cfg.d_in_video, d),
        "embed.video.bias": (d,),
        "embed.video.pos": (cfg.max_len_video, d),
        "embed.lang.weight": (cfg.d_in_lang, d),
        "embed.lang.bias": (d,),
        "embed.lang.pos": (cfg.max_len_lang, d),
    }
    for m in range(cfg.num_blocks):
        for k, s in block_param_shapes(cfg).items():
            shapes[f"blocks.{m}.{k}"] = s
    shapes["head.weight"] = (d, d)
    shapes["head.bias"] = (1,)
    return shapes


class Block:
    """Named view onto one block's parameters inside a :class:`Backbone`."""

    def __init__(self, params: dict[str, Tensor], index: int, num_heads: int, ln_eps: float):
        self.index, self.num_heads, self.ln_eps = index, num_heads, ln_eps
        prefix = f"blocks.{index}."
        self.params = {k[len(prefix) :]: v for k, v in params.items() if k.startswith(prefix)}

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    @property
    def d(self) -> int:
        return self.params["query.weight"].shape[0]


@dataclass
class BlockInsertions:
    """Modules attached to one block; any field may be empty."""

    read: list[ReadAdapter] = field(default_factory=list)
    adapter_attn: PlainAdapter | None = None
    adapter_ffn: PlainAdapter | None = None
    lora_query: LoraPatch | None = None
    lora_value: LoraPatch | None = None


class Backbone:
    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        shapes = param_shapes(cfg)
        if params is None:
            params = {n: Tensor(np.zeros(s)) for n, s in shapes.items()}
        if list(params) != list(shapes):
            raise ConfigError("backbone parameter names do not match the configuration")
        for n, s in shapes.items():
            if params[n].shape != s:
                raise DimensionError(f"{n}: expected shape {s}, got {params[n].shape}")
        self.params = params
        self.frozen = {n: False for n in params}
        self.meta: dict = {}

    @classmethod
    def initialize(cls, cfg: ModelConfig, seed: int) -> "Backbone":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in param_shapes(cfg).items():
            leaf = name.rsplit(".", 1)[1]
            if name == "head.weight":
                # start as a plain similarity between frames and pooled language
                data = np.eye(shape[0])
            elif leaf == "weight":
                data = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
            elif leaf == "pos":
                data = rng.normal(0.0, 0.1, size=shape)
            elif leaf == "gain":
                data = np.ones(shape)
            else:
                data = np.zeros(shape)
            params[name] = Tensor(data)
        return cls(cfg, params)

    def block(self, m: int) -> Block:
        if not 0 <= m < self.cfg.num_blocks:
            raise IndexError(f"block index {m} out of range")
        return Block(self.params, m, self.cfg.num_heads, self.cfg.ln_eps)

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def freeze(self) -> "Backbone":
        for n in self.frozen:
            self.frozen[n] = True
        for p in self.params.values():
            p.requires_grad = False
        return self

    def copy(self) -> "Backbone":
        clone = Backbone(self.cfg, {n: Tensor(p.data.copy()) for n, p in self.params.items()})
        clone.frozen = dict(self.frozen)
        clone.meta = json.loads(json.dumps(self.meta))
        return clone

    def hash(self) -> str:
        """SHA-256 over configuration, names, shapes and little-endian parameter bytes."""
        h = hashlib.sha256(json.dumps(self.cfg.to_dict(), sort_keys=True).encode())
        for n, p in self.params.items():
            h.update(n.encode())
            h.update(repr(p.shape).encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()


# forward -------------------------------------------------------------------------


def _linear(x: Tensor, w, b) -> Tensor:
    return add(matmul(x, w), b)


def embed(model: Backbone, video, lang) -> tuple[Tensor, Tensor]:
    cfg, p = model.cfg, model.params
    out = []
    for x, kind, width, max_len in (
        (video, "video", cfg.d_in_video, cfg.max_len_video),
        (lang, "lang", cfg.d_in_lang, cfg.max_len_lang),
    ):
        x = as_tensor(x)
        if x.data.ndim != 2 or x.shape[1] != width:
            raise DimensionError(f"{kind} features of shape {x.shape} do not match width {width}")
        n = x.shape[0]
        if not 1 <= n <= max_len:
            raise DimensionError(f"{kind} sequence length {n} outside [1, {max_len}]")
        pos = rows(p[f"embed.{kind}.pos"], 0, n)
        out.append(add(_linear(x, p[f"embed.{kind}.weight"], p[f"embed.{kind}.bias"]), pos))
    return out[0], out[1]


def _as_insertions(adapter) -> BlockInsertions:
    if adapter is None:
        return BlockInsertions()
    if isinstance(adapter, BlockInsertions):
        return adapter
    if isinstance(adapter, ReadAdapter):
        return BlockInsertions(read=[adapter])
    raise ConfigError(f"unsupported block insertion {type(adapter).__name__}")


def cross_attention_block(H_L, H_V, block: Block, adapter=None, return_attention: bool = False):
    """One block; returns the new language states (and per-head attention maps if asked).

    ``adapter`` may be a :class:`ReadAdapter`, a :class:`BlockInsertions`, or None.
    """
    H_L, H_V = as_tensor(H_L), as_tensor(H_V)
    d, heads = block.d, block.num_heads
    if H_L.shape[1] != d or H_V.shape[1] != d:
        raise DimensionError(f"block of width {d} got H_L {H_L.shape} and H_V {H_V.shape}")
    ins = _as_insertions(adapter)
    for module in [*ins.read, ins.adapter_attn, ins.adapter_ffn]:
        if module is not None and module.d != d:
            raise DimensionError(f"adapter of width {module.d} inserted into block of width {d}")

    w_q, w_v = block["query.weight"], block["value.weight"]
    if ins.lora_query is not None:
        w_q = lora_effective_weight(w_q, ins.lora_query)
    if ins.lora_value is not None:
        w_v = lora_effective_weight(w_v, ins.lora_value)
    Q = _linear(H_L, w_q, block["query.bias"])
    K = _linear(H_V, block["key.weight"], block["key.bias"])
    V = _linear(H_V, w_v, block["value.bias"])

    dh = d // heads
    scale = 1.0 / np.sqrt(dh)
    maps, outs = [], []
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        qh, kh, vh = (Q, K, V) if heads == 1 else (cols(Q, lo, hi), cols(K, lo, hi), cols(V, lo, hi))
        A = softmax_rows(mul(matmul(qh, transpose(kh)), scale))
        maps.append(A.data)
        outs.append(matmul(A, vh))
    X = outs[0] if heads == 1 else concat_cols(outs)

    if ins.adapter_attn is not None:
        X = plain_adapter_forward(ins.adapter_attn, X)
    P = layer_norm(add(X, H_L), block["ln1.gain"], block["ln1.bias"], block.ln_eps)
    O = activation("gelu", _linear(P, block["ffn.weight"], block["ffn.bias"]))
    if ins.adapter_ffn is not None:
        O = plain_adapter_forward(ins.adapter_ffn, O)
    for read in ins.read:
        O = read_forward(read, O)
    H = layer_norm(add(O, P), block["ln2.gain"], block["ln2.bias"], block.ln_eps)
    return (H, maps) if return_attention else H


@dataclass
class SaliencyOutput:
    logits: Tensor
    # (H_V, H_L^{(m+1)}) after every block, prompt rows removed
    pairs: list[tuple[Tensor, Tensor]]


def forward_saliency(model: Backbone, sample, state=None) -> SaliencyOutput:
    """Per-frame logits ``<W_head h_v,i , meanpool(H_L^{M+1})> / sqrt(d) + b``.

    ``state`` is any object exposing ``prompts() -> (video, lang) | None`` and
    ``for_block(m) -> BlockInsertions``; None runs the bare backbone.
    """
    H_V, H_L = embed(model, sample.video, sample.lang)
    n_v, n_l = H_V.shape[0], H_L.shape[0]
    prompts = state.prompts() if state is not None else None
    n_pv = n_pl = 0
    if prompts is not None:
        pv, pl = prompts
        n_pv, n_pl = pv.shape[0], pl.shape[0]
        H_V = concat_rows([pv, H_V])
        H_L = concat_rows([pl, H_L])

    real_v = rows(H_V, n_pv, n_pv + n_v) if n_pv else H_V
    pairs = []
    for m in range(model.cfg.num_blocks):
        ins = state.for_block(m) if state is not None else None
        H_L = cross_attention_block(H_L, H_V, model.block(m), ins)
        pairs.append((real_v, rows(H_L, n_pl, n_pl + n_l) if n_pl else H_L))

    p = model.params
    pooled = mean_rows(H_L)
    scores = mul(matmul(matmul(real_v, p["head.weight"]), transpose(pooled)), 1.0 / np.sqrt(model.cfg.d))
    logits = reshape(add(scores, p["head.bias"]), (n_v,))
    return SaliencyOutput(logits, pairs)


def predict_scores(model: Backbone, samples, state=None) -> list[np.ndarray]:
    from .autodiff import no_grad

    with no_grad():
        return [forward_saliency(model, s, state).logits.data.copy() for s in samples]


# stand-in pretraining -----------------------------------------------------------------


def build_pretrained_backbone(cfg: ModelConfig, source_data, seed: int, train_cfg=None) -> Backbone:
    """Randomly initialise, fully train on ``source_data`` (task loss only), freeze.

    ``source_data`` is a :class:`~read_pvla.synth.Dataset` whose train split is
    used for fitting and whose val split is scored before and after; both
    numbers land in ``backbone.meta``.
    """
    from dataclasses import replace

    from .trainer import PRETRAIN, pretrain_full

    if not source_data.train:
        raise ConfigError("source dataset has an empty train split")
    model = Backbone.initialize(cfg, seed)
    if train_cfg is None:
        train_cfg = replace(PRETRAIN, seed=seed)
    report = pretrain_full(model, source_data, train_cfg)
    model.freeze()
    model.meta.update(report)
    log.info(
        "stand-in pretraining: source val mAP %.4f at init, %.4f after",
        report["source_map_init"],
        report["source_map_final"],
    )
    return model
