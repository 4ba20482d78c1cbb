"""Fine-tuning strategies, the joint task + alignment objective, AdamW, checkpoints.

A run never mutates the backbone it is handed: :func:`attach_strategy` works on
a copy, inserts whatever modules the strategy needs and marks the trainable
subset. Everything else in the copy stays bit-for-bit frozen.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .adapters import (
    CELL_KINDS,
    RECURRENT_INITS,
    LoraPatch,
    PlainAdapter,
    ReadAdapter,
    init_adapter_params,
)
from .autodiff import Tensor, add, backward, bce_with_logits, mul, no_grad
from .backbone import Backbone, BlockInsertions, ModelConfig, forward_saliency, predict_scores
from .errors import CompatibilityError, ConfigError, NumericError, TrainingError
from .pot import SolverConfig, pvla_losses
from .synth import mean_average_precision

log = logging.getLogger(__name__)

STRATEGIES = ("full", "bias", "partial", "proj", "lora", "prompt", "adapter", "read")
ADAPTER_LIKE = ("lora", "prompt", "adapter", "read")
PVLA_MODES = ("off", "vla", "pvla")
CHECKPOINT_FORMAT = "read-pvla-checkpoint/1"
BACKBONE_FORMAT = "read-pvla-backbone/1"


@dataclass(frozen=True)
class FinetuneStrategy:
    kind: str = "read"
    rank: int = 4
    bottleneck: int = 4
    prompt_len: int = 8
    cell_kind: str = "rnn"
    recurrent_init: str = "kaiming"

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.kind!r}")
        if self.recurrent_init not in RECURRENT_INITS:
            raise ConfigError(f"recurrent_init must be one of {RECURRENT_INITS}")
        if self.cell_kind not in CELL_KINDS:
            raise ConfigError(f"cell_kind must be one of {CELL_KINDS}, got {self.cell_kind!r}")
        if self.prompt_len < 1:
            raise ConfigError("prompt_len must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "FinetuneStrategy":
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 4
    learning_rate: float = 1e-2
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    lambda_pvla: float = 1.0
    pvla_mode: str = "pvla"
    seed: int = 0
    preset: str | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.lambda_pvla < 0:
            raise ConfigError("lambda_pvla must be non-negative")
        if self.pvla_mode not in PVLA_MODES:
            raise ConfigError(f"pvla_mode must be one of {PVLA_MODES}, got {self.pvla_mode!r}")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ConfigError(f"betas must lie in [0, 1), got {self.betas}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


PRETRAIN = TrainConfig(epochs=12, batch_size=8, learning_rate=1e-4, pvla_mode="off")

# Hyperparameters copied from the original per-benchmark tables; the data is
# synthetic regardless of the name.
PRESETS = {
    "youtube-umt": {"train": {"learning_rate": 1e-2, "epochs": 100, "batch_size": 4}, "model": {"num_blocks": 8}},
    "tvsum-umt": {"train": {"learning_rate": 1e-3, "epochs": 500, "batch_size": 1}, "model": {"num_blocks": 8}},
    "qvh-mdetr": {"train": {"learning_rate": 1e-4, "epochs": 200, "batch_size": 32}, "model": {"num_blocks": 8}},
    "how2-vg": {"train": {"learning_rate": 1e-3, "epochs": 100, "batch_size": 16}, "model": {"num_blocks": 6}},
}


# strategy state -------------------------------------------------------------------


def _child_seed(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([seed, *path]).generate_state(1)[0])


class StrategyState:
    """Inserted modules of one strategy, addressable by flat parameter name."""

    def __init__(self, strategy: FinetuneStrategy, cfg: ModelConfig):
        self.strategy, self.cfg = strategy, cfg
        self.blocks = [BlockInsertions() for _ in range(cfg.num_blocks)]
        self.prompt: dict[str, Tensor] = {}

    def prompts(self):
        if not self.prompt:
            return None
        return self.prompt["prompt.video"], self.prompt["prompt.lang"]

    def for_block(self, m: int) -> BlockInsertions:
        return self.blocks[m]

    def named_params(self) -> dict[str, Tensor]:
        out = dict(self.prompt)
        for m, ins in enumerate(self.blocks):
            modules = [(f"read.{a}", r) for a, r in enumerate(ins.read)]
            modules += [
                ("adapter_attn", ins.adapter_attn),
                ("adapter_ffn", ins.adapter_ffn),
                ("lora_query", ins.lora_query),
                ("lora_value", ins.lora_value),
            ]
            for prefix, mod in modules:
                if mod is not None:
                    for k, p in mod.params.items():
                        out[f"blocks.{m}.{prefix}.{k}"] = p
        return out

    def num_params(self) -> int:
        return sum(p.size for p in self.named_params().values())


def build_state(strategy: FinetuneStrategy, cfg: ModelConfig, seed: int) -> StrategyState:
    """Create and initialise the modules ``strategy`` inserts into a backbone of ``cfg``."""
    state = StrategyState(strategy, cfg)
    d, kind = cfg.d, strategy.kind
    for m, ins in enumerate(state.blocks):
        if kind == "read":
            for a in range(cfg.adapters_per_block):
                mod = ReadAdapter(d, strategy.bottleneck, strategy.cell_kind)
                ins.read.append(init_adapter_params(mod, _child_seed(seed, 1, m, a), strategy.recurrent_init))
        elif kind == "adapter":
            ins.adapter_attn = init_adapter_params(PlainAdapter(d, strategy.bottleneck), _child_seed(seed, 2, m, 0))
            ins.adapter_ffn = init_adapter_params(PlainAdapter(d, strategy.bottleneck), _child_seed(seed, 2, m, 1))
        elif kind == "lora":
            ins.lora_query = init_adapter_params(LoraPatch(d, strategy.rank, "query"), _child_seed(seed, 3, m, 0))
            ins.lora_value = init_adapter_params(LoraPatch(d, strategy.rank, "value"), _child_seed(seed, 3, m, 1))
    if kind == "prompt":
        rng = np.random.default_rng(_child_seed(seed, 4))
        state.prompt = {
            "prompt.video": Tensor(rng.normal(0.0, 0.1, size=(strategy.prompt_len, d))),
            "prompt.lang": Tensor(rng.normal(0.0, 0.1, size=(strategy.prompt_len, d))),
        }
    return state


class AdaptedModel:
    """A private backbone copy plus the strategy state attached to it."""

    def __init__(self, backbone: Backbone, state: StrategyState, base_hash: str):
        self.backbone, self.state, self.base_hash = backbone, state, base_hash

    @property
    def strategy(self) -> FinetuneStrategy:
        return self.state.strategy

    def forward(self, sample):
        return forward_saliency(self.backbone, sample, self.state)

    def scores(self, samples) -> list[np.ndarray]:
        return predict_scores(self.backbone, samples, self.state)

    def named_params(self) -> dict[str, Tensor]:
        return {**self.backbone.params, **self.state.named_params()}

    def num_params(self) -> int:
        return self.backbone.num_params() + self.state.num_params()


def attach_strategy(backbone: Backbone, strategy: FinetuneStrategy, seed: int = 0) -> AdaptedModel:
    model = AdaptedModel(backbone.copy(), build_state(strategy, backbone.cfg, seed), backbone.hash())
    mask = select_trainable(model, strategy)
    for p in model.named_params().values():
        p.requires_grad = False
    for p in mask.values():
        p.requires_grad = True
    return model


def select_trainable(model: AdaptedModel, strategy: FinetuneStrategy | None = None) -> dict[str, Tensor]:
    """Named parameters the strategy may update, in canonical order."""
    strategy = strategy or model.strategy
    kind, bb = strategy.kind, model.backbone.params
    if kind == "full":
        return dict(bb)
    if kind == "bias":
        return {n: p for n, p in bb.items() if n.endswith(".bias")}
    if kind == "partial":
        last = f"blocks.{model.backbone.cfg.num_blocks - 1}."
        return {n: p for n, p in bb.items() if n.startswith(last)}
    if kind == "proj":
        return {n: p for n, p in bb.items() if n.startswith("head.")}
    inserted = model.state.named_params()
    marker = {"lora": ".lora_", "prompt": "prompt.", "adapter": ".adapter_", "read": ".read."}[kind]
    mask = {n: p for n, p in inserted.items() if marker in n}
    if not mask:
        raise ConfigError(f"strategy {kind!r} requires modules that are not inserted in this model")
    return mask


# optimiser ---------------------------------------------------------------------------


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float, wd: float = 0.0,
               betas=(0.9, 0.999), eps: float = 1e-8) -> AdamWState:
    """In-place AdamW update; leaves everything untouched if any gradient is non-finite."""
    for n, p in params.items():
        g = grads.get(n)
        if g is None:
            continue
        if np.shape(g) != p.shape:
            raise ConfigError(f"{n}: gradient shape {np.shape(g)} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {n}; step aborted")
    b1, b2 = betas
    state.step += 1
    c1, c2 = 1.0 - b1**state.step, 1.0 - b2**state.step
    for n, p in params.items():
        g = grads.get(n)
        if g is None:
            continue
        m = state.m.get(n, 0.0) * b1 + (1.0 - b1) * g
        v = state.v.get(n, 0.0) * b2 + (1.0 - b2) * g * g
        state.m[n], state.v[n] = m, v
        decayed = p.data * (1.0 - lr * wd)
        p.data = decayed - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# objective ------------------------------------------------------------------------------


def solver_for(cfg: TrainConfig, solver: SolverConfig | None) -> SolverConfig | None:
    if cfg.pvla_mode == "off":
        return None
    solver = solver or SolverConfig()
    return replace(solver, mode="full" if cfg.pvla_mode == "vla" else "partial")


def sample_objective(model: AdaptedModel, sample, cfg: TrainConfig, solver: SolverConfig | None):
    """``(total, task, pvla)`` for one sample; ``pvla`` is the block-mean alignment loss."""
    out = model.forward(sample)
    task = bce_with_logits(out.logits, sample.labels.astype(np.float64))
    if not np.isfinite(task.data):
        raise TrainingError("non-finite task loss (saliency BCE)")
    if solver is None:
        return task, task, None
    results = pvla_losses(out.pairs, solver)
    for m, r in enumerate(results):
        if not np.isfinite(r.loss.data):
            raise TrainingError(f"non-finite alignment loss at block {m}")
    pvla = results[0].loss
    for r in results[1:]:
        pvla = add(pvla, r.loss)
    pvla = mul(pvla, 1.0 / len(results))
    total = add(task, mul(pvla, cfg.lambda_pvla))
    return total, task, pvla


def evaluate_map(model, split) -> float:
    """Mean frame-level AP of ``model`` over ``split``.

    ``model`` may be an :class:`AdaptedModel`, a bare :class:`Backbone`, or any
    callable mapping a sample to a score vector.
    """
    if isinstance(model, AdaptedModel):
        scores = model.scores(split)
    elif isinstance(model, Backbone):
        scores = predict_scores(model, split)
    else:
        scores = [np.asarray(model(s), dtype=np.float64) for s in split]
    return mean_average_precision(scores, [s.labels for s in split])


@dataclass
class TrainResult:
    model: AdaptedModel
    history: list[dict]


def _epoch_losses(model, samples, cfg, solver):
    task_sum = pvla_sum = 0.0
    with no_grad():
        for s in samples:
            _, task, pvla = sample_objective(model, s, cfg, solver)
            task_sum += float(task.data)
            pvla_sum += float(pvla.data) if pvla is not None else 0.0
    return task_sum, pvla_sum


def _row(epoch, task_sum, pvla_sum, n, cfg, val_map, trainable, total):
    task, pvla = task_sum / n, pvla_sum / n
    return {
        "epoch": epoch,
        "task_loss": task,
        "pvla_loss": pvla,
        "total_loss": task + cfg.lambda_pvla * pvla,
        "val_map": val_map,
        "trainable_params": trainable,
        "total_params": total,
    }


def fit(model: AdaptedModel, train, val, cfg: TrainConfig, solver: SolverConfig | None = None,
        metrics_path: str | None = None) -> list[dict]:
    """Optimise the trainable subset of ``model`` in place and return per-epoch metrics.

    Row 0 scores the untouched model; row ``e`` reports the mean training
    losses seen during epoch ``e`` and the validation mAP after it.
    """
    if not train:
        raise ConfigError("training split is empty")
    solver = solver_for(cfg, solver)
    params = select_trainable(model)
    trainable = sum(p.size for p in params.values())
    total = model.num_params()
    rng = np.random.default_rng(_child_seed(cfg.seed, 7))
    opt = AdamWState()
    n = len(train)

    history = []
    sink = open(metrics_path, "w") if metrics_path else None
    try:

        def emit(row):
            history.append(row)
            if sink:
                sink.write(json.dumps(row) + "\n")
                sink.flush()

        t0, p0 = _epoch_losses(model, train, cfg, solver)
        emit(_row(0, t0, p0, n, cfg, evaluate_map(model, val) if val else None, trainable, total))
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(n)
            task_sum = pvla_sum = 0.0
            for start in range(0, n, cfg.batch_size):
                batch = order[start : start + cfg.batch_size]
                for p in params.values():
                    p.grad = None
                for i in batch:
                    obj, task, pvla = sample_objective(model, train[i], cfg, solver)
                    task_sum += float(task.data)
                    pvla_sum += float(pvla.data) if pvla is not None else 0.0
                    if obj.requires_grad:
                        backward(mul(obj, 1.0 / len(batch)))
                grads = {k: p.grad for k, p in params.items() if p.grad is not None}
                try:
                    adamw_step(params, grads, opt, cfg.learning_rate, cfg.weight_decay, cfg.betas, cfg.eps)
                except NumericError as exc:
                    raise TrainingError(f"epoch {epoch}: {exc}") from exc
            val_map = evaluate_map(model, val) if val else None
            emit(_row(epoch, task_sum, pvla_sum, n, cfg, val_map, trainable, total))
            log.debug("epoch %d task %.5f pvla %.5f val mAP %s", epoch, task_sum / n, pvla_sum / n, val_map)
    finally:
        if sink:
            sink.close()
    for p in params.values():
        p.grad = None
    return history


def train_finetune(backbone: Backbone, strategy: FinetuneStrategy, data, cfg: TrainConfig,
                   solver: SolverConfig | None = None, metrics_path: str | None = None) -> TrainResult:
    """Attach ``strategy`` to a copy of ``backbone`` and fine-tune on ``data.train``."""
    model = attach_strategy(backbone, strategy, cfg.seed)
    history = fit(model, data.train, data.val, cfg, solver, metrics_path)
    return TrainResult(model, history)


def pretrain_full(backbone: Backbone, data, cfg: TrainConfig, solver: SolverConfig | None = None) -> dict:
    """Train every parameter of ``backbone`` in place on ``data.train``.

    The objective follows ``cfg.pvla_mode`` exactly as in fine-tuning.
    """
    model = AdaptedModel(backbone, StrategyState(FinetuneStrategy("full"), backbone.cfg), "")
    for p in backbone.params.values():
        p.requires_grad = True
    history = fit(model, data.train, data.val, cfg, solver)
    for p in backbone.params.values():
        p.requires_grad = False
    return {
        "source_map_init": history[0]["val_map"],
        "source_map_final": history[-1]["val_map"],
        "pretrain_epochs": cfg.epochs,
        "pretrain_pvla_mode": cfg.pvla_mode,
    }


# parameter accounting --------------------------------------------------------------------


def param_count_table(cfg: ModelConfig, strategies=None) -> list[dict]:
    """Trainable and total parameter counts per strategy on a backbone of ``cfg``."""
    strategies = strategies or [FinetuneStrategy(k) for k in STRATEGIES]
    base = Backbone(cfg)
    out = []
    for st in strategies:
        model = AdaptedModel(base, build_state(st, cfg, 0), "")
        trainable = sum(p.size for p in select_trainable(model, st).values())
        total = model.num_params()
        out.append({"strategy": st.kind, "trainable": trainable, "total": total, "fraction": trainable / total})
    return out


# checkpoints ------------------------------------------------------------------------------


def config_hash(cfg: ModelConfig, strategy: FinetuneStrategy) -> str:
    blob = json.dumps({"model": cfg.to_dict(), "strategy": asdict(strategy)}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def _write_archive(path: str, manifest: dict, params: dict[str, Tensor]) -> None:
    os.makedirs(path, exist_ok=True)
    entries = []
    for name, p in params.items():
        fname = f"{name}.f64"
        blob = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        try:
            with open(os.path.join(path, fname), "wb") as fh:
                fh.write(blob)
        except OSError as exc:
            raise OSError(f"cannot write {os.path.join(path, fname)}: {exc}") from exc
        entries.append({"name": name, "shape": list(p.shape), "file": fname, "bytes": len(blob)})
    manifest = {**manifest, "params": entries}
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)


def _read_archive(path: str, expected_format: str) -> tuple[dict, dict[str, np.ndarray]]:
    mpath = os.path.join(path, "manifest.json")
    try:
        with open(mpath) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CompatibilityError(f"{mpath}: unreadable manifest ({exc})") from exc
    if manifest.get("format") != expected_format:
        raise CompatibilityError(f"{mpath}: expected format {expected_format}, got {manifest.get('format')!r}")
    arrays = {}
    for e in manifest["params"]:
        fpath = os.path.join(path, e["file"])
        try:
            with open(fpath, "rb") as fh:
                raw = fh.read()
        except OSError as exc:
            raise CompatibilityError(f"{e['name']}: cannot read {fpath} ({exc})") from exc
        shape = tuple(e["shape"])
        if len(raw) != 8 * int(np.prod(shape)) or len(raw) != e["bytes"]:
            raise CompatibilityError(f"{e['name']}: blob holds {len(raw)} bytes, expected {e['bytes']}")
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    return manifest, arrays


def checkpoint_params(model: AdaptedModel) -> dict[str, Tensor]:
    if model.strategy.kind in ADAPTER_LIKE:
        return model.state.named_params()
    return select_trainable(model)


def save_checkpoint(model: AdaptedModel, path: str) -> dict:
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "strategy": asdict(model.strategy),
        "model_config": model.backbone.cfg.to_dict(),
        "config_hash": config_hash(model.backbone.cfg, model.strategy),
        "backbone_hash": model.base_hash,
        "adapter_only": model.strategy.kind != "full",
    }
    _write_archive(path, manifest, checkpoint_params(model))
    return manifest


def load_checkpoint(model: AdaptedModel, path: str) -> AdaptedModel:
    """Restore named parameters into ``model``; nothing is assigned unless every check passes."""
    manifest, arrays = _read_archive(path, CHECKPOINT_FORMAT)
    if manifest["strategy"]["kind"] != model.strategy.kind:
        raise CompatibilityError(
            f"strategy: checkpoint holds {manifest['strategy']['kind']!r}, model uses {model.strategy.kind!r}"
        )
    if manifest["config_hash"] != config_hash(model.backbone.cfg, model.strategy):
        raise CompatibilityError("config_hash: model or strategy configuration differs from the checkpoint")
    if manifest["adapter_only"] and manifest["backbone_hash"] != model.base_hash:
        raise CompatibilityError("backbone_hash: checkpoint was trained on a different frozen backbone")
    targets = checkpoint_params(model)
    if list(arrays) != list(targets):
        missing = [n for n in targets if n not in arrays] + [n for n in arrays if n not in targets]
        raise CompatibilityError(f"{missing[0]}: parameter sets differ between checkpoint and model")
    for name, arr in arrays.items():
        if arr.shape != targets[name].shape:
            raise CompatibilityError(f"{name}: shape {arr.shape} != model shape {targets[name].shape}")
    for name, arr in arrays.items():
        targets[name].data = arr
    return model


def save_backbone(backbone: Backbone, path: str) -> None:
    manifest = {
        "format": BACKBONE_FORMAT,
        "model_config": backbone.cfg.to_dict(),
        "hash": backbone.hash(),
        "frozen": all(backbone.frozen.values()),
        "meta": backbone.meta,
    }
    _write_archive(path, manifest, backbone.params)


def load_backbone(path: str) -> Backbone:
    manifest, arrays = _read_archive(path, BACKBONE_FORMAT)
    cfg = ModelConfig.from_dict(manifest["model_config"])
    try:
        backbone = Backbone(cfg, {n: Tensor(a) for n, a in arrays.items()})
    except (ConfigError, ValueError) as exc:
        raise CompatibilityError(f"{path}: {exc}") from exc
    if manifest["frozen"]:
        backbone.freeze()
    backbone.meta = manifest.get("meta", {})
    if backbone.hash() != manifest["hash"]:
        raise CompatibilityError(f"{path}: parameter hash does not match manifest")
    return backbone
