"""Command-line entry point: ``read-pvla <subcommand> [flags]``.

Configuration is layered, later layers winning: built-in defaults, the
``READ_PVLA_SEED`` environment variable, a named ``--preset``, a ``--config``
JSON file, then explicit flags. Every command that writes outputs also writes
the fully resolved configuration next to them.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from .adapters import CELL_KINDS
from .autodiff import backward, bce_with_logits, finite_diff_grad, max_relative_error
from .backbone import Backbone, ModelConfig, build_pretrained_backbone
from .errors import NumericError, ReadPvlaError
from .pot import (
    MODES,
    SCHEMES,
    SolverConfig,
    exact_partial_ot,
    frozen_plan_loss,
    pvla_from_cost,
    pvla_losses,
    uniform,
)
from .synth import DatasetSpec, generate_dataset, load_dataset, save_dataset
from .trainer import (
    PRESETS,
    PRETRAIN,
    PVLA_MODES,
    STRATEGIES,
    FinetuneStrategy,
    TrainConfig,
    attach_strategy,
    evaluate_map,
    load_backbone,
    load_checkpoint,
    param_count_table,
    save_backbone,
    save_checkpoint,
    select_trainable,
    train_finetune,
)

log = logging.getLogger("read_pvla")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2
RESOLVED_CONFIG = "resolved_config.json"
SEED_ENV = "READ_PVLA_SEED"


class ArgumentParser(argparse.ArgumentParser):
    """Reports usage errors with exit status 1 instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


class UsageError(ReadPvlaError, ValueError):
    pass


# configuration ---------------------------------------------------------------------------


def default_config() -> dict:
    return {
        "dataset": asdict(DatasetSpec()),
        "source": asdict(DatasetSpec.source()),
        "model": asdict(ModelConfig()),
        "pretrain": asdict(PRETRAIN),
        "train": asdict(TrainConfig()),
        "solver": asdict(SolverConfig()),
        "strategy": asdict(FinetuneStrategy()),
        "paths": {},
    }


def _merge(base: dict, layer: dict, origin: str) -> None:
    for section, values in layer.items():
        if section not in base:
            raise UsageError(f"{origin}: unknown config section {section!r}")
        if not isinstance(values, dict):
            raise UsageError(f"{origin}: section {section!r} must be an object")
        for key, value in values.items():
            if section != "paths" and key not in base[section]:
                raise UsageError(f"{origin}: unknown key {section}.{key}")
            base[section][key] = value


# flag dest -> (section, key)
FLAG_TARGETS = {
    "seed": [("train", "seed"), ("pretrain", "seed")],
    "data_seed": [("dataset", "seed")],
    "n_train": [("dataset", "n_train")],
    "n_val": [("dataset", "n_val")],
    "n_test": [("dataset", "n_test")],
    "noise_sigma": [("dataset", "noise_sigma")],
    "style_shift": [("dataset", "style_shift")],
    "domain": [("dataset", "domain")],
    "strategy": [("strategy", "kind")],
    "cell_kind": [("strategy", "cell_kind")],
    "bottleneck": [("strategy", "bottleneck")],
    "rank": [("strategy", "rank")],
    "epochs": [("train", "epochs")],
    "lr": [("train", "learning_rate")],
    "batch_size": [("train", "batch_size")],
    "weight_decay": [("train", "weight_decay")],
    "lambda_pvla": [("train", "lambda_pvla")],
    "pvla_mode": [("train", "pvla_mode")],
    "pretrain_epochs": [("pretrain", "epochs")],
    "num_blocks": [("model", "num_blocks")],
    "tau": [("solver", "tau")],
    "iters": [("solver", "n_iter")],
    "mass_grid": [("solver", "mass_grid_size")],
    "mode": [("solver", "mode")],
    "scheme": [("solver", "scheme")],
}


def resolve_config(args: argparse.Namespace, environ=os.environ) -> dict:
    cfg = default_config()
    env_seed = environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError as exc:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from exc
        for section, key in FLAG_TARGETS["seed"]:
            cfg[section][key] = seed

    preset = getattr(args, "preset", None)
    file_cfg = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"--config {args.config}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise UsageError(f"--config {args.config}: top level must be an object")
        preset = preset or file_cfg.get("train", {}).get("preset")
    if preset:
        if preset not in PRESETS:
            raise UsageError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        _merge(cfg, {"train": {**PRESETS[preset]["train"], "preset": preset}, "model": PRESETS[preset]["model"]}, "preset")
    _merge(cfg, file_cfg, args.config or "config")

    for dest, targets in FLAG_TARGETS.items():
        value = getattr(args, dest, None)
        if value is not None:
            for section, key in targets:
                cfg[section][key] = value
    return cfg


def build_objects(cfg: dict):
    """Validate every section by constructing its typed object."""
    return {
        "dataset": DatasetSpec.from_dict(cfg["dataset"]),
        "source": DatasetSpec.from_dict(cfg["source"]),
        "model": ModelConfig.from_dict(cfg["model"]),
        "pretrain": TrainConfig.from_dict(cfg["pretrain"]),
        "train": TrainConfig.from_dict(cfg["train"]),
        "solver": SolverConfig(**cfg["solver"]),
        "strategy": FinetuneStrategy.from_dict(cfg["strategy"]),
    }


def write_resolved(cfg: dict, out_dir: str, command: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, RESOLVED_CONFIG)
    with open(path, "w") as fh:
        json.dump({"command": command, **cfg}, fh, indent=2, sort_keys=True)
    return path


# subcommands --------------------------------------------------------------------------------


def _dataset(cfg, objs):
    path = cfg["paths"].get("data")
    if path:
        return load_dataset(path)
    return generate_dataset(objs["dataset"])


def _pretrain(objs, out_dir):
    source = generate_dataset(objs["source"])
    backbone = build_pretrained_backbone(objs["model"], source, objs["pretrain"].seed, objs["pretrain"])
    save_backbone(backbone, out_dir)
    return backbone


def cmd_gen_data(args, cfg):
    objs = build_objects(cfg)
    cfg["paths"]["out"] = args.out
    save_dataset(generate_dataset(objs["dataset"]), args.out)
    write_resolved(cfg, args.out, "gen-data")
    print(f"wrote dataset to {args.out}")
    return EXIT_OK


def cmd_pretrain(args, cfg):
    objs = build_objects(cfg)
    cfg["paths"]["out"] = args.out
    backbone = _pretrain(objs, args.out)
    write_resolved(cfg, args.out, "pretrain")
    m = backbone.meta
    print(f"source val mAP: {m['source_map_init']:.6f} at init, {m['source_map_final']:.6f} after pretraining")
    print(f"wrote frozen backbone to {args.out}")
    return EXIT_OK


def _resolve_backbone(cfg, objs, out_dir):
    path = cfg["paths"].get("backbone")
    if path:
        backbone = load_backbone(path)
        if backbone.cfg != objs["model"]:
            raise UsageError(
                f"backbone at {path} has model config {backbone.cfg.to_dict()}, "
                f"run expects {objs['model'].to_dict()}"
            )
        return backbone
    target = os.path.join(out_dir, "backbone")
    log.info("no --backbone given; pretraining one into %s", target)
    backbone = _pretrain(objs, target)
    cfg["paths"]["backbone"] = target
    return backbone


def cmd_finetune(args, cfg):
    if args.backbone:
        cfg["paths"]["backbone"] = args.backbone
    if args.data:
        cfg["paths"]["data"] = args.data
    cfg["paths"]["out"] = args.out
    objs = build_objects(cfg)
    os.makedirs(args.out, exist_ok=True)
    backbone = _resolve_backbone(cfg, objs, args.out)
    data = _dataset(cfg, objs)
    base_seed = objs["train"].seed
    finals = []
    for k in range(args.seeds):
        seed = base_seed + k
        run_dir = args.out if args.seeds == 1 else os.path.join(args.out, f"seed{seed}")
        run_cfg = json.loads(json.dumps(cfg))
        run_cfg["train"]["seed"] = seed
        run_cfg["paths"]["out"] = run_dir
        os.makedirs(run_dir, exist_ok=True)
        write_resolved(run_cfg, run_dir, "finetune")
        train_cfg = replace(objs["train"], seed=seed)
        result = train_finetune(
            backbone, objs["strategy"], data, train_cfg, objs["solver"], os.path.join(run_dir, "metrics.jsonl")
        )
        save_checkpoint(result.model, os.path.join(run_dir, "checkpoint"))
        last = result.history[-1]
        finals.append(last["val_map"])
        print(
            f"seed {seed}: val mAP {last['val_map']:.6f} "
            f"(trainable {last['trainable_params']} / {last['total_params']})"
        )
    if args.seeds > 1:
        print(f"mean val mAP over {args.seeds} seeds: {np.mean(finals):.6f}")
    return EXIT_OK


def cmd_eval(args, cfg):
    cfg_path = os.path.join(args.run, RESOLVED_CONFIG)
    try:
        with open(cfg_path) as fh:
            run_cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"{cfg_path}: {exc}") from exc
    run_cfg.pop("command", None)
    objs = build_objects(run_cfg)
    backbone_path = args.backbone or run_cfg["paths"].get("backbone")
    if not backbone_path:
        raise UsageError("run has no recorded backbone path; pass --backbone")
    backbone = load_backbone(backbone_path)
    if args.data:
        run_cfg["paths"]["data"] = args.data
    data = _dataset(run_cfg, objs)
    model = attach_strategy(backbone, objs["strategy"], objs["train"].seed)
    load_checkpoint(model, os.path.join(args.run, "checkpoint"))
    score = evaluate_map(model, data.split(args.split))
    print(f"{args.split} mAP: {score!r}")
    return EXIT_OK


def read_cost_matrix(path: str) -> np.ndarray:
    try:
        with open(path) as fh:
            rows = [line.split() for line in fh if line.strip()]
    except OSError as exc:
        raise UsageError(f"{path}: {exc}") from exc
    if not rows or len({len(r) for r in rows}) != 1:
        raise UsageError(f"{path}: cost matrix rows must be nonempty and of equal length")
    try:
        return np.array([[float(x) for x in r] for r in rows])
    except ValueError as exc:
        raise UsageError(f"{path}: cost matrix must hold space-separated reals ({exc})") from exc


def format_rows(M: np.ndarray) -> str:
    return "\n".join(" ".join(repr(float(x)) for x in row) for row in np.atleast_2d(M))


def cmd_ot_solve(args, cfg):
    solver = build_objects(cfg)["solver"]
    C = read_cost_matrix(args.cost)
    loss, mass, plan = pvla_from_cost(C, solver)
    print(f"loss {loss!r}")
    print(f"best_mass {mass!r}")
    print("plan")
    print(format_rows(plan.T))
    if args.exact:
        n_v, n_l = C.shape
        _, exact = exact_partial_ot(C, uniform(n_v), uniform(n_l), mass)
        print(f"exact_cost_at_best_mass {exact!r}")
    return EXIT_OK


def grad_check(seed: int = 0, h: float = 1e-5) -> dict[str, float]:
    """Max relative error per trainable tensor on a d=8, M=2 READ model with PVLA."""
    mcfg = ModelConfig(d=8, num_blocks=2, num_heads=2, d_in_video=6, d_in_lang=5, max_len_video=8, max_len_lang=8)
    backbone = Backbone.initialize(mcfg, seed).freeze()
    spec = DatasetSpec(
        seed=seed, n_train=1, n_val=1, n_test=1, n_video=(5, 5), n_lang=(3, 3), span_length=(1, 3),
        concept_dim=4, video_dim=6, lang_dim=5,
    )
    sample = generate_dataset(spec).train[0]
    model = attach_strategy(backbone, FinetuneStrategy("read"), seed)
    rng = np.random.default_rng(seed + 1)
    params = select_trainable(model)
    for p in params.values():
        # move off the zero initialisation so every parameter has a nonzero gradient
        p.data = p.data + rng.normal(0.0, 0.3, size=p.shape)
    lam = 1.0
    solver = SolverConfig()

    # the envelope gradient holds each optimal plan fixed, so the finite
    # differences are taken with the plans frozen at the current point
    plans = [r.plan.T for r in pvla_losses(model.forward(sample).pairs, solver)]
    targets = sample.labels.astype(np.float64)

    def objective():
        out = model.forward(sample)
        align = [frozen_plan_loss(hv, hl, P) for (hv, hl), P in zip(out.pairs, plans)]
        total = bce_with_logits(out.logits, targets)
        for a in align:
            total = total + a * (lam / len(align))
        return total

    loss = objective()
    for p in params.values():
        p.grad = None
    backward(loss)
    errors = {}
    for name, p in params.items():
        numeric = finite_diff_grad(lambda _x: objective(), p, h)
        errors[name] = max_relative_error(p.grad, numeric)
    return errors


def cmd_grad_check(args, cfg):
    errors = grad_check(cfg["train"]["seed"])
    worst = max(errors, key=errors.get)
    for name, err in errors.items():
        log.info("%s: %.3e", name, err)
    print(f"checked {len(errors)} tensors; max relative error {errors[worst]:.3e} ({worst})")
    if errors[worst] >= 1e-4:
        raise NumericError(f"gradient check failed: {worst} has relative error {errors[worst]:.3e}")
    return EXIT_OK


def cmd_param_count(args, cfg):
    objs = build_objects(cfg)
    st = objs["strategy"]
    strategies = [replace(st, kind=k) for k in STRATEGIES]
    rows = param_count_table(objs["model"], strategies)
    print(f"{'strategy':<10} {'trainable':>10} {'total':>10} {'fraction':>9}")
    for r in rows:
        print(f"{r['strategy']:<10} {r['trainable']:>10} {r['total']:>10} {100 * r['fraction']:>8.3f}%")
    return EXIT_OK


# parser -----------------------------------------------------------------------------------------


def _common(p):
    p.add_argument("--config", help="JSON file with dataset/model/train/solver/strategy sections")
    p.add_argument("--seed", type=int, help=f"training seed (default from ${SEED_ENV}, else 0)")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def _data_flags(p):
    p.add_argument("--data-seed", type=int)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--style-shift", type=float)
    p.add_argument("--domain", type=int)


def _solver_flags(p):
    p.add_argument("--tau", type=float, help="entropic temperature (default 0.05)")
    p.add_argument("--iters", type=int, help="Sinkhorn sweeps (default 1000)")
    p.add_argument("--mass-grid", type=int, help="number of candidate masses (default min(N_V, N_L))")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--scheme", choices=SCHEMES)


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="read-pvla", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic grounding dataset")
    _common(p)
    _data_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="build and save the frozen stand-in backbone")
    _common(p)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--num-blocks", type=int)
    p.add_argument("--pretrain-epochs", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune one strategy; writes metrics.jsonl and a checkpoint")
    _common(p)
    _data_flags(p)
    _solver_flags(p)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--cell-kind", choices=CELL_KINDS)
    p.add_argument("--bottleneck", type=int)
    p.add_argument("--rank", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--lambda-pvla", type=float)
    p.add_argument("--pvla-mode", choices=PVLA_MODES)
    p.add_argument("--num-blocks", type=int)
    p.add_argument("--pretrain-epochs", type=int)
    p.add_argument("--seeds", type=int, default=1, help="run seeds seed..seed+N-1 into seed<k>/ subdirectories")
    p.add_argument("--backbone", help="saved backbone directory (pretrained into OUT/backbone if omitted)")
    p.add_argument("--data", help="saved dataset directory (generated from the dataset config if omitted)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="reload a finetune run and report mAP")
    _common(p)
    p.add_argument("--run", required=True, help="finetune output directory")
    p.add_argument("--backbone")
    p.add_argument("--data")
    p.add_argument("--split", default="val", choices=["train", "val", "test"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ot-solve", help="solve partial OT for a plain-text cost matrix")
    _common(p)
    _solver_flags(p)
    p.add_argument("--exact", action="store_true", help="also print the exact LP cost at the best mass")
    p.add_argument("cost")
    p.set_defaults(func=cmd_ot_solve)

    p = sub.add_parser("grad-check", help="finite-difference check of every trainable gradient")
    _common(p)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("param-count", help="trainable / total parameters per strategy")
    _common(p)
    p.add_argument("--num-blocks", type=int)
    p.add_argument("--bottleneck", type=int)
    p.add_argument("--rank", type=int)
    p.set_defaults(func=cmd_param_count)
    return parser


def main(argv=None, environ=os.environ) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "seeds", 1) < 1:
        parser.error("--seeds must be positive")
    try:
        cfg = resolve_config(args, environ)
        return args.func(args, cfg)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ReadPvlaError, ValueError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
