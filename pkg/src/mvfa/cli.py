"""Command-line entry points: gen-data, train, build-bank, predict, eval, ablate.

Every subcommand is deterministic given its config and seeds. Exit codes:
0 success, 1 usage or configuration error, 2 data or file-format error,
3 numeric failure. Settings come from an optional JSON config file whose
sections mirror the dataclasses (see README), with individual flags
overriding. MVFA_THREADS caps scoring parallelism.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys

import numpy as np

from . import data as datamod
from . import inference, metrics, objective, textbank
from .adaptation import init_params, load_checkpoint, save_checkpoint
from .backbone import BackboneConfig, init_backbone
from .errors import ConfigError, MVFAError, NumericError
from .fileio import write_text_atomic

DEFAULT_CONFIG = {
    "backbone": {"image_size": 64, "patch_size": 8, "dim": 64, "stages": 4,
                 "blocks_per_stage": 2, "heads": 4, "seed": 0},
    "model": {"init_seed": 7, "arch": "adapter", "adapter_style": "dual",
              "branch_feed": "mean", "bottleneck": None},
    "train": {"lr": 1e-3, "batch_size": 16, "epochs": 50, "seed": 42, "gamma": 0.1,
              "lambda1": 1.0, "lambda2": 1.0, "lambda3": 1.0, "tau": 0.07,
              "levels": [1, 2, 3, 4]},
    # scoring runs at a softer temperature than training: the raw-sum fusion
    # needs calmer similarity maps than the loss, which wants sharp gradients
    "inference": {"beta1": 0.5, "beta2": 0.5, "tau": 0.2, "k": 4,
                  "target": "texture-c", "mode": "few-shot", "normalize_few": False},
    "data": {},
    "text_seed": 0,
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _load_config(path):
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is None:
        return cfg
    try:
        with open(path, "r", encoding="utf-8") as fh:
            user = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    for section, value in user.items():
        if isinstance(value, dict) and isinstance(cfg.get(section), dict):
            cfg[section].update(value)
        else:
            cfg[section] = value
    return cfg


def _threads():
    raw = os.environ.get("MVFA_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"MVFA_THREADS must be an integer, got {raw!r}") from None


def _override(section, args, *names):
    for name in names:
        value = getattr(args, name.replace("-", "_"), None)
        if value is not None:
            section[name.replace("-", "_")] = value


def _train_config(cfg) -> objective.TrainConfig:
    return objective.TrainConfig.from_dict(cfg["train"])


def _prompt_set(args):
    if getattr(args, "prompts", None):
        return textbank.load_prompt_set(args.prompts)
    return textbank.default_prompt_set()


def _text_features(prompts, modalities, text_seed, dim):
    return {m: textbank.build_text_features(prompts, m, text_seed, dim).f_text
            for m in sorted(modalities)}


def _manifests(data_dir):
    train_path = os.path.join(data_dir, "train.jsonl")
    test_path = os.path.join(data_dir, "test.jsonl")
    return (datamod.load_manifest(train_path), datamod.load_manifest(test_path))


def _init_model(cfg, gamma, text_features=None, arch=None, adapter_style=None,
                branch_feed=None):
    backbone_cfg = BackboneConfig(**cfg["backbone"])
    backbone = init_backbone(backbone_cfg)
    model = cfg["model"]
    stacked = None
    if text_features:
        stacked = np.concatenate([t.data for _, t in sorted(text_features.items())])
    params = init_params(backbone_cfg.dim, seed=model["init_seed"], gamma=gamma,
                         arch=arch or model["arch"],
                         adapter_style=adapter_style or model["adapter_style"],
                         branch_feed=branch_feed or model["branch_feed"],
                         bottleneck=model["bottleneck"], text_features=stacked)
    return backbone_cfg, backbone, params


def _split_for_mode(cfg, train_samples, test_samples, mode, target, k, split_seed):
    if mode == "zero-shot":
        train, test = datamod.zero_shot_split(train_samples, test_samples, target)
        return train, None, test
    if mode == "few-shot":
        return datamod.few_shot_split(train_samples, test_samples, target, k, split_seed)
    raise ConfigError(f"unknown mode {mode!r}")


def cmd_gen_data(args):
    cfg = _load_config(args.config)
    raw = dict(cfg["data"])
    if args.seed is not None:
        raw["seed"] = args.seed
    synth = datamod.SynthConfig.from_dict(raw)
    train_manifest, test_manifest = datamod.gen_dataset(synth, args.out)
    print(f"wrote {train_manifest}")
    print(f"wrote {test_manifest}")
    return 0


def cmd_train(args):
    cfg = _load_config(args.config)
    _override(cfg["train"], args, "epochs", "lr", "batch_size", "seed", "gamma", "tau")
    if args.levels:
        cfg["train"]["levels"] = [int(x) for x in args.levels.split(",")]
    _override(cfg["inference"], args, "k", "target", "mode")
    _override(cfg["model"], args, "arch", "adapter_style", "branch_feed")
    train_cfg = _train_config(cfg)
    inf = cfg["inference"]

    train_samples, test_samples = _manifests(args.data)
    train_set, _, _ = _split_for_mode(cfg, train_samples, test_samples, inf["mode"],
                                      inf["target"], inf["k"], train_cfg.seed)
    loaded = datamod.load_samples(train_set)

    prompts = _prompt_set(args)
    dim = cfg["backbone"]["dim"]
    text = _text_features(prompts, {s.modality for s in loaded} | {inf["target"]},
                          cfg["text_seed"], dim)
    backbone_cfg, backbone, params = _init_model(cfg, train_cfg.gamma,
                                                 text_features=text)

    loss_log = args.loss_log or (args.out + ".loss.csv")
    history = objective.train(backbone, params, loaded, text, train_cfg,
                              loss_log_path=loss_log)
    save_checkpoint(args.out, backbone_cfg, params)
    if history:
        print(f"trained {train_cfg.epochs} epochs on {len(loaded)} samples; "
              f"loss {history[0]:.4f} -> {history[-1]:.4f}")
    else:
        print("trained 0 epochs; checkpoint equals initialization")
    print(f"wrote {args.out}")
    print(f"wrote {loss_log}")
    return 0


def cmd_build_bank(args):
    cfg = _load_config(args.config)
    _override(cfg["inference"], args, "k", "target")
    _override(cfg["train"], args, "seed")
    inf = cfg["inference"]
    backbone_cfg, params = load_checkpoint(args.ckpt,
                                           branch_feed=cfg["model"]["branch_feed"])
    backbone = init_backbone(backbone_cfg)
    train_samples, test_samples = _manifests(args.data)
    _, bank_normals, _ = datamod.few_shot_split(train_samples, test_samples,
                                                inf["target"], inf["k"],
                                                cfg["train"]["seed"])
    images = [datamod.load_sample(s).image for s in bank_normals]
    bank = inference.build_memory_bank(images, backbone, params)
    inference.save_bank(args.out, bank)
    print(f"wrote {args.out} ({inf['k']} references, "
          f"{bank.cls[0].shape[0]} rows per level)")
    return 0


def _resolve_betas(cfg, args, have_bank):
    inf = cfg["inference"]
    beta1 = args.beta1 if args.beta1 is not None else inf["beta1"]
    beta2 = args.beta2 if args.beta2 is not None else inf["beta2"]
    if not have_bank:
        if args.beta2 is None and inf["mode"] == "zero-shot":
            beta1, beta2 = (args.beta1 if args.beta1 is not None else 1.0), 0.0
        elif beta2 != 0:
            raise ConfigError("beta2 > 0 requires a memory bank; pass --bank or "
                              "set --beta2 0")
    return beta1, beta2


def _load_eval_inputs(cfg, args):
    backbone_cfg, params = load_checkpoint(args.ckpt,
                                           branch_feed=cfg["model"]["branch_feed"])
    backbone = init_backbone(backbone_cfg)
    bank = inference.load_bank(args.bank) if args.bank else None
    return backbone_cfg, backbone, params, bank


def cmd_predict(args):
    cfg = _load_config(args.config)
    _override(cfg["inference"], args, "target", "mode")
    inf = cfg["inference"]
    backbone_cfg, backbone, params, bank = _load_eval_inputs(cfg, args)
    beta1, beta2 = _resolve_betas(cfg, args, bank is not None)

    if args.manifest:
        samples = datamod.load_manifest(args.manifest)
    elif args.data:
        _, test_samples = _manifests(args.data)
        samples = [s for s in test_samples if s.modality == inf["target"]]
    else:
        raise ConfigError("predict needs --manifest or --data")
    if not samples:
        raise ConfigError("no samples selected for prediction")

    prompts = _prompt_set(args)
    text = _text_features(prompts, {s.modality for s in samples}, cfg["text_seed"],
                          backbone_cfg.dim)
    loaded, results = metrics.score_samples(
        backbone, params, samples, text, bank=bank, beta1=beta1, beta2=beta2,
        tau=inf["tau"], normalize_few=inf["normalize_few"], threads=_threads())

    os.makedirs(args.out_dir, exist_ok=True)
    lines = ["image,modality,label,c_pred,c_zero,c_few"]
    for sample, result in zip(loaded, results):
        stem = os.path.splitext(os.path.basename(sample.path))[0]
        inference.save_map(os.path.join(args.out_dir, stem + ".map"), result.s_pred)
        datamod.write_pgm(os.path.join(args.out_dir, stem + "_heat.pgm"),
                          inference.map_to_u8(result.s_pred))
        c_few = "" if result.c_few is None else f"{result.c_few:.6f}"
        lines.append(f"{sample.path},{sample.modality},{sample.label},"
                     f"{result.c_pred:.6f},{result.c_zero:.6f},{c_few}")
    scores_path = os.path.join(args.out_dir, "scores.csv")
    write_text_atomic(scores_path, "\n".join(lines) + "\n")
    print(f"wrote {len(results)} maps and {scores_path}")
    return 0


def cmd_eval(args):
    cfg = _load_config(args.config)
    _override(cfg["inference"], args, "target", "mode", "k")
    inf = cfg["inference"]
    backbone_cfg, backbone, params, bank = _load_eval_inputs(cfg, args)
    beta1, beta2 = _resolve_betas(cfg, args, bank is not None)

    _, test_samples = _manifests(args.data)
    samples = [s for s in test_samples if s.modality == inf["target"]]
    prompts = _prompt_set(args)
    text = _text_features(prompts, {s.modality for s in samples}, cfg["text_seed"],
                          backbone_cfg.dim)
    report = metrics.evaluate(backbone, params, samples, text, bank=bank,
                              beta1=beta1, beta2=beta2, tau=inf["tau"],
                              normalize_few=inf["normalize_few"],
                              pixel_per_image=args.pixel_per_image,
                              threads=_threads())
    metrics.write_report(report, json_path=args.out, csv_path=args.csv)
    sys.stdout.write(report.to_json())
    if args.out:
        print(f"wrote {args.out}")
    return 0


def _run_ablation_row(cfg, arch, adapter_style, data_dir, prompts):
    """Train and evaluate one architecture setting; everything else shared."""
    train_cfg = _train_config(cfg)
    inf = cfg["inference"]
    train_samples, test_samples = _manifests(data_dir)
    train_set, bank_normals, test_set = _split_for_mode(
        cfg, train_samples, test_samples, inf["mode"], inf["target"], inf["k"],
        train_cfg.seed)

    loaded = datamod.load_samples(train_set)
    text = _text_features(prompts, {s.modality for s in loaded} |
                          {s.modality for s in test_set},
                          cfg["text_seed"], cfg["backbone"]["dim"])
    backbone_cfg, backbone, params = _init_model(cfg, train_cfg.gamma,
                                                 text_features=text, arch=arch,
                                                 adapter_style=adapter_style)
    objective.train(backbone, params, loaded, text, train_cfg)

    bank = None
    beta1, beta2 = inf["beta1"], inf["beta2"]
    if bank_normals is not None:
        images = [datamod.load_sample(s).image for s in bank_normals]
        bank = inference.build_memory_bank(images, backbone, params)
    else:
        beta1, beta2 = 1.0, 0.0
    report = metrics.evaluate(backbone, params, test_set, text, bank=bank,
                              beta1=beta1, beta2=beta2, tau=inf["tau"],
                              threads=_threads())
    return report


ABLATE_COLUMNS = ("arch", "adapter_style", "ensemble_image_auc", "ensemble_pixel_auc",
                  "level1_image_auc", "level2_image_auc", "level3_image_auc",
                  "level4_image_auc", "level1_pixel_auc", "level2_pixel_auc",
                  "level3_pixel_auc", "level4_pixel_auc")


def cmd_ablate(args):
    cfg = _load_config(args.config)
    _override(cfg["inference"], args, "target", "mode", "k")
    _override(cfg["train"], args, "epochs", "seed")
    if args.levels:
        cfg["train"]["levels"] = [int(x) for x in args.levels.split(",")]
    prompts = _prompt_set(args)

    archs = [a.strip() for a in args.archs.split(",")] if args.archs else \
        ["adapter", "projector"]
    rows = []
    for arch in archs:
        styles = ["dual", "single"] if (arch == "adapter" and args.include_single) \
            else [cfg["model"]["adapter_style"] if arch == "adapter" else "dual"]
        for style in styles:
            report = _run_ablation_row(cfg, arch, style, args.data, prompts)
            echo = copy.deepcopy(cfg)
            echo["model"]["arch"] = arch
            echo["model"]["adapter_style"] = style
            row = {"arch": arch, "adapter_style": style, "config": echo,
                   "ensemble_image_auc": report.image_auc,
                   "ensemble_pixel_auc": report.pixel_auc}
            for i in range(4):
                row[f"level{i + 1}_image_auc"] = report.per_level_image_auc[i]
                row[f"level{i + 1}_pixel_auc"] = (
                    report.per_level_pixel_auc[i] if report.per_level_pixel_auc
                    else None)
            rows.append(row)

    os.makedirs(args.out, exist_ok=True)
    json_path = os.path.join(args.out, "ablation.json")
    write_text_atomic(json_path, json.dumps(rows, indent=2, sort_keys=True) + "\n")

    def fmt(value):
        return "" if value is None else (f"{value:.6f}"
                                         if isinstance(value, float) else str(value))

    csv_lines = [",".join(ABLATE_COLUMNS)]
    csv_lines += [",".join(fmt(row[c]) for c in ABLATE_COLUMNS) for row in rows]
    csv_path = os.path.join(args.out, "ablation.csv")
    write_text_atomic(csv_path, "\n".join(csv_lines) + "\n")

    print(",".join(ABLATE_COLUMNS))
    for row in rows:
        print(",".join(fmt(row[c]) for c in ABLATE_COLUMNS))
    print(f"wrote {json_path}")
    print(f"wrote {csv_path}")
    return 0


def build_parser():
    parser = _Parser(prog="mvfa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train adapters and write a checkpoint")
    common(p)
    p.add_argument("--data", required=True, help="directory with train/test manifests")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-log", help="loss CSV path (default: <out>.loss.csv)")
    p.add_argument("--mode", choices=["zero-shot", "few-shot"])
    p.add_argument("--target")
    p.add_argument("--k", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--levels", help="comma-separated training levels, e.g. 1,2")
    p.add_argument("--arch", choices=["adapter", "projector"])
    p.add_argument("--adapter-style", choices=["dual", "single"])
    p.add_argument("--branch-feed", choices=["mean", "cls", "seg"])
    p.add_argument("--prompts", help="prompt pattern file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("build-bank", help="build a memory bank from normal references")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--target")
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_build_bank)

    p = sub.add_parser("predict", help="score images, writing maps and a score CSV")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bank")
    p.add_argument("--data", help="dataset directory (uses its test manifest)")
    p.add_argument("--manifest", help="explicit manifest of images to score")
    p.add_argument("--target")
    p.add_argument("--mode", choices=["zero-shot", "few-shot"])
    p.add_argument("--out-dir", required=True)
    p.add_argument("--beta1", type=float)
    p.add_argument("--beta2", type=float)
    p.add_argument("--prompts")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="evaluate a checkpoint, writing a report")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bank")
    p.add_argument("--data", required=True)
    p.add_argument("--target")
    p.add_argument("--mode", choices=["zero-shot", "few-shot"])
    p.add_argument("--k", type=int)
    p.add_argument("--beta1", type=float)
    p.add_argument("--beta2", type=float)
    p.add_argument("--out", help="report JSON path")
    p.add_argument("--csv", help="one-line report CSV path")
    p.add_argument("--pixel-per-image", action="store_true")
    p.add_argument("--prompts")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep architectures, reporting per-level AUCs")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory for the tables")
    p.add_argument("--target")
    p.add_argument("--mode", choices=["zero-shot", "few-shot"])
    p.add_argument("--k", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--levels")
    p.add_argument("--archs", help="comma-separated subset of adapter,projector")
    p.add_argument("--include-single", action="store_true",
                   help="add a single-adapter row")
    p.add_argument("--prompts")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except MVFAError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
