"""Command-line entry point.

Commands: synth, train, eval, score, trace, rank, gradcheck, ablate, flops.
Every command takes a JSON run-configuration file (``--config``; the names
``toy`` and ``paper`` select the bundled presets), validates it strictly
(unknown keys are rejected), writes machine-readable reports into the
output directory, and prints a human-readable summary.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure, 5 gradient-check failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import metrics as metrics_mod
from .errors import ConfigError, DataError, EngineError, NonFiniteError
from .gradcheck import grad_check
from .model import (
    FusionVariant,
    ModelConfig,
    ScoringTokenMode,
    build_model,
    count_flops,
    forward_scores,
    forward_video,
    incremental_trace,
)
from .mru import ClipFeatures
from .tensor import set_precision
from .train import (
    TrainConfig,
    load_checkpoint,
    multi_head_mse,
    save_checkpoint,
    train_loop,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_GRADCHECK = 5

_MODEL_KEYS = {
    "channels", "s_audio", "s_video", "t_max", "heads", "variant", "scoring",
    "depths", "bottleneck_reduction", "channel_ratio", "score_labels",
}
_DEPTH_KEYS = {"audio", "video", "multimodal", "memory", "cls"}
_TRAIN_KEYS = {
    "learning_rate", "weight_decay", "beta1", "beta2", "eps", "epochs",
    "batch_size", "seed", "feature_noise",
}
_SYNTH_KEYS = {
    "seed", "num_videos", "t_min", "t_max", "noise", "marker_prob",
    "c1", "c2", "train_fraction",
}
_DATA_KEYS = {"dir", "train_manifest", "test_manifest"}
_TOP_KEYS = {"seed", "precision", "out", "model", "train", "synth", "data"}


def _reject_unknown(section: dict, allowed: set, where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def load_run_config(path_or_name: str) -> dict:
    """Load and validate a run configuration (path or bundled preset name)."""
    if path_or_name in ("toy", "paper"):
        text = resources.files("memmixer.presets").joinpath(
            f"{path_or_name}.json").read_text(encoding="utf-8")
        source = f"preset:{path_or_name}"
    else:
        p = Path(path_or_name)
        if not p.exists():
            raise DataError(f"config file not found: {p}")
        text = p.read_text(encoding="utf-8")
        source = str(p)
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: invalid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{source}: top level must be an object")
    _reject_unknown(cfg, _TOP_KEYS, source)
    _reject_unknown(cfg.get("model", {}), _MODEL_KEYS, f"{source} [model]")
    _reject_unknown(cfg.get("model", {}).get("depths", {}) or {}, _DEPTH_KEYS,
                    f"{source} [model.depths]")
    _reject_unknown(cfg.get("train", {}), _TRAIN_KEYS, f"{source} [train]")
    _reject_unknown(cfg.get("synth", {}), _SYNTH_KEYS, f"{source} [synth]")
    _reject_unknown(cfg.get("data", {}), _DATA_KEYS, f"{source} [data]")
    if cfg.get("precision", 32) not in (32, 64):
        raise ConfigError(f"{source}: precision must be 32 or 64")
    return cfg


def _model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(**cfg.get("model", {}))


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**cfg.get("train", {}))


def _out_dir(cfg: dict, args) -> Path:
    out = getattr(args, "out", None) or cfg.get("out")
    if out is None:
        raise ConfigError("no output directory: set --out or the 'out' config key")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=False) + "\n",
                    encoding="utf-8")


def _data_dir(cfg: dict, out_dir: Path) -> Path:
    d = cfg.get("data", {}).get("dir")
    return Path(d) if d is not None else out_dir / "dataset"


def _load_split(cfg: dict, out_dir: Path, split: str):
    section = cfg.get("data", {})
    name = section.get(f"{split}_manifest", f"{split}.jsonl")
    manifest = _data_dir(cfg, out_dir) / name
    if not manifest.exists():
        raise DataError(f"{split} manifest not found: {manifest}")
    return data_mod.load_dataset(manifest)


def cmd_synth(cfg: dict, args) -> int:
    out_dir = _out_dir(cfg, args)
    section = dict(cfg.get("synth", {}))
    train_fraction = section.pop("train_fraction", 0.8)
    model = cfg.get("model", {})
    synth = data_mod.SynthConfig(
        channels=model.get("channels", 32),
        s_audio=model.get("s_audio", 4),
        s_video=model.get("s_video", 6),
        **section,
    )
    target = _data_dir(cfg, out_dir)
    records, manifest = data_mod.synth_generate(synth, target)
    n_train = int(round(train_fraction * len(records)))
    if not (0 < n_train <= len(records)):
        raise ConfigError(f"train_fraction {train_fraction} leaves no usable split")
    data_mod.write_manifest(target / "train.jsonl", records[:n_train])
    if n_train < len(records):
        data_mod.write_manifest(target / "test.jsonl", records[n_train:])
    print(f"wrote {len(records)} videos to {target}")
    print(f"train: {n_train}  test: {len(records) - n_train}")
    return EXIT_OK


def cmd_train(cfg: dict, args) -> int:
    out_dir = _out_dir(cfg, args)
    mc = _model_config(cfg)
    tc = _train_config(cfg)
    dataset, labels = _load_split(cfg, out_dir, "train")
    if tuple(labels) != tuple(mc.score_labels):
        raise ConfigError(
            f"model score labels {mc.score_labels} do not match dataset {labels}"
        )
    params = build_model(mc, seed=cfg.get("seed", 0))
    log_path = out_dir / "train_log.jsonl"
    with open(log_path, "w", encoding="utf-8") as log:
        def on_epoch(report):
            log.write(json.dumps(report.as_dict(labels), sort_keys=False) + "\n")
            if report.epoch % max(1, tc.epochs // 10) == 0:
                print(f"epoch {report.epoch}: total mse {report.total:.6f}")
        reports, adam_state = train_loop(params, dataset, tc, on_epoch=on_epoch)
    ckpt = out_dir / "model.ckpt"
    save_checkpoint(ckpt, params, adam_state)
    print(f"final train mse: {reports[-1].total:.6f}")
    print(f"checkpoint: {ckpt}")
    print(f"loss log:   {log_path}")
    return EXIT_OK


def _predict_all(params, dataset):
    preds = np.zeros((len(dataset), params.config.heads))
    for i, sample in enumerate(dataset):
        preds[i] = forward_scores(params, sample.clips).data[0]
    return preds


def cmd_eval(cfg: dict, args) -> int:
    out_dir = _out_dir(cfg, args)
    params, _ = load_checkpoint(args.checkpoint)
    dataset, labels = _load_split(cfg, out_dir, args.split)
    preds = _predict_all(params, dataset)
    targets = np.stack([s.targets for s in dataset])
    report = metrics_mod.evaluate_predictions(preds, targets, labels)
    _write_json(out_dir / f"eval_{args.split}.json", report.as_dict())
    for line in report.lines():
        print(line)
    return EXIT_OK


def _load_container_clips(path):
    raw_clips, meta = data_mod.read_container(path)
    return [ClipFeatures.from_arrays(a, v) for a, v in raw_clips]


def cmd_score(cfg: dict, args) -> int:
    params, _ = load_checkpoint(args.checkpoint)
    clips = _load_container_clips(args.features)
    scores = forward_video(params, clips)
    print(json.dumps(scores.as_dict(), sort_keys=False))
    return EXIT_OK


def cmd_trace(cfg: dict, args) -> int:
    params, _ = load_checkpoint(args.checkpoint)
    clips = _load_container_clips(args.features)
    deltas = incremental_trace(params, clips)
    labels = params.config.score_labels
    rows = [{"clip": t, **{labels[k]: float(deltas[t, k]) for k in range(deltas.shape[1])}}
            for t in range(deltas.shape[0])]
    out = getattr(args, "out", None) or cfg.get("out")
    if out:
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_json(out_dir / "trace.json", {"features": str(args.features), "deltas": rows})
    header = "clip " + " ".join(f"{lb:>12}" for lb in labels)
    print(header)
    for row in rows:
        print(f"{row['clip']:>4} " + " ".join(f"{row[lb]:>+12.5f}" for lb in labels))
    totals = deltas.sum(axis=0)
    print("sum  " + " ".join(f"{v:>+12.5f}" for v in totals))
    return EXIT_OK


def cmd_rank(cfg: dict, args) -> int:
    params, _ = load_checkpoint(args.checkpoint)
    dataset, labels = data_mod.load_dataset(args.manifest)
    head = args.head
    if head not in labels:
        raise ConfigError(f"head {head!r} not in dataset labels {labels}")
    col = labels.index(head)
    preds = _predict_all(params, dataset)
    report = metrics_mod.ranking_report(
        preds[:, col],
        np.array([s.targets[col] for s in dataset]),
        k=args.k,
        ids=[s.video_id for s in dataset],
    )
    out = getattr(args, "out", None) or cfg.get("out")
    if out:
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_json(out_dir / f"rank_{head}.json", report.as_dict())
    for line in report.lines():
        print(line)
    return EXIT_OK


def cmd_gradcheck(cfg: dict, args) -> int:
    set_precision(64)
    model = cfg.get("model", {})
    mc = ModelConfig(
        channels=8, s_audio=2, s_video=2, t_max=4, heads=2,
        variant=model.get("variant", "mru_bid"),
        scoring=model.get("scoring", "both"),
        depths=model.get("depths", {}),
        bottleneck_reduction=model.get("bottleneck_reduction", 4),
        channel_ratio=model.get("channel_ratio", 4),
    )
    params = build_model(mc, seed=cfg.get("seed", 0))
    rng = np.random.default_rng(cfg.get("seed", 0) + 1)
    clips = [
        ClipFeatures.from_arrays(rng.standard_normal((2, 8)),
                                 rng.standard_normal((2, 8)))
        for _ in range(3)
    ]
    target = rng.normal(0.0, 0.5, size=(1, 2))

    def loss_fn():
        return multi_head_mse(forward_scores(params, clips), target)[0]

    report = grad_check(loss_fn, list(params.parameters()))
    worst = report.worst()
    print(f"variant: {mc.variant.value}")
    print(f"max relative error: {report.max_rel_error:.3e} "
          f"(worst parameter: {worst[0] if worst else 'n/a'})")
    if report.max_rel_error > 1e-4:
        print("FAIL: tape gradients disagree with finite differences")
        return EXIT_GRADCHECK
    print("PASS")
    return EXIT_OK


_ABLATION_VARIANTS = ("mixer", "mixer_mem", "mru", "mru_bid")
_ABLATION_MODES = ("cls", "mem", "both")


def cmd_ablate(cfg: dict, args) -> int:
    out_dir = _out_dir(cfg, args)
    tc = _train_config(cfg)
    train_set, labels = _load_split(cfg, out_dir, "train")
    test_set, _ = _load_split(cfg, out_dir, "test")
    targets = np.stack([s.targets for s in test_set])
    base_model = cfg.get("model", {})
    results = {}

    def run(variant: str, scoring: str):
        key = f"{variant}+{scoring}"
        if key in results:
            return results[key]
        model_section = dict(base_model)
        model_section["variant"] = variant
        model_section["scoring"] = scoring
        mc = ModelConfig(**model_section)
        params = build_model(mc, seed=cfg.get("seed", 0))
        train_loop(params, train_set, tc)
        preds = _predict_all(params, test_set)
        report = metrics_mod.evaluate_predictions(preds, targets, labels)
        results[key] = report
        return report

    table = {"factors": {}, "labels": list(labels)}
    print("== fusion structure (scoring: both) ==")
    for variant in _ABLATION_VARIANTS:
        report = run(variant, "both")
        table["factors"][f"component/{variant}"] = report.as_dict()
        cells = "  ".join(
            f"{labels[i]}: mse {report.mse[i]:.4f} (rs {report.spearman[i]:.3f})"
            for i in range(len(labels)))
        print(f"{variant:>10}  {cells}")
    print("== scoring token (variant: mru_bid) ==")
    for mode in _ABLATION_MODES:
        report = run("mru_bid", mode)
        table["factors"][f"scoring/{mode}"] = report.as_dict()
        cells = "  ".join(
            f"{labels[i]}: mse {report.mse[i]:.4f} (rs {report.spearman[i]:.3f})"
            for i in range(len(labels)))
        print(f"{mode:>10}  {cells}")
    _write_json(out_dir / "ablation.json", table)
    print(f"report: {out_dir / 'ablation.json'}")
    return EXIT_OK


def cmd_flops(cfg: dict, args) -> int:
    out_dir = _out_dir(cfg, args)
    t_list = [int(t) for t in args.clips.split(",")]
    if any(t < 1 for t in t_list):
        raise ConfigError(f"clip counts must be positive: {t_list}")
    base_model = cfg.get("model", {})
    rows = []
    rng = np.random.default_rng(0)
    for variant in ("mru_bid", "mru", "mixer"):
        counts = []
        for t in t_list:
            model_section = dict(base_model)
            model_section["variant"] = variant
            model_section["t_max"] = t  # flat mixer token-mix hidden scales with T
            if variant == "mixer":
                model_section["scoring"] = "cls"
            mc = ModelConfig(**model_section)
            params = build_model(mc, seed=0)
            clips = [
                ClipFeatures.from_arrays(
                    np.zeros((mc.s_audio, mc.channels)),
                    np.zeros((mc.s_video, mc.channels)))
                for _ in range(t)
            ]
            counts.append(count_flops(params, clips))
        rows.append({"variant": variant,
                     "macs": {str(t): c for t, c in zip(t_list, counts)}})
    _write_json(out_dir / "flops.json", {"clip_counts": t_list, "rows": rows})
    header = f"{'variant':>10} " + " ".join(f"T={t:>10}" for t in t_list)
    print(header)
    for row in rows:
        print(f"{row['variant']:>10} " +
              " ".join(f"{row['macs'][str(t)]:>12,}" for t in t_list))
    print(f"report: {out_dir / 'flops.json'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="memmixer",
        description="Multimodal mixer engine with a recurrent memory token.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", default="toy",
                       help="config file path, or preset name: toy / paper")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--precision", type=int, choices=(32, 64), default=None)
        if checkpoint:
            p.add_argument("--checkpoint", required=True)

    common(sub.add_parser("synth", help="generate a synthetic dataset"))
    common(sub.add_parser("train", help="train a model on the configured dataset"))
    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    common(p, checkpoint=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p = sub.add_parser("score", help="score one feature container")
    common(p, checkpoint=True)
    p.add_argument("--features", required=True)
    p = sub.add_parser("trace", help="per-clip incremental score deltas")
    common(p, checkpoint=True)
    p.add_argument("--features", required=True)
    p = sub.add_parser("rank", help="top-k predicted ranking vs true ranking")
    common(p, checkpoint=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--head", default=None,
                   help="score label to rank by (default: first label)")
    common(sub.add_parser("gradcheck", help="finite-difference check on a toy model"))
    common(sub.add_parser("ablate", help="train and compare all fusion variants"))
    p = sub.add_parser("flops", help="multiply-accumulate counts across clip counts")
    common(p)
    p.add_argument("--clips", default="4,8,16,32",
                   help="comma-separated clip counts")
    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "score": cmd_score,
    "trace": cmd_trace,
    "rank": cmd_rank,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "flops": cmd_flops,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.precision is not None:
            cfg["precision"] = args.precision
        set_precision(cfg.get("precision", 32))
        if args.command == "rank" and args.head is None:
            _, labels = data_mod.read_manifest(args.manifest)
            args.head = labels[0]
        return _COMMANDS[args.command](cfg, args)
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except EngineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
