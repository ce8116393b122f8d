from __future__ import annotations

import argparse
import json
import logging
from collections.abc import Sequence
from pathlib import Path
from typing import Any

import pandas as pd

from sesim import __version__
from sesim.config_manager import (
    RunConfig,
    TrainConfig,
    apply_cli_overrides,
    log_config_summary,
    resolve_config,
)
from sesim.dataio import GraphBundle, generate_synthetic, load_bundle, save_bundle
from sesim.errors import ArtifactMismatchError, ConfigError, SesimError
from sesim.graph import collapse_all
from sesim.metrics import average_increase, evaluation_report
from sesim.model import ModelState, load_checkpoint, save_checkpoint
from sesim.pseudolabel import build_label_set, load_label_tsv, save_label_tsv
from sesim.trainer import (
    EpochRecord,
    GraphInputs,
    SplitData,
    build_split,
    evaluate_link,
    evaluate_node,
    history_summary,
    load_history_csv,
    save_history_csv,
    select_metapaths,
    train,
)
from sesim.utils import (
    configure_logging,
    configure_logging_from_config,
    load_dotenv_if_present,
    resolve_threads,
)

_LOG = logging.getLogger("sesim_cli")

COMMANDS = ("synth", "labels", "train", "eval", "sweep")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sesim_cli.py",
        description="异构图元路径自监督辅助学习（伪标签 + 元学习贡献权重）。",
        formatter_class=argparse.RawTextHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("command", choices=COMMANDS, help="synth | labels | train | eval | sweep")

    parser.add_argument("--config", "-c", default=None, help="YAML 配置文件（默认读取 SESIM_CONFIG_PATH）。")
    parser.add_argument("--seed", type=int, default=None, help="覆盖所有随机种子。")
    parser.add_argument("--bundle", default=None, help="图数据包目录。")
    parser.add_argument("--labels", default=None, help="伪标签 TSV 路径。")
    parser.add_argument(
        "--out",
        default=None,
        help="输出路径：synth 为数据包目录，labels 为 TSV，train 为检查点，eval 为 JSON，sweep 为目录。",
    )
    parser.add_argument("--vanilla", action="store_true", help="关闭辅助任务与元更新（基线）。")
    parser.add_argument("--task", choices=("link", "node"), default=None, help="主任务类型。")
    parser.add_argument("--jmax", type=int, default=None, help="最大跳数（1..8）。")
    parser.add_argument("--epochs", type=int, default=None, help="训练轮数。")
    parser.add_argument(
        "--log-level",
        default=None,
        choices=("DEBUG", "INFO", "WARNING", "ERROR"),
        help="日志级别（默认取配置文件，否则 INFO）。",
    )
    parser.add_argument("--history", default=None, help="训练历史 CSV（默认 <checkpoint>.history.csv）。")
    parser.add_argument("--checkpoint", default=None, help="检查点路径（train 的 --out 同义）。")

    synth_group = parser.add_argument_group("合成数据")
    synth_group.add_argument("--intra", type=float, default=None, help="社区内连边概率（作用于所有关系）。")
    synth_group.add_argument("--inter", type=float, default=None, help="社区间连边概率（作用于所有关系）。")
    synth_group.add_argument("--noise", type=float, default=None, help="特征高斯噪声标准差。")

    parser.add_argument("--metapaths", type=int, default=None, help="只使用前 K 条元路径。")
    parser.add_argument(
        "--meta-mode",
        choices=("objective", "literal"),
        default=None,
        help="λ 元梯度：objective（验证主任务损失）或 literal（验证集上的加权辅助损失）。",
    )
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    overrides: dict[str, Any] = {
        "seed": args.seed,
        "bundle": args.bundle,
        "labels": args.labels,
        "vanilla": args.vanilla,
        "task": args.task,
        "j_max": args.jmax,
        "epochs": args.epochs,
        "log_level": args.log_level,
        "history": args.history,
        "checkpoint": args.checkpoint,
        "intra": args.intra,
        "inter": args.inter,
        "noise": args.noise,
        "metapath_count": None if args.command == "synth" else args.metapaths,
        "synth_metapath_count": args.metapaths if args.command == "synth" else None,
        "meta_mode": args.meta_mode,
    }
    if args.out is not None:
        target = {
            "synth": "bundle",
            "labels": "labels",
            "train": "checkpoint",
            "eval": "report",
            "sweep": "sweep_dir",
        }[args.command]
        overrides[target] = args.out
    return overrides


def _require(value: Path | None, flag: str) -> Path:
    if value is None:
        raise ConfigError(f"missing {flag}")
    return value


def _history_path(config: RunConfig, checkpoint: Path) -> Path:
    if config.paths.history is not None:
        return config.paths.history
    return checkpoint.with_name(checkpoint.name + ".history.csv")


# ============ 子命令 ============


def cmd_synth(config: RunConfig) -> int:
    out = _require(config.paths.bundle, "--out (bundle directory)")
    bundle = generate_synthetic(config.synth)
    save_bundle(bundle.graph, bundle.metapaths, out)
    _LOG.info("合成数据包已写入 %s", out)
    return 0


def cmd_labels(config: RunConfig) -> int:
    bundle = load_bundle(_require(config.paths.bundle, "--bundle"))
    out = _require(config.paths.labels, "--out (label TSV)")
    specs = select_metapaths(bundle.metapaths, config.train.metapath_count)
    adjs = collapse_all(bundle.graph, specs)
    labels = build_label_set(
        adjs, config.sampler, config.train.j_max, threads=resolve_threads(config.project.threads)
    )
    save_label_tsv(labels, out)
    for mid, count in labels.counts().items():
        _LOG.info("元路径 %d: %d 行", mid, count)
    _LOG.info("伪标签已写入 %s（共 %d 行）", out, len(labels))
    return 0


def _load_labels_if_any(config: RunConfig, bundle: GraphBundle):
    path = config.paths.labels
    if path is None or config.train.vanilla:
        return None
    specs = select_metapaths(bundle.metapaths, config.train.metapath_count)
    return load_label_tsv(path, j_max=config.train.j_max, metapath_ids=[s.id for s in specs])


def cmd_train(config: RunConfig) -> int:
    bundle = load_bundle(_require(config.paths.bundle, "--bundle"))
    checkpoint = _require(config.paths.checkpoint, "--out / --checkpoint")
    result = train(
        bundle.graph,
        bundle.metapaths,
        config.train,
        labels=_load_labels_if_any(config, bundle),
        sampler=config.sampler,
        threads=resolve_threads(config.project.threads),
    )
    save_checkpoint(result.state, checkpoint)
    history_path = _history_path(config, checkpoint)
    save_history_csv(result.history, history_path, result.state.metapath_ids)
    _LOG.info("检查点已写入 %s，训练历史 %s", checkpoint, history_path)
    return 0


def _report_values(
    state: ModelState, inputs: GraphInputs, split: SplitData, history: Sequence[EpochRecord]
) -> dict[str, float]:
    """link: auc_peak / auc_mean / macro_f1 / micro_f1；node: macro_f1 / micro_f1。"""
    if split.task == "node":
        return evaluate_node(state, inputs, split, "test")
    test = evaluate_link(state, inputs, split, "test")
    if history:
        summary = history_summary(history)
    else:
        summary = {"auc_peak": test["auc"], "auc_mean": test["auc"]}
    return {
        "auc_peak": summary["auc_peak"],
        "auc_mean": summary["auc_mean"],
        "macro_f1": test["macro_f1"],
        "micro_f1": test["micro_f1"],
    }


def _check_against_bundle(state: ModelState, bundle: GraphBundle, task: str) -> None:
    in_dim = bundle.graph.features.shape[1]
    if state.encoder.in_dim != in_dim:
        raise ArtifactMismatchError(
            f"checkpoint encoder expects {state.encoder.in_dim} input features, bundle has {in_dim}"
        )
    if task == "node" and state.primary.out_dim != bundle.graph.num_classes:
        raise ArtifactMismatchError(
            f"checkpoint predicts {state.primary.out_dim} classes, bundle has {bundle.graph.num_classes}"
        )


def cmd_eval(config: RunConfig) -> int:
    bundle = load_bundle(_require(config.paths.bundle, "--bundle"))
    checkpoint = _require(config.paths.checkpoint, "--checkpoint")
    cfg = config.train
    specs = select_metapaths(bundle.metapaths, cfg.metapath_count)
    state = load_checkpoint(
        checkpoint, [s.id for s in specs], task=cfg.task, pretext_mode=cfg.pretext_mode, encoder=cfg.encoder
    )
    _check_against_bundle(state, bundle, cfg.task)

    split = build_split(bundle.graph, collapse_all(bundle.graph, specs), cfg, build_labels=False)
    inputs = GraphInputs.from_split(bundle.graph, split, cfg.dense_cap)

    history: list[EpochRecord] = []
    history_path = _history_path(config, checkpoint)
    if history_path.exists():
        history = load_history_csv(history_path)

    report_path = config.paths.report or checkpoint.with_name(checkpoint.name + ".report.json")
    report = evaluation_report(_report_values(state, inputs, split, history), report_path)
    _LOG.info("评估报告 %s: %s", report_path, json.dumps(report))
    return 0


def _run_cell(
    bundle: GraphBundle, config: RunConfig, train_cfg: TrainConfig, vanilla: bool
) -> dict[str, float]:
    cfg = train_cfg.model_copy(update={"vanilla": vanilla})
    result = train(
        bundle.graph,
        bundle.metapaths,
        cfg,
        sampler=config.sampler,
        threads=resolve_threads(config.project.threads),
    )
    return evaluation_report(_report_values(result.state, result.inputs, result.split, result.history))


def cmd_sweep(config: RunConfig) -> int:
    """跑 j_max × 元路径数 (× 训练比例) 网格，每格训练 SESIM 与基线各一次。"""
    out = _require(config.paths.sweep_dir, "--out (sweep directory)")
    if config.paths.bundle is not None:
        bundle = load_bundle(config.paths.bundle)
    else:
        _LOG.info("未指定 --bundle，使用合成数据")
        bundle = generate_synthetic(config.synth)
    out.mkdir(parents=True, exist_ok=True)
    metric = "auc_peak" if config.train.task == "link" else "macro_f1"

    rows: list[dict[str, Any]] = []
    for fraction in config.sweep.train_fractions:
        for j_max in config.sweep.j_max_values:
            for count in config.sweep.metapath_counts:
                val_fraction = min(config.train.val_fraction, (1.0 - fraction) / 2)
                try:
                    cell_cfg = TrainConfig.model_validate(
                        config.train.model_dump()
                        | {
                            "j_max": j_max,
                            "metapath_count": count,
                            "train_fraction": fraction,
                            "val_fraction": val_fraction,
                        }
                    )
                except ValueError as e:
                    raise ConfigError(
                        f"sweep cell j_max={j_max} metapaths={count} train={fraction}: {e}"
                    ) from e
                _LOG.info("网格单元: j_max=%d 元路径=%d 训练比例=%s", j_max, count, fraction)
                sesim = _run_cell(bundle, config, cell_cfg, vanilla=False)
                vanilla = _run_cell(bundle, config, cell_cfg, vanilla=True)
                cell = {"j_max": j_max, "metapath_count": count, "train_fraction": fraction}
                name = f"cell_j{j_max}_m{count}_t{fraction:g}.json"
                (out / name).write_text(
                    json.dumps({**cell, "sesim": sesim, "vanilla": vanilla}, indent=2) + "\n",
                    encoding="utf-8",
                )
                rows.append({**cell, "metric": metric, "sesim": sesim[metric], "vanilla": vanilla[metric]})

    frame = pd.DataFrame(rows)
    frame["increase"] = (frame["sesim"] - frame["vanilla"]) / frame["vanilla"]
    mean_increase = average_increase(frame["sesim"].to_numpy(), frame["vanilla"].to_numpy())
    summary = pd.concat(
        [
            frame,
            pd.DataFrame(
                [
                    {
                        "j_max": "all",
                        "metapath_count": "all",
                        "train_fraction": "all",
                        "metric": metric,
                        "sesim": frame["sesim"].mean(),
                        "vanilla": frame["vanilla"].mean(),
                        "increase": mean_increase,
                    }
                ]
            ),
        ],
        ignore_index=True,
    )
    summary.to_csv(out / "summary.csv", index=False, lineterminator="\n", float_format="%.6f")
    _LOG.info("网格完成: %d 个单元，平均提升 %.4f%%", len(rows), 100 * mean_increase)
    return 0


_HANDLERS = {
    "synth": cmd_synth,
    "labels": cmd_labels,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def main(argv: list[str] | None = None) -> int:
    load_dotenv_if_present()
    parser = _build_parser()
    args = parser.parse_args(argv)

    configure_logging(args.log_level or "INFO")
    try:
        config = apply_cli_overrides(resolve_config(args.config), _overrides(args))
        configure_logging_from_config(config.project.log_level, config.logging)
        log_config_summary(config, _LOG)
        return _HANDLERS[args.command](config)
    except SesimError as e:
        _LOG.error("%s: %s", type(e).__name__, e)
        return e.exit_code


if __name__ == "__main__":
    raise SystemExit(main())
