"""命令行端到端测试：synth → labels → train → eval，以及退出码。"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import pandas as pd
import pytest

import sesim_cli
from sesim.config_manager import CONFIG_PATH_ENV
from sesim.dataio import EDGES_FILE, METAPATHS_FILE
from sesim.pseudolabel import LABEL_TSV_HEADER

SMALL_CONFIG = """\
project:
  seed: 3
sampler:
  target_nodes_per_metapath: 20
  neighbors_per_target: 6
synth:
  node_counts: [40, 16, 12]
  communities: 2
  noise: 0.5
  extra_feature_dims: 2
  relations:
    - {src_type: 0, dst_type: 1, p_intra: 0.2, p_inter: 0.02}
    - {src_type: 0, dst_type: 2, p_intra: 0.2, p_inter: 0.02}
    - {src_type: 1, dst_type: 2, p_intra: 0.3, p_inter: 0.05}
train:
  epochs: 2
  batch_size: 32
  val_batch_size: 32
  hidden_dim: 8
  embedding_dim: 4
  head_hidden: 6
  contribution_hidden: 10
sweep:
  j_max_values: [2]
  metapath_counts: [1, 2]
  train_fractions: [0.4]
"""


@pytest.fixture(autouse=True)
def _isolate(monkeypatch: pytest.MonkeyPatch):
    monkeypatch.delenv(CONFIG_PATH_ENV, raising=False)
    monkeypatch.delenv("SESIM_THREADS", raising=False)
    yield
    import sesim.utils as utils_module

    utils_module._logging_configured = False
    root = logging.getLogger()
    for handler in [h for h in root.handlers if type(h).__name__ != "LogCaptureHandler"]:
        handler.close()
        root.removeHandler(handler)


@pytest.fixture
def workspace(temp_dir: Path) -> Path:
    (temp_dir / "sesim.yaml").write_text(SMALL_CONFIG, encoding="utf-8")
    return temp_dir


def _run(workspace: Path, *args: str) -> int:
    return sesim_cli.main([*args, "--config", str(workspace / "sesim.yaml"), "--log-level", "WARNING"])


def _synth(workspace: Path, name: str = "g") -> Path:
    out = workspace / name
    assert _run(workspace, "synth", "--out", str(out)) == 0
    return out


class TestSynth:
    """synth 子命令。"""

    def test_same_seed_same_bundle(self, workspace: Path) -> None:
        a = _synth(workspace, "a")
        b = _synth(workspace, "b")
        names = sorted(p.name for p in a.iterdir())
        assert names == sorted(p.name for p in b.iterdir())
        for name in names:
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_invalid_probability_exits_2(self, workspace: Path) -> None:
        assert _run(workspace, "synth", "--out", str(workspace / "g"), "--intra", "1.5") == 2
        assert not (workspace / "g").exists()

    def test_missing_out_exits_2(self, workspace: Path) -> None:
        assert _run(workspace, "synth") == 2

    def test_metapaths_limits_generated_bundle(self, workspace: Path) -> None:
        out = workspace / "g"
        assert _run(workspace, "synth", "--out", str(out), "--metapaths", "1") == 0
        schema = json.loads((out / METAPATHS_FILE).read_text(encoding="utf-8"))
        assert len(schema["metapaths"]) == 1

    def test_metapaths_outside_synth_leaves_generator_alone(self) -> None:
        args = sesim_cli._build_parser().parse_args(["sweep", "--metapaths", "1"])
        overrides = sesim_cli._overrides(args)
        assert overrides["metapath_count"] == 1
        assert overrides["synth_metapath_count"] is None

    def test_unknown_command(self, workspace: Path) -> None:
        with pytest.raises(SystemExit) as exc:
            sesim_cli.main(["fit"])
        assert exc.value.code == 2


class TestLabels:
    """labels 子命令。"""

    def test_writes_tsv(self, workspace: Path) -> None:
        bundle = _synth(workspace)
        out = workspace / "labels.tsv"
        assert _run(workspace, "labels", "--bundle", str(bundle), "--out", str(out), "--jmax", "3") == 0
        lines = out.read_text(encoding="utf-8").splitlines()
        assert lines[0] == LABEL_TSV_HEADER
        assert len(lines) > 1
        for line in lines[1:]:
            i, j, _, y = (int(v) for v in line.split("\t"))
            assert i != j
            assert 1 <= y <= 3

    def test_jmax_out_of_range_exits_2(self, workspace: Path) -> None:
        bundle = _synth(workspace)
        code = _run(workspace, "labels", "--bundle", str(bundle), "--out", str(workspace / "l.tsv"), "--jmax", "9")
        assert code == 2

    def test_bad_bundle_exits_3(self, workspace: Path) -> None:
        bundle = _synth(workspace)
        with open(bundle / EDGES_FILE, "a", encoding="utf-8") as f:
            f.write("0\t0\t1\t0\n")
        assert _run(workspace, "labels", "--bundle", str(bundle), "--out", str(workspace / "l.tsv")) == 3

    def test_non_composing_metapath_exits_3(self, workspace: Path) -> None:
        bundle = _synth(workspace)
        schema = json.loads((bundle / METAPATHS_FILE).read_text(encoding="utf-8"))
        schema["metapaths"][0]["hops"] = [{"edge_type": 0, "reverse": False}, {"edge_type": 0, "reverse": False}]
        (bundle / METAPATHS_FILE).write_text(json.dumps(schema), encoding="utf-8")
        assert _run(workspace, "labels", "--bundle", str(bundle), "--out", str(workspace / "l.tsv")) == 3


class TestTrainEval:
    """train 与 eval 子命令。"""

    def test_link_pipeline(self, workspace: Path) -> None:
        bundle = _synth(workspace)
        labels = workspace / "labels.tsv"
        ckpt = workspace / "model.ckpt"
        assert _run(workspace, "labels", "--bundle", str(bundle), "--out", str(labels)) == 0
        assert _run(workspace, "train", "--bundle", str(bundle), "--labels", str(labels), "--out", str(ckpt)) == 0
        assert ckpt.read_bytes().startswith(b"SESIM1")

        history = pd.read_csv(workspace / "model.ckpt.history.csv")
        assert list(history["epoch"]) == [0, 1]

        report_path = workspace / "report.json"
        assert _run(workspace, "eval", "--bundle", str(bundle), "--checkpoint", str(ckpt), "--out", str(report_path)) == 0
        report = json.loads(report_path.read_text(encoding="utf-8"))
        assert set(report) == {"auc_peak", "auc_mean", "macro_f1", "micro_f1"}
        assert report["auc_peak"] == round(history["val_metric"].max(), 6)
        assert all(0.0 <= v <= 1.0 for v in report.values())

    def test_training_is_reproducible(self, workspace: Path) -> None:
        bundle = _synth(workspace)
        for name in ("a.ckpt", "b.ckpt"):
            assert _run(workspace, "train", "--bundle", str(bundle), "--out", str(workspace / name)) == 0
        assert (workspace / "a.ckpt").read_bytes() == (workspace / "b.ckpt").read_bytes()
        a = (workspace / "a.ckpt.history.csv").read_text(encoding="utf-8")
        assert a == (workspace / "b.ckpt.history.csv").read_text(encoding="utf-8")

    def test_zero_epochs_report_uses_test_auc(self, workspace: Path) -> None:
        bundle = _synth(workspace)
        ckpt = workspace / "init.ckpt"
        assert _run(workspace, "train", "--bundle", str(bundle), "--out", str(ckpt), "--epochs", "0") == 0
        assert _run(workspace, "eval", "--bundle", str(bundle), "--checkpoint", str(ckpt)) == 0
        report = json.loads((workspace / "init.ckpt.report.json").read_text(encoding="utf-8"))
        assert report["auc_peak"] == report["auc_mean"]

    def test_vanilla_history_has_no_pretext_loss(self, workspace: Path) -> None:
        bundle = _synth(workspace)
        ckpt = workspace / "vanilla.ckpt"
        assert _run(workspace, "train", "--bundle", str(bundle), "--out", str(ckpt), "--vanilla") == 0
        history = pd.read_csv(workspace / "vanilla.ckpt.history.csv")
        assert (history["loss_pre_total"] == 0.0).all()

    def test_node_task(self, workspace: Path) -> None:
        bundle = _synth(workspace)
        ckpt = workspace / "node.ckpt"
        assert _run(workspace, "train", "--bundle", str(bundle), "--out", str(ckpt), "--task", "node") == 0
        assert _run(workspace, "eval", "--bundle", str(bundle), "--checkpoint", str(ckpt), "--task", "node") == 0
        report = json.loads((workspace / "node.ckpt.report.json").read_text(encoding="utf-8"))
        assert set(report) == {"macro_f1", "micro_f1"}

    def test_missing_checkpoint_exits_5(self, workspace: Path) -> None:
        bundle = _synth(workspace)
        code = _run(workspace, "eval", "--bundle", str(bundle), "--checkpoint", str(workspace / "none.ckpt"))
        assert code == 5

    def test_task_mismatch_exits_5(self, workspace: Path) -> None:
        bundle = _synth(workspace)
        ckpt = workspace / "node.ckpt"
        assert _run(workspace, "train", "--bundle", str(bundle), "--out", str(ckpt), "--task", "node") == 0
        assert _run(workspace, "eval", "--bundle", str(bundle), "--checkpoint", str(ckpt)) == 5

    def test_labels_with_other_jmax_exit_3(self, workspace: Path) -> None:
        bundle = _synth(workspace)
        labels = workspace / "labels.tsv"
        assert _run(workspace, "labels", "--bundle", str(bundle), "--out", str(labels), "--jmax", "4") == 0
        with open(labels, "a", encoding="utf-8") as f:
            f.write("0\t5\t0\t4\n")
        args = ["train", "--bundle", str(bundle), "--labels", str(labels), "--out", str(workspace / "m.ckpt")]
        code = _run(workspace, *args, "--jmax", "2")
        assert code == 3


class TestSweep:
    """sweep 子命令。"""

    @pytest.mark.slow
    def test_writes_cells_and_summary(self, workspace: Path) -> None:
        out = workspace / "sweep"
        assert _run(workspace, "sweep", "--out", str(out)) == 0
        for count in (1, 2):
            cell = json.loads((out / f"cell_j2_m{count}_t0.4.json").read_text(encoding="utf-8"))
            assert cell["metapath_count"] == count
            assert set(cell["sesim"]) == {"auc_peak", "auc_mean", "macro_f1", "micro_f1"}
        summary = pd.read_csv(out / "summary.csv", dtype={"j_max": str})
        assert len(summary) == 3
        assert summary["j_max"].iloc[-1] == "all"
        assert list(summary.columns) == [
            "j_max",
            "metapath_count",
            "train_fraction",
            "metric",
            "sesim",
            "vanilla",
            "increase",
        ]
