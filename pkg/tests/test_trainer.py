"""训练器测试：数据划分、采样、元梯度有限差分、Adam、确定性与端到端训练。"""

from __future__ import annotations

import numpy as np
import pytest

from sesim.autodiff import gather_rows, no_tape, parameter
from sesim.config_manager import PairSamplerConfig, SynthConfig, SynthRelationConfig, TrainConfig
from sesim.dataio import generate_synthetic
from sesim.errors import ConfigError, NumericError, StateError
from sesim.graph import collapse_all, remove_pairs, union_adjacency, upper_pairs
from sesim.model import contribution, init_model_state, pair_feature, pretext_output
from sesim.pseudolabel import build_label_set, jump_label
from sesim.trainer import (
    AdamOptimizer,
    EpochRecord,
    GraphInputs,
    PrimaryBatch,
    StepBatch,
    allocate_pretext,
    build_split,
    calibrate_pretext_heads,
    encode,
    evaluate_link,
    history_summary,
    joint_loss,
    labels_agreeing_with,
    load_history_csv,
    meta_gradient,
    meta_update_lambda,
    minibatch_sampler,
    pretext_losses,
    pretext_sampler,
    primary_loss,
    sample_negative_pairs,
    save_history_csv,
    select_metapaths,
    train,
    virtual_step,
)
from tests.conftest import small_train_config

SAMPLER = PairSamplerConfig(target_nodes_per_metapath=20, neighbors_per_target=6, seed=3)


def _synth(**kwargs) -> SynthConfig:
    values = {
        "node_counts": [40, 16, 12],
        "communities": 2,
        "relations": [
            SynthRelationConfig(src_type=0, dst_type=1, p_intra=0.2, p_inter=0.02),
            SynthRelationConfig(src_type=0, dst_type=2, p_intra=0.2, p_inter=0.02),
            SynthRelationConfig(src_type=1, dst_type=2, p_intra=0.3, p_inter=0.05),
        ],
        "noise": 0.5,
        "extra_feature_dims": 2,
        "seed": 1,
    }
    values.update(kwargs)
    return SynthConfig(**values)


@pytest.fixture(scope="module")
def bundle():
    return generate_synthetic(_synth())


def _setup(bundle, task: str = "link", **overrides):
    cfg = small_train_config(task=task, metapath_count=2, **overrides)
    specs = select_metapaths(bundle.metapaths, cfg.metapath_count)
    adjs = collapse_all(bundle.graph, specs)
    split = build_split(bundle.graph, adjs, cfg, sampler=SAMPLER)
    inputs = GraphInputs.from_split(bundle.graph, split)
    state = init_model_state(
        bundle.graph.features.shape[1],
        [s.id for s in specs],
        seed=cfg.seed,
        task=task,
        num_classes=bundle.graph.num_classes,
        hidden_dim=cfg.hidden_dim,
        embedding_dim=cfg.embedding_dim,
        head_hidden=cfg.head_hidden,
        contribution_hidden=cfg.contribution_hidden,
    )
    return cfg, adjs, split, inputs, state


def _batches(cfg, split, step: int = 0):
    items, targets = split.samples("train", 0)
    idx = minibatch_sampler(split, "train", cfg.batch_size, cfg.seed, step)
    batch = StepBatch(PrimaryBatch(items[idx], targets[idx]), pretext_sampler(split.labels, 24, cfg.seed, step))
    val_items, val_targets = split.samples("val")
    vidx = minibatch_sampler(split, "val", cfg.val_batch_size, cfg.seed, step)
    return batch, PrimaryBatch(val_items[vidx], val_targets[vidx])


def _codes(pairs: np.ndarray, n: int) -> set[int]:
    pairs = np.asarray(pairs).reshape(-1, 2)
    return set((np.minimum(pairs[:, 0], pairs[:, 1]) * n + np.maximum(pairs[:, 0], pairs[:, 1])).tolist())


def _encoder_and_head(state) -> list:
    return state.encoder.parameters() + state.primary.parameters()


class TestLinkSplit:
    """链接预测划分。"""

    def test_partitions_positives(self, bundle) -> None:
        cfg, adjs, split, _, _ = _setup(bundle)
        positives = upper_pairs(union_adjacency(adjs))
        total = len(positives)
        assert len(split.train) == int(np.floor(cfg.train_fraction * total))
        assert len(split.val) == int(np.floor(cfg.val_fraction * total))
        assert len(split.train) + len(split.val) + len(split.test) == total
        n = split.n
        parts = [_codes(split.train, n), _codes(split.val, n), _codes(split.test, n)]
        assert not (parts[0] & parts[1]) and not (parts[0] & parts[2]) and not (parts[1] & parts[2])

    def test_held_out_edges_removed_from_encoder_graph(self, bundle) -> None:
        _, _, split, _, _ = _setup(bundle)
        held = np.concatenate([split.val, split.test])
        assert not split.encoder_adj[held[:, 0], held[:, 1]].any()
        assert split.encoder_adj[split.train[:, 0], split.train[:, 1]].all()

    def test_pretext_pairs_exclude_held_out_edges(self, bundle) -> None:
        _, _, split, _, _ = _setup(bundle)
        assert len(split.labels) > 0
        held = _codes(np.concatenate([split.val, split.test]), split.n)
        assert not (_codes(split.labels.entries[:, :2], split.n) & held)

    def test_supplied_full_graph_labels_rechecked_on_training_graph(self, bundle) -> None:
        cfg, adjs, _, _, _ = _setup(bundle)
        full = build_label_set(adjs, SAMPLER, cfg.j_max)
        split = build_split(bundle.graph, adjs, cfg, labels=full, sampler=SAMPLER)
        held = np.concatenate([split.val, split.test])
        train_adjs = {a.metapath_id: remove_pairs(a, held) for a in adjs}
        assert 0 < len(split.labels) < len(full)
        for i, j, mid, y in split.labels.entries.tolist():
            assert jump_label(train_adjs[mid], i, j, cfg.j_max) == y

    def test_labels_agreeing_with_own_graph(self, bundle) -> None:
        cfg, adjs, _, _, _ = _setup(bundle)
        full = build_label_set(adjs, SAMPLER, cfg.j_max)
        assert labels_agreeing_with(full, adjs).all()

    def test_negatives_are_non_edges(self, bundle) -> None:
        _, adjs, split, _, _ = _setup(bundle)
        positives = _codes(upper_pairs(union_adjacency(adjs)), split.n)
        for negatives in (split.val_negatives, split.test_negatives, split.train_negatives(0)):
            assert not (_codes(negatives, split.n) & positives)
        assert len(split.val_negatives) == len(split.val)
        assert not (_codes(split.val_negatives, split.n) & _codes(split.test_negatives, split.n))

    def test_train_negatives_resampled_each_epoch(self, bundle) -> None:
        _, _, split, _, _ = _setup(bundle)
        np.testing.assert_array_equal(split.train_negatives(1), split.train_negatives(1))
        assert not np.array_equal(split.train_negatives(0), split.train_negatives(1))

    def test_samples_put_positives_first(self, bundle) -> None:
        _, _, split, _, _ = _setup(bundle)
        items, targets = split.samples("val")
        k = len(split.val)
        np.testing.assert_array_equal(items[:k], split.val)
        assert targets[:k].all() and not targets[k:].any()
        assert split.population("val") == 2 * k

    def test_same_seed_same_split(self, bundle) -> None:
        _, _, a, _, _ = _setup(bundle)
        _, _, b, _, _ = _setup(bundle)
        np.testing.assert_array_equal(a.test, b.test)
        np.testing.assert_array_equal(a.test_negatives, b.test_negatives)
        np.testing.assert_array_equal(a.labels.entries, b.labels.entries)

    def test_dense_cap(self, bundle) -> None:
        _, _, split, _, _ = _setup(bundle)
        with pytest.raises(ConfigError):
            GraphInputs.from_split(bundle.graph, split, dense_cap=10)


class TestNodeSplit:
    """节点分类划分。"""

    def test_sizes_and_pretext_restriction(self, bundle) -> None:
        cfg, _, split, _, _ = _setup(bundle, task="node")
        assert len(split.train) == 16 and len(split.val) == 8 and len(split.test) == 16
        assert np.isin(split.labels.entries[:, 0], split.train).all()
        items, targets = split.samples("test")
        np.testing.assert_array_equal(targets, bundle.graph.labels[items])

    def test_requires_labels(self, bundle) -> None:
        from sesim.graph import HetGraph

        g = bundle.graph
        unlabeled = HetGraph(g.node_counts, g.relations, g.target_type, g.features)
        cfg = small_train_config(task="node")
        with pytest.raises(ConfigError):
            build_split(unlabeled, collapse_all(unlabeled, bundle.metapaths[:1]), cfg, sampler=SAMPLER)


class TestSamplers:
    """负采样、小批量与伪标签批分配。"""

    def test_negative_pairs_distinct_and_allowed(self) -> None:
        forbidden = {0 * 6 + 1, 2 * 6 + 3}
        pairs = sample_negative_pairs(6, 10, forbidden, np.random.default_rng(0))
        codes = [i * 6 + j for i, j in pairs.tolist()]
        assert all(i < j for i, j in pairs.tolist())
        assert len(set(codes)) == 10
        assert not set(codes) & forbidden

    def test_negative_capacity(self) -> None:
        with pytest.raises(ConfigError):
            sample_negative_pairs(4, 6, {1}, np.random.default_rng(0))

    def test_minibatches_cover_epoch(self, bundle) -> None:
        cfg, _, split, _, _ = _setup(bundle)
        population = split.population("train")
        steps = int(np.ceil(population / cfg.batch_size))
        seen = np.concatenate([minibatch_sampler(split, "train", cfg.batch_size, 7, s) for s in range(steps)])
        np.testing.assert_array_equal(np.sort(seen), np.arange(population))
        np.testing.assert_array_equal(
            minibatch_sampler(split, "train", cfg.batch_size, 7, 3),
            minibatch_sampler(split, "train", cfg.batch_size, 7, 3),
        )

    def test_allocate_pretext_proportional(self) -> None:
        assert allocate_pretext({0: 30, 1: 10}, 8) == {0: 6, 1: 2}
        assert sum(allocate_pretext({0: 7, 1: 5, 2: 1}, 10).values()) == 10
        assert allocate_pretext({0: 2, 1: 1}, 10) == {0: 2, 1: 1}
        assert allocate_pretext({0: 0}, 4) == {0: 0}


class TestJointLoss:
    """联合损失与权重。"""

    def test_zero_weights_reduce_to_primary(self, bundle) -> None:
        cfg, _, split, inputs, state = _setup(bundle)
        batch, _ = _batches(cfg, split)
        with no_tape():
            joint = joint_loss(state, inputs, batch, con_override=0.0)
            plain = primary_loss(state, encode(state, inputs), batch.primary)
        assert joint.total.item() == plain.item()
        assert joint.pretext_value() == 0.0

    def test_contribution_weights_in_unit_interval(self, bundle) -> None:
        cfg, _, split, inputs, state = _setup(bundle)
        batch, _ = _batches(cfg, split)
        with no_tape():
            joint = joint_loss(state, inputs, batch)
        assert joint.terms
        for term in joint.terms:
            assert term.weights.shape == (len(term.pairs), 1)
            assert np.all((term.weights > 0) & (term.weights < 1))


class TestPretextCalibration:
    """训练开始前的辅助任务头校准。"""

    def test_regression_residual_is_centered(self, bundle) -> None:
        _, _, split, inputs, state = _setup(bundle)
        calibrate_pretext_heads(state, inputs, split.labels)
        with no_tape():
            z = encode(state, inputs)
            for mid in state.metapath_ids:
                pairs, y = split.labels.for_metapath(mid)
                head = state.pretext[mid]
                assert np.all(head.w.value >= 0)
                phi = pair_feature(gather_rows(z, pairs[:, 0]), gather_rows(z, pairs[:, 1]))
                residual = pretext_output(phi, head).value.ravel() - y
                assert abs(residual.mean()) < 1e-9

    def test_classification_bias_matches_label_frequencies(self, bundle) -> None:
        cfg, _, split, inputs, _ = _setup(bundle)
        state = init_model_state(
            bundle.graph.features.shape[1],
            split.labels.metapath_ids,
            seed=cfg.seed,
            pretext_mode="classification",
            j_max=cfg.j_max,
            hidden_dim=cfg.hidden_dim,
            embedding_dim=cfg.embedding_dim,
            head_hidden=cfg.head_hidden,
            contribution_hidden=cfg.contribution_hidden,
        )
        weights = {mid: state.pretext[mid].w.value.copy() for mid in state.metapath_ids}
        calibrate_pretext_heads(state, inputs, split.labels)
        with no_tape():
            z = encode(state, inputs)
            for mid in state.metapath_ids:
                pairs, y = split.labels.for_metapath(mid)
                np.testing.assert_array_equal(state.pretext[mid].w.value, weights[mid])
                phi = pair_feature(gather_rows(z, pairs[:, 0]), gather_rows(z, pairs[:, 1]))
                logits = pretext_output(phi, state.pretext[mid]).value
                freq = (np.bincount(y - 1, minlength=cfg.j_max) + 1.0) / (len(y) + cfg.j_max)
                np.testing.assert_allclose(logits.mean(axis=0), np.log(freq), atol=1e-12)

    def test_vanilla_training_leaves_pretext_heads_alone(self, bundle) -> None:
        cfg = small_train_config(epochs=1, vanilla=True, weight_decay=0.0)
        result = train(bundle.graph, bundle.metapaths, cfg, sampler=SAMPLER)
        init = init_model_state(
            bundle.graph.features.shape[1],
            [m.id for m in bundle.metapaths],
            seed=cfg.seed,
            hidden_dim=8,
            embedding_dim=4,
            head_hidden=6,
            contribution_hidden=10,
        )
        for mid in init.metapath_ids:
            np.testing.assert_array_equal(result.state.pretext[mid].b.value, init.pretext[mid].b.value)


class TestMetaGradient:
    """λ 的元梯度与有限差分一致。"""

    ALPHA = 0.1
    H = 1e-6
    COORDS = [(0, (0, 0)), (0, (2, 5)), (1, (0, 3)), (2, (4, 0)), (2, (7, 0)), (3, (0, 0))]

    def _val_loss(self, state, inputs, batch, val_batch, lam_values) -> float:
        perturbed = state.with_lambda(lam_values)
        virtual = virtual_step(perturbed, inputs, batch, self.ALPHA)
        hat = perturbed.with_w(virtual.w_hat)
        with no_tape():
            return primary_loss(hat, encode(hat, inputs), val_batch).item()

    def test_objective_mode_matches_finite_differences(self, bundle) -> None:
        cfg, _, split, inputs, state = _setup(bundle)
        batch, val_batch = _batches(cfg, split)
        virtual = virtual_step(state, inputs, batch, self.ALPHA)
        grads = meta_gradient(state, inputs, virtual, val_batch, mode="objective")
        lam = [p.value.copy() for p in state.lambda_parameters()]
        assert max(float(np.abs(g).max()) for g in grads) > 0

        for k, idx in self.COORDS:
            plus = [v.copy() for v in lam]
            minus = [v.copy() for v in lam]
            plus[k][idx] += self.H
            minus[k][idx] -= self.H
            numeric = (
                self._val_loss(state, inputs, batch, val_batch, plus)
                - self._val_loss(state, inputs, batch, val_batch, minus)
            ) / (2 * self.H)
            assert grads[k][idx] == pytest.approx(numeric, rel=1e-3, abs=1e-9), (k, idx)

    def test_literal_mode_matches_finite_differences(self, bundle) -> None:
        cfg, _, split, inputs, state = _setup(bundle)
        batch, val_batch = _batches(cfg, split)
        val_pretext = pretext_sampler(split.labels, 24, cfg.seed, 5)
        virtual = virtual_step(state, inputs, batch, self.ALPHA)
        grads = meta_gradient(state, inputs, virtual, val_batch, mode="literal", val_pretext=val_pretext)
        hat = state.with_w(virtual.w_hat)

        def objective(lam_values) -> float:
            perturbed = hat.with_lambda(lam_values)
            with no_tape():
                z = encode(perturbed, inputs)
                total = 0.0
                for mid in sorted(val_pretext.pairs):
                    losses, phi = pretext_losses(perturbed, z, mid, val_pretext.pairs[mid], val_pretext.y[mid])
                    c = contribution(phi, perturbed.contribution)
                    total += float((c.value * losses.value).mean())
            return total

        lam = [p.value.copy() for p in state.lambda_parameters()]
        for k, idx in self.COORDS:
            plus = [v.copy() for v in lam]
            minus = [v.copy() for v in lam]
            plus[k][idx] += self.H
            minus[k][idx] -= self.H
            numeric = (objective(plus) - objective(minus)) / (2 * self.H)
            assert grads[k][idx] == pytest.approx(numeric, rel=1e-4, abs=1e-10), (k, idx)

    def test_update_is_gradient_step(self, bundle) -> None:
        cfg, _, split, inputs, state = _setup(bundle)
        batch, val_batch = _batches(cfg, split)
        virtual = virtual_step(state, inputs, batch, self.ALPHA)
        grads = meta_gradient(state, inputs, virtual, val_batch)
        updated = meta_update_lambda(state, inputs, virtual, val_batch, 0.5)
        for new, old, g in zip(updated, state.lambda_parameters(), grads):
            np.testing.assert_allclose(new, old.value - 0.5 * g)

    def test_virtual_step_does_not_touch_state(self, bundle) -> None:
        cfg, _, split, inputs, state = _setup(bundle)
        before = [p.value.copy() for p in state.w_parameters()]
        virtual_step(state, inputs, _batches(cfg, split)[0], self.ALPHA)
        for a, p in zip(before, state.w_parameters()):
            np.testing.assert_array_equal(a, p.value)

    def test_missing_virtual_step(self, bundle) -> None:
        cfg, _, split, inputs, state = _setup(bundle)
        _, val_batch = _batches(cfg, split)
        with pytest.raises(StateError):
            meta_gradient(state, inputs, None, val_batch)


class TestAdam:
    """Adam 更新与手算结果一致。"""

    def test_two_steps(self) -> None:
        p = parameter(np.array([[1.0, -2.0]]))
        opt = AdamOptimizer([p], lr=0.1, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01)
        g1 = np.array([[0.5, -0.1]])
        g2 = np.array([[0.2, 0.3]])

        w0 = np.array([[1.0, -2.0]])
        d1 = g1 + 0.01 * w0
        m1, v1 = 0.1 * d1, 0.001 * d1**2
        w1 = w0 - 0.1 * (m1 / 0.1) / (np.sqrt(v1 / 0.001) + 1e-8)
        opt.step([g1])
        np.testing.assert_allclose(p.value, w1, rtol=1e-12)

        d2 = g2 + 0.01 * w1
        m2 = 0.9 * m1 + 0.1 * d2
        v2 = 0.999 * v1 + 0.001 * d2**2
        w2 = w1 - 0.1 * (m2 / (1 - 0.9**2)) / (np.sqrt(v2 / (1 - 0.999**2)) + 1e-8)
        opt.step([g2])
        np.testing.assert_allclose(p.value, w2, rtol=1e-12)

    def test_first_step_moves_by_learning_rate(self) -> None:
        p = parameter(np.array([[3.0, 3.0]]))
        AdamOptimizer([p], lr=0.01).step([np.array([[4.0, -0.002]])])
        np.testing.assert_allclose(p.value, [[2.99, 3.01]], rtol=1e-6)

    def test_non_finite_update(self) -> None:
        p = parameter(np.ones((1, 1)), name="w")
        with pytest.raises(NumericError, match=r"adam\[w\]"):
            AdamOptimizer([p]).step([np.array([[np.nan]])])


class TestHistory:
    """训练历史 CSV。"""

    def test_save_and_load(self, temp_dir) -> None:
        history = [
            EpochRecord(0, 0.7, 0.3, 0.61, {0: 0.5, 2: float("nan")}),
            EpochRecord(1, 0.6, 0.2, 0.72, {0: 0.4, 2: 0.45}),
        ]
        path = temp_dir / "history.csv"
        save_history_csv(history, path, [2, 0])
        header = path.read_text(encoding="utf-8").splitlines()[0]
        assert header == "epoch,loss_pri,loss_pre_total,val_metric,mean_con_m0,mean_con_m2"
        loaded = load_history_csv(path)
        assert [r.val_metric for r in loaded] == [0.61, 0.72]
        assert np.isnan(loaded[0].mean_con[2])
        assert history_summary(loaded) == {"auc_peak": 0.72, "auc_mean": pytest.approx(0.665)}


class TestTrain:
    """训练主循环。"""

    def test_zero_epochs_returns_initialization(self, bundle) -> None:
        cfg = small_train_config(epochs=0)
        state, history = train(bundle.graph, bundle.metapaths, cfg, sampler=SAMPLER)
        init = init_model_state(
            bundle.graph.features.shape[1],
            [m.id for m in bundle.metapaths],
            seed=cfg.seed,
            hidden_dim=8,
            embedding_dim=4,
            head_hidden=6,
            contribution_hidden=10,
        )
        assert history == []
        for a, b in zip(state.arrays(), init.arrays()):
            np.testing.assert_array_equal(a, b)

    def test_deterministic(self, bundle) -> None:
        cfg = small_train_config(epochs=2)
        a = train(bundle.graph, bundle.metapaths, cfg, sampler=SAMPLER)
        b = train(bundle.graph, bundle.metapaths, cfg, sampler=SAMPLER)
        assert [r.val_metric for r in a.history] == [r.val_metric for r in b.history]
        assert [r.loss_pri for r in a.history] == [r.loss_pri for r in b.history]
        for x, y in zip(a.state.arrays(), b.state.arrays()):
            np.testing.assert_array_equal(x, y)

    def test_history_fields(self, bundle) -> None:
        result = train(bundle.graph, bundle.metapaths, small_train_config(epochs=2), sampler=SAMPLER)
        assert [r.epoch for r in result.history] == [0, 1]
        for rec in result.history:
            assert 0.0 <= rec.val_metric <= 1.0
            assert rec.loss_pre_total > 0
            assert set(rec.mean_con) == {m.id for m in bundle.metapaths}

    def test_lambda_changes_under_meta_updates(self, bundle) -> None:
        cfg = small_train_config(epochs=1)
        result = train(bundle.graph, bundle.metapaths, cfg, sampler=SAMPLER)
        init = init_model_state(
            bundle.graph.features.shape[1],
            [m.id for m in bundle.metapaths],
            seed=cfg.seed,
            hidden_dim=8,
            embedding_dim=4,
            head_hidden=6,
            contribution_hidden=10,
        )
        moved = [
            not np.array_equal(a.value, b.value)
            for a, b in zip(result.state.lambda_parameters(), init.lambda_parameters())
        ]
        assert any(moved)

    def test_zero_contribution_matches_vanilla(self, bundle) -> None:
        cfg = small_train_config(epochs=2)
        vanilla = train(bundle.graph, bundle.metapaths, cfg.model_copy(update={"vanilla": True}), sampler=SAMPLER)
        zeroed = train(bundle.graph, bundle.metapaths, cfg, sampler=SAMPLER, con_override=0.0)
        # 辅助任务头只在有伪标签时被校准
        for a, b in zip(_encoder_and_head(vanilla.state), _encoder_and_head(zeroed.state)):
            np.testing.assert_array_equal(a.value, b.value)
        assert [r.val_metric for r in vanilla.history] == [r.val_metric for r in zeroed.history]

    def test_vanilla_records_no_pretext(self, bundle) -> None:
        cfg = small_train_config(epochs=1, vanilla=True)
        result = train(bundle.graph, bundle.metapaths, cfg, sampler=SAMPLER)
        assert result.history[0].loss_pre_total == 0.0
        assert len(result.split.labels) == 0

    def test_node_task(self, bundle) -> None:
        cfg = small_train_config(epochs=2, task="node")
        result = train(bundle.graph, bundle.metapaths, cfg, sampler=SAMPLER)
        assert len(result.history) == 2
        assert 0.0 <= result.history[-1].val_metric <= 1.0

    def test_classification_pretext_and_literal_mode(self, bundle) -> None:
        cfg = small_train_config(epochs=1, pretext_mode="classification", meta_mode="literal")
        result = train(bundle.graph, bundle.metapaths, cfg, sampler=SAMPLER)
        assert result.state.pretext[0].w.shape == (4, 4)
        assert np.isfinite(result.history[0].loss_pre_total)

    def test_numeric_failure_reports_epoch(self, bundle) -> None:
        from sesim.graph import HetGraph

        g = bundle.graph
        huge = HetGraph(g.node_counts, g.relations, g.target_type, g.features * 1e200, g.labels, num_classes=2)
        with pytest.raises(NumericError) as exc:
            train(huge, bundle.metapaths, small_train_config(epochs=1), sampler=SAMPLER)
        assert exc.value.epoch == 0
        assert exc.value.step == 0
        assert exc.value.exit_code == 4

    @pytest.mark.slow
    def test_link_prediction_learns(self) -> None:
        data = generate_synthetic(SynthConfig(seed=4, metapath_count=2, noise=0.5))
        cfg = small_train_config(epochs=30, alpha=0.01, hidden_dim=16, embedding_dim=8, seed=4)
        result = train(data.graph, data.metapaths, cfg, sampler=PairSamplerConfig(seed=4))
        assert max(r.val_metric for r in result.history) > 0.6
        assert evaluate_link(result.state, result.inputs, result.split)["auc"] > 0.6


def _sesim_and_vanilla(seed: int, task: str, epochs: int):
    """3×300 节点、2 条元路径的合成数据上，同一 seed 分别训练 SESIM 与基线。"""
    data = generate_synthetic(SynthConfig(seed=seed, metapath_count=2))
    cfg = TrainConfig(seed=seed, task=task, epochs=epochs)
    sampler = PairSamplerConfig(seed=seed)
    sesim = train(data.graph, data.metapaths, cfg, sampler=sampler)
    vanilla = train(data.graph, data.metapaths, cfg.model_copy(update={"vanilla": True}), sampler=sampler)
    return sesim, vanilla


@pytest.mark.slow
class TestAuxiliaryBenefit:
    """辅助任务在合成社区图上的方向性收益（10 个 seed）。"""

    SEEDS = range(10)

    def test_link_auc_mean_not_below_vanilla(self) -> None:
        gains = []
        for seed in self.SEEDS:
            sesim, vanilla = _sesim_and_vanilla(seed, "link", epochs=20)
            gains.append(
                history_summary(sesim.history)["auc_mean"] - history_summary(vanilla.history)["auc_mean"]
            )
        gains = np.array(gains)
        assert np.count_nonzero(gains >= 0) >= 7, gains
        assert gains.mean() > 0, gains

    def test_node_macro_f1_not_below_vanilla(self) -> None:
        gains = []
        for seed in self.SEEDS:
            sesim, vanilla = _sesim_and_vanilla(seed, "node", epochs=50)
            gains.append(
                np.mean([r.val_metric for r in sesim.history]) - np.mean([r.val_metric for r in vanilla.history])
            )
        gains = np.array(gains)
        assert np.count_nonzero(gains >= 0) >= 7, gains

