"""Experiment harness tests: config parsing, training, grids, tables."""

import dataclasses

import numpy as np
import pytest

from nve.data import (
    SyntheticTaskSpec,
    generate_classification_task,
    generate_proxy_pretraining_task,
)
from nve.ensemble import build_preset, predict, proxy_snapshot_path
from nve.errors import ConfigError, DataError
from nve.experiment import (
    CSV_COLUMNS,
    ExperimentConfig,
    PreparedData,
    ResultRecord,
    cell_seed,
    config_from_mapping,
    emit_table,
    evaluate,
    grid_cells,
    load_experiment_dataset,
    parse_config_file,
    parse_config_mapping,
    prepare_inputs,
    pretrain_proxy,
    proxy_accuracy,
    records_from_csv,
    run_grid,
    train,
    train_proxy_member,
    transfer_comparison,
)
from nve.snapshot import load_weights
from nve.tensor import Tensor
from nve.volume import clip_artifacts, normalize_intensity, slice_to_input

TINY = dict(dims=(10, 12, 10), slice_k=4, width_scale=0.12, feature_dim=8,
            n_per_class=6, epochs=1)


def tiny_config(**overrides):
    return ExperimentConfig(**{**TINY, **overrides})


@pytest.fixture(scope="module")
def tiny_dataset():
    return load_experiment_dataset(tiny_config())


class TestConfig:
    def test_defaults_are_valid(self):
        cfg = ExperimentConfig()
        assert cfg.architecture_id == 1
        assert cfg.learning_rate == 0.001
        assert cfg.epochs == 25
        assert cfg.batch_size == 8

    def test_zero_learning_rate_allowed(self):
        assert ExperimentConfig(learning_rate=0.0).learning_rate == 0.0

    @pytest.mark.parametrize("bad", [
        dict(architecture_id=4),
        dict(architecture_id=0),
        dict(epochs=0),
        dict(learning_rate=-0.1),
        dict(batch_size=0),
        dict(slice_k=0),
    ])
    def test_invalid_fields_rejected(self, bad):
        with pytest.raises(ConfigError):
            ExperimentConfig(**bad)

    def test_summary_names_the_cell(self):
        text = ExperimentConfig(architecture_id=3, seed=9).summary()
        assert "arch=3" in text and "seed=9" in text

    def test_mapping_parser_skips_comments_and_blanks(self):
        mapping = parse_config_mapping(
            "# header\n\nepochs = 3  # trailing\nseed=5\n")
        assert mapping == {"epochs": "3", "seed": "5"}

    def test_mapping_parser_rejects_bad_line(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_config_mapping("a = 1\nnot a pair\n")

    def test_mapping_parser_rejects_duplicate_key(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config_mapping("a = 1\na = 2\n")

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key 'foo'"):
            config_from_mapping({"foo": "1"})

    def test_coercions(self):
        cfg = config_from_mapping({
            "epochs": "7", "learning_rate": "0.01", "pretrained": "true",
            "smoothed": "No", "dims": "8, 10, 8", "class_effect": "0.4,0.6",
            "dataset_dir": "/tmp/x", "allow_imbalance": "1",
        })
        assert cfg.epochs == 7
        assert cfg.learning_rate == 0.01
        assert cfg.pretrained is True
        assert cfg.smoothed is False
        assert cfg.dims == (8, 10, 8)
        assert cfg.class_effect == (0.4, 0.6)
        assert cfg.dataset_dir == "/tmp/x"
        assert cfg.allow_imbalance is True

    @pytest.mark.parametrize("key,raw", [
        ("epochs", "three"), ("pretrained", "maybe"), ("learning_rate", "x"),
    ])
    def test_bad_values_name_the_key(self, key, raw):
        with pytest.raises(ConfigError, match=key):
            config_from_mapping({key: raw})

    def test_config_file_round_trip(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("architecture_id = 2\nepochs = 4\nsmoothed = true\n")
        cfg = parse_config_file(path)
        assert cfg == ExperimentConfig(architecture_id=2, epochs=4,
                                       smoothed=True)

    def test_task_spec_reflects_fields(self):
        spec = tiny_config(noise_sigma=0.5).task_spec()
        assert spec == SyntheticTaskSpec(
            dims=TINY["dims"], n_per_class=TINY["n_per_class"],
            class_effect=(0.5, 0.8), noise_sigma=0.5, slice_k=TINY["slice_k"])


class TestPrepareInputs:
    def test_shapes_and_labels(self, tiny_dataset):
        cfg = tiny_config()
        prepared = prepare_inputs(tiny_dataset, cfg.slice_k, smoothed=False)
        x, y, _ = cfg.dims
        assert prepared.gm.shape == (12, cfg.slice_k, y, x)
        assert prepared.wm.shape == prepared.gm.shape
        expected = [0 if label == "pd" else 1
                    for _, _, label in tiny_dataset.samples]
        assert prepared.labels.tolist() == expected

    def test_matches_manual_pipeline(self, tiny_dataset):
        prepared = prepare_inputs(tiny_dataset, 4, smoothed=False)
        gm = tiny_dataset.samples[3][0]
        manual = slice_to_input(clip_artifacts(normalize_intensity(gm)), 4)
        np.testing.assert_array_equal(prepared.gm[3], manual.data[0])

    def test_smoothing_changes_inputs_and_stays_in_range(self, tiny_dataset):
        plain = prepare_inputs(tiny_dataset, 4, smoothed=False)
        smooth = prepare_inputs(tiny_dataset, 4, smoothed=True)
        assert not np.array_equal(plain.gm, smooth.gm)
        assert smooth.gm.min() >= 0.0 and smooth.gm.max() <= 1.0

    def test_take_selects_rows(self, tiny_dataset):
        prepared = prepare_inputs(tiny_dataset, 4, smoothed=False)
        part = prepared.take([2, 0])
        np.testing.assert_array_equal(part.gm[0], prepared.gm[2])
        np.testing.assert_array_equal(part.labels, prepared.labels[[2, 0]])


class TestEvaluate:
    def test_matches_manual_prediction_loop(self, tiny_dataset):
        cfg = tiny_config(seed=5)
        prepared = prepare_inputs(tiny_dataset, cfg.slice_k, smoothed=False)
        core = build_preset(1, False, 5, in_channels=4, feature_dim=8,
                            width_scale=0.12)
        core.eval()
        pred = predict(core, Tensor(prepared.gm), Tensor(prepared.wm))
        manual = float((pred == prepared.labels).mean())
        assert evaluate(core, prepared) == pytest.approx(manual)

    def test_complement_labels_flip_accuracy(self, tiny_dataset):
        prepared = prepare_inputs(tiny_dataset, 4, smoothed=False)
        core = build_preset(1, False, 5, in_channels=4, feature_dim=8,
                            width_scale=0.12)
        acc = evaluate(core, prepared)
        flipped = PreparedData(prepared.gm, prepared.wm, 1 - prepared.labels)
        assert evaluate(core, flipped) == pytest.approx(1.0 - acc)

    def test_empty_split_rejected(self, tiny_dataset):
        prepared = prepare_inputs(tiny_dataset, 4, smoothed=False)
        core = build_preset(1, False, 0, in_channels=4, feature_dim=8,
                            width_scale=0.12)
        with pytest.raises(DataError, match="empty"):
            evaluate(core, prepared.take([]))

    def test_restores_training_mode(self, tiny_dataset):
        prepared = prepare_inputs(tiny_dataset, 4, smoothed=False)
        core = build_preset(1, False, 0, in_channels=4, feature_dim=8,
                            width_scale=0.12)
        core.train()
        evaluate(core, prepared)
        assert core.training
        core.eval()
        evaluate(core, prepared)
        assert not core.training


class TestTrain:
    def test_zero_lr_leaves_parameters_at_init(self, tiny_dataset):
        cfg = tiny_config(learning_rate=0.0, seed=11)
        core, record = train(cfg, tiny_dataset)
        fresh = dict(build_preset(1, False, 11, in_channels=4, feature_dim=8,
                                  width_scale=0.12).named_parameters())
        for name, param in core.named_parameters():
            np.testing.assert_array_equal(param.data, fresh[name].data,
                                          err_msg=name)

    def test_record_is_deterministic_except_wall_time(self, tiny_dataset):
        cfg = tiny_config(seed=4, epochs=2)
        _, first = train(cfg, tiny_dataset)
        _, second = train(cfg, tiny_dataset)
        assert first == second
        assert first.wall_seconds > 0.0

    def test_histories_cover_every_epoch(self, tiny_dataset):
        cfg = tiny_config(epochs=3)
        _, record = train(cfg, tiny_dataset)
        assert len(record.train_loss) == 3
        assert len(record.val_loss) == 3
        assert all(v >= 0.0 for v in record.train_loss + record.val_loss)
        assert 0.0 <= record.accuracy <= 1.0

    def test_record_carries_the_cell_description(self, tiny_dataset):
        cfg = tiny_config(architecture_id=3, smoothed=True,
                          learning_rate=0.0001)
        _, record = train(cfg, tiny_dataset)
        assert record.model == "Architecture 3"
        assert record.use_smoothed_scan is True
        assert record.pre_trained is False
        assert record.learning_rate == 0.0001

    def test_training_moves_parameters(self, tiny_dataset):
        core, _ = train(tiny_config(seed=11), tiny_dataset)
        fresh = dict(build_preset(1, False, 11, in_channels=4, feature_dim=8,
                                  width_scale=0.12).named_parameters())
        moved = any(not np.array_equal(p.data, fresh[n].data)
                    for n, p in core.named_parameters())
        assert moved

    def test_imbalanced_dataset_gated(self, tiny_dataset):
        lopsided = tiny_dataset.subset([0, 1, 2, 3, 4, 5, 6], "lopsided")
        with pytest.raises(DataError, match="imbalanced"):
            train(tiny_config(), lopsided)
        _, record = train(tiny_config(allow_imbalance=True), lopsided)
        assert 0.0 <= record.accuracy <= 1.0

    def test_tiny_validation_cut_rejected(self):
        cfg = tiny_config(n_per_class=3)  # train split of 4 -> empty val cut
        with pytest.raises(ConfigError, match="validation split is empty"):
            train(cfg, load_experiment_dataset(cfg))

    def test_diverging_run_reports_the_cell(self, tiny_dataset):
        cfg = tiny_config(learning_rate=1e8, epochs=4, seed=0)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(RuntimeError, match="non-finite training loss"):
                train(cfg, tiny_dataset)

    def test_learns_a_strong_effect(self):
        cfg = tiny_config(n_per_class=12, noise_sigma=0.0,
                          class_effect=(0.8, 0.95), epochs=12,
                          learning_rate=0.003, seed=1)
        _, record = train(cfg, load_experiment_dataset(cfg))
        assert record.accuracy >= 0.8
        assert record.train_loss[-1] < record.train_loss[0]


@pytest.fixture(scope="module")
def proxy():
    spec = SyntheticTaskSpec(dims=(10, 12, 10), n_per_class=12,
                             slice_k=4, n_proxy_classes=4)
    return generate_proxy_pretraining_task(spec, 0)


@pytest.fixture(scope="module")
def grid_records(proxy, tmp_path_factory):
    snapshot_dir = tmp_path_factory.mktemp("snaps")
    cfg = tiny_config(snapshot_dir=str(snapshot_dir))
    pretrain_proxy(
        ["densenet", "shufflenet", "squeezenet", "vgg", "mobilenet"],
        proxy, epochs=1, seed=0, snapshot_dir=snapshot_dir,
        width_scale=0.12, feature_dim=8)
    dataset = load_experiment_dataset(cfg)
    return cfg, dataset, run_grid([1], dataset, 7, cfg)


class TestProxyPretraining:
    def test_member_beats_chance_after_a_few_epochs(self, proxy):
        model = train_proxy_member("densenet", proxy, epochs=5, seed=0,
                                   width_scale=0.12, feature_dim=8)
        acc = proxy_accuracy(model, proxy.images, proxy.labels)
        assert acc >= 0.45  # chance is 0.25 for four classes

    def test_snapshots_written_per_kind(self, proxy, tmp_path):
        store = pretrain_proxy(["densenet", "squeezenet"], proxy, epochs=1,
                               seed=0, snapshot_dir=tmp_path,
                               width_scale=0.12, feature_dim=8)
        assert set(store) == {"densenet", "squeezenet"}
        for kind, path in store.items():
            assert path == proxy_snapshot_path(tmp_path, kind)
            assert path.exists()

    def test_snapshot_excludes_the_proxy_head(self, proxy, tmp_path):
        store = pretrain_proxy(["vgg"], proxy, epochs=1, seed=0,
                               snapshot_dir=tmp_path, width_scale=0.12,
                               feature_dim=8)
        names = set(load_weights(store["vgg"]))
        assert names
        assert not any(name.startswith("head.") for name in names)

    def test_pretraining_is_deterministic(self, proxy, tmp_path):
        a = pretrain_proxy(["shufflenet"], proxy, epochs=1, seed=3,
                           snapshot_dir=tmp_path / "a", width_scale=0.12,
                           feature_dim=8)
        b = pretrain_proxy(["shufflenet"], proxy, epochs=1, seed=3,
                           snapshot_dir=tmp_path / "b", width_scale=0.12,
                           feature_dim=8)
        assert a["shufflenet"].read_bytes() == b["shufflenet"].read_bytes()

    def test_snapshots_feed_pretrained_presets(self, proxy, tmp_path):
        kinds = ["densenet", "shufflenet", "squeezenet"]
        store = pretrain_proxy(kinds, proxy, epochs=1, seed=0,
                               snapshot_dir=tmp_path, width_scale=0.12,
                               feature_dim=8)
        core = build_preset(1, True, 0, in_channels=4, feature_dim=8,
                            width_scale=0.12, snapshot_dir=tmp_path)
        member = core.gm_block.members[0]
        saved = load_weights(store[member.spec.kind])
        state = dict(member.named_state())
        for name, value in saved.items():
            np.testing.assert_array_equal(state[name], value, err_msg=name)

    def test_unknown_kind_rejected(self, proxy, tmp_path):
        with pytest.raises(ConfigError, match="unknown model kind"):
            pretrain_proxy(["alexnet"], proxy, epochs=1, seed=0,
                           snapshot_dir=tmp_path)

    def test_pretrained_training_differs_from_fresh(self, proxy, tmp_path,
                                                    tiny_dataset):
        kinds = ["densenet", "shufflenet", "squeezenet"]
        pretrain_proxy(kinds, proxy, epochs=2, seed=0, snapshot_dir=tmp_path,
                       width_scale=0.12, feature_dim=8)
        cfg = tiny_config(seed=2, epochs=2)
        _, fresh = train(cfg, tiny_dataset)
        warm_cfg = dataclasses.replace(cfg, pretrained=True,
                                       snapshot_dir=str(tmp_path))
        _, warm = train(warm_cfg, tiny_dataset)
        assert warm.pre_trained is True
        assert warm.train_loss != fresh.train_loss


class TestGrid:
    def test_cell_order(self):
        cells = grid_cells()
        assert len(cells) == 8
        assert cells[0] == (False, False, 0.001)
        assert cells[1] == (False, False, 0.0001)
        assert cells[2] == (False, True, 0.001)
        assert cells[4] == (True, False, 0.001)
        assert cells[-1] == (True, True, 0.0001)

    def test_cell_seeds_are_distinct(self):
        seeds = {cell_seed(7, arch, idx)
                 for arch in (1, 2, 3) for idx in range(8)}
        assert len(seeds) == 24
        assert cell_seed(0, 1, 0) != cell_seed(1, 1, 0)

    def test_one_record_per_cell_in_order(self, grid_records):
        _, _, records = grid_records
        assert len(records) == 8
        seen = [(r.use_smoothed_scan, r.pre_trained, r.learning_rate)
                for r in records]
        assert seen == grid_cells()
        assert all(r.model == "Architecture 1" for r in records)

    def test_rerun_reproduces_every_record(self, grid_records):
        cfg, dataset, records = grid_records
        again = run_grid([1], dataset, 7, cfg)
        assert again == records

    def test_multiple_architectures_stack(self, grid_records):
        cfg, dataset, _ = grid_records
        records = run_grid([3, 1], dataset, 7, cfg)
        assert len(records) == 16
        assert {r.model for r in records[:8]} == {"Architecture 3"}
        assert {r.model for r in records[8:]} == {"Architecture 1"}


class TestTables:
    def golden_records(self):
        return [
            ResultRecord("Architecture 2", False, True, 0.001, 0.9515),
            ResultRecord("Architecture 2", True, False, 0.0001, 1 / 3),
        ]

    def test_csv_layout_and_rounding(self):
        text = emit_table(self.golden_records(), "csv")
        lines = text.splitlines()
        assert lines[0] == ",".join(CSV_COLUMNS)
        assert lines[1] == "Architecture 2,False,True,0.001,0.9515"
        assert lines[2] == "Architecture 2,True,False,0.0001,0.3333"
        assert text.endswith("\n")

    def test_markdown_carries_the_same_cells(self):
        text = emit_table(self.golden_records(), "markdown")
        assert "| Architecture 2 | False | True | 0.001 | 0.9515 |" in text
        assert text.splitlines()[1].startswith("|")

    def test_md_alias(self):
        records = self.golden_records()
        assert emit_table(records, "md") == emit_table(records, "markdown")

    def test_csv_round_trips_through_the_parser(self):
        text = emit_table(self.golden_records(), "csv")
        parsed = records_from_csv(text)
        assert emit_table(parsed, "csv") == text
        assert parsed[0].pre_trained is True
        assert parsed[0].accuracy == pytest.approx(0.9515)

    def test_bad_inputs_rejected(self):
        with pytest.raises(ConfigError, match="no records"):
            emit_table([], "csv")
        with pytest.raises(ConfigError, match="model name"):
            emit_table([ResultRecord("", False, False, 0.1, 0.5)], "csv")
        with pytest.raises(ConfigError, match="format"):
            emit_table(self.golden_records(), "latex")
        with pytest.raises(ConfigError, match="header"):
            records_from_csv("nope\n")
        good = emit_table(self.golden_records(), "csv")
        with pytest.raises(ConfigError, match="line 2"):
            records_from_csv(good.splitlines()[0] + "\na,b\n")


class TestTransferComparison:
    def test_reports_means_and_gap(self, tmp_path):
        cfg = tiny_config(n_per_class=8, epochs=1)
        out = transfer_comparison([1], [0], cfg, tmp_path,
                                  pretrain_epochs=1, proxy_n_per_class=8)
        stats = out[1]
        assert set(stats) == {"pretrained", "untrained", "gap"}
        assert stats["gap"] == pytest.approx(
            stats["pretrained"] - stats["untrained"])
        assert (tmp_path / "seed-0" / "proxy_densenet.nvw").exists()
