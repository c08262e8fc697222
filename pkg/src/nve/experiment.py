"""Experiment harness: configs, training loop, pretraining, result tables.

Seeds drive everything: the train/test split, the per-epoch validation
re-split, batch order, parameter init, and the grid's per-cell seeds all
derive from explicit integers, so any run is reproducible from its config
alone. Wall-clock time is recorded on results but kept out of emitted
tables, which therefore compare byte-for-byte across reruns.
"""

import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import ops
from .adam import Adam
from .data import (
    Dataset,
    LABEL_INDEX,
    ProxyDataset,
    SplitPlan,
    SyntheticTaskSpec,
    check_balance,
    epoch_validation_indices,
    generate_classification_task,
    load_dataset,
    split_train_test,
)
from .ensemble import (
    PRESET_MEMBERS,
    _map_ordered,
    backbone_state,
    build_preset,
    core_forward,
    predict,
    proxy_snapshot_path,
)
from .errors import ConfigError, DataError
from .models import MicroModelSpec, adapt_output_layer, build_micro_model
from .snapshot import save_weights
from .volume import clip_artifacts, gaussian_smooth, normalize_intensity, slice_to_input

GRID_LEARNING_RATES = (0.001, 0.0001)
SMOOTHING_FWHM_MM = 8.0


@dataclass(frozen=True)
class ExperimentConfig:
    architecture_id: int = 1
    pretrained: bool = False
    smoothed: bool = False
    learning_rate: float = 0.001
    epochs: int = 25
    batch_size: int = 8
    seed: int = 0
    slice_k: int = 8
    # dataset source: a saved dataset directory, or (when empty) the
    # synthetic task regenerated from the fields below
    dataset_dir: str = ""
    synthetic_seed: int = 0
    dims: tuple = (16, 20, 16)
    n_per_class: int = 30
    class_effect: tuple = (0.5, 0.8)
    noise_sigma: float = 0.02
    snapshot_dir: str = "snapshots"
    train_fraction: float = 0.8
    val_fraction: float = 0.2
    allow_imbalance: bool = False
    width_scale: float = 0.25
    feature_dim: int = 32

    def __post_init__(self):
        if self.architecture_id not in PRESET_MEMBERS:
            raise ConfigError(
                f"architecture_id must be one of {sorted(PRESET_MEMBERS)}, "
                f"got {self.architecture_id}"
            )
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate < 0:
            raise ConfigError(
                f"learning_rate must be >= 0, got {self.learning_rate}"
            )
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.slice_k < 1:
            raise ConfigError(f"slice_k must be >= 1, got {self.slice_k}")

    def task_spec(self):
        return SyntheticTaskSpec(
            dims=self.dims, n_per_class=self.n_per_class,
            class_effect=self.class_effect, noise_sigma=self.noise_sigma,
            slice_k=self.slice_k,
        )

    def summary(self):
        return (
            f"arch={self.architecture_id} pretrained={self.pretrained} "
            f"smoothed={self.smoothed} lr={self.learning_rate:g} "
            f"epochs={self.epochs} batch={self.batch_size} seed={self.seed}"
        )


_TUPLE_FIELDS = {"dims": int, "class_effect": float}
_BOOLS = {"true": True, "1": True, "yes": True,
          "false": False, "0": False, "no": False}


def parse_config_mapping(text):
    """Flat key=value lines; '#' starts a comment, blank lines ignored."""
    mapping = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in mapping:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        mapping[key] = value
    return mapping


def _coerce(name, kind, raw):
    if name in _TUPLE_FIELDS:
        element = _TUPLE_FIELDS[name]
        return tuple(element(part.strip()) for part in raw.split(","))
    if kind is bool:
        try:
            return _BOOLS[raw.lower()]
        except KeyError:
            raise ConfigError(f"'{name}' expects a boolean, got '{raw}'") from None
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(
            f"'{name}' expects {kind.__name__}, got '{raw}'"
        ) from None


def config_from_mapping(mapping) -> ExperimentConfig:
    known = {f.name: f.type for f in fields(ExperimentConfig)}
    types = {"architecture_id": int, "pretrained": bool, "smoothed": bool,
             "learning_rate": float, "epochs": int, "batch_size": int,
             "seed": int, "slice_k": int, "dataset_dir": str,
             "synthetic_seed": int, "dims": tuple, "n_per_class": int,
             "class_effect": tuple, "noise_sigma": float, "snapshot_dir": str,
             "train_fraction": float, "val_fraction": float,
             "allow_imbalance": bool, "width_scale": float, "feature_dim": int}
    values = {}
    for key, raw in mapping.items():
        if key not in known:
            raise ConfigError(f"unknown config key '{key}'")
        values[key] = _coerce(key, types[key], raw)
    return ExperimentConfig(**values)


def parse_config_file(path) -> ExperimentConfig:
    return config_from_mapping(parse_config_mapping(Path(path).read_text()))


def load_experiment_dataset(config: ExperimentConfig) -> Dataset:
    if config.dataset_dir:
        return load_dataset(config.dataset_dir)
    return generate_classification_task(config.task_spec(), config.synthetic_seed)


@dataclass(frozen=True)
class PreparedData:
    """Sliced model inputs for one dataset, in dataset order."""

    gm: np.ndarray  # (N, K, H, W) float32
    wm: np.ndarray
    labels: np.ndarray  # (N,) int64

    def __len__(self):
        return len(self.labels)

    def take(self, indices):
        idx = np.asarray(indices, dtype=np.intp)
        return PreparedData(self.gm[idx], self.wm[idx], self.labels[idx])


def prepare_inputs(dataset: Dataset, slice_k: int, smoothed: bool,
                   fwhm_mm: float = SMOOTHING_FWHM_MM) -> PreparedData:
    """normalize -> clip -> optional smoothing -> axial slice stack."""
    gm_list, wm_list, labels = [], [], []
    for gm, wm, label in dataset.samples:
        pair = []
        for volume in (gm, wm):
            v = clip_artifacts(normalize_intensity(volume))
            if smoothed:
                v = gaussian_smooth(v, fwhm_mm)
            pair.append(slice_to_input(v, slice_k).data[0])
        gm_list.append(pair[0])
        wm_list.append(pair[1])
        labels.append(LABEL_INDEX[label])
    return PreparedData(
        gm=np.stack(gm_list), wm=np.stack(wm_list),
        labels=np.asarray(labels, dtype=np.int64),
    )


@dataclass(frozen=True)
class ResultRecord:
    model: str
    use_smoothed_scan: bool
    pre_trained: bool
    learning_rate: float
    accuracy: float
    train_loss: tuple = ()
    val_loss: tuple = ()
    wall_seconds: float = field(default=0.0, compare=False)


def _batch_ranges(n, size):
    return [range(start, min(start + size, n)) for start in range(0, n, size)]


def _loss_on(core, prepared, indices):
    from .tensor import Tensor

    idx = np.asarray(indices)
    gm = Tensor(prepared.gm[idx])
    wm = Tensor(prepared.wm[idx])
    return ops.cross_entropy(core_forward(core, gm, wm), prepared.labels[idx])


def evaluate(core, prepared: PreparedData, batch_size: int = 32) -> float:
    """Fraction of correct predictions, computed in eval mode."""
    from .tensor import Tensor

    if len(prepared) == 0:
        raise DataError("cannot evaluate on an empty split")
    was_training = core.training
    core.eval()
    correct = 0
    for batch in _batch_ranges(len(prepared), batch_size):
        idx = np.asarray(batch)
        pred = predict(core, Tensor(prepared.gm[idx]), Tensor(prepared.wm[idx]))
        correct += int((pred == prepared.labels[idx]).sum())
    core.train(was_training)
    return correct / len(prepared)


def _mean_loss(core, prepared, indices, batch_size):
    total = 0.0
    for batch in _batch_ranges(len(indices), batch_size):
        idx = indices[np.asarray(batch)]
        loss = _loss_on(core, prepared, idx)
        total += loss.item() * len(idx)
    return total / len(indices)


def train(config: ExperimentConfig, dataset: Dataset):
    """Train one grid cell; returns (core, ResultRecord)."""
    started = time.perf_counter()
    report = check_balance(dataset)
    if report.flagged and not config.allow_imbalance:
        raise DataError(
            f"dataset is imbalanced (ratio {report.ratio:.2f}, counts "
            f"{report.counts}); set allow_imbalance to proceed"
        )
    plan = SplitPlan(seed=config.seed, train_fraction=config.train_fraction,
                     val_fraction_of_train=config.val_fraction)
    train_ds, test_ds = split_train_test(dataset, plan)
    if len(test_ds) == 0:
        raise ConfigError(f"test split is empty for {len(dataset)} samples")
    train_arrays = prepare_inputs(train_ds, config.slice_k, config.smoothed)
    test_arrays = prepare_inputs(test_ds, config.slice_k, config.smoothed)

    core = build_preset(
        config.architecture_id, config.pretrained, config.seed,
        in_channels=config.slice_k, feature_dim=config.feature_dim,
        width_scale=config.width_scale, snapshot_dir=config.snapshot_dir or None,
    )
    optimizer = Adam(core.named_parameters(), lr=config.learning_rate)

    train_history, val_history = [], []
    for epoch in range(config.epochs):
        fit_idx, val_idx = epoch_validation_indices(len(train_ds), plan, epoch)
        if len(val_idx) == 0:
            raise ConfigError(
                f"validation split is empty: {len(train_ds)} training samples "
                f"at fraction {config.val_fraction}"
            )
        order = np.random.default_rng(
            [config.seed, epoch, 1]).permutation(len(fit_idx))
        shuffled = fit_idx[order]
        core.train()
        running = 0.0
        for batch_no, batch in enumerate(
                _batch_ranges(len(shuffled), config.batch_size)):
            idx = shuffled[np.asarray(batch)]
            optimizer.zero_grad()
            loss = _loss_on(core, train_arrays, idx)
            value = loss.item()
            if not np.isfinite(value):
                raise RuntimeError(
                    f"non-finite training loss {value} at epoch {epoch} "
                    f"batch {batch_no}; config: {config.summary()}"
                )
            loss.backward()
            optimizer.step()
            running += value * len(idx)
        train_history.append(running / len(shuffled))
        core.eval()
        val_history.append(
            _mean_loss(core, train_arrays, val_idx, config.batch_size))
        core.train()

    accuracy = evaluate(core, test_arrays)
    record = ResultRecord(
        model=f"Architecture {config.architecture_id}",
        use_smoothed_scan=config.smoothed,
        pre_trained=config.pretrained,
        learning_rate=config.learning_rate,
        accuracy=accuracy,
        train_loss=tuple(train_history),
        val_loss=tuple(val_history),
        wall_seconds=time.perf_counter() - started,
    )
    return core, record


def train_proxy_member(kind, proxy: ProxyDataset, epochs, seed, lr=0.001,
                       batch_size=8, width_scale=0.25, feature_dim=32):
    """Fit one member backbone (plus temporary head) on the proxy task."""
    from .tensor import Tensor

    k = proxy.images.shape[1]
    spec = MicroModelSpec(kind, in_channels=k, width_scale=width_scale,
                          feature_dim=feature_dim)
    model = build_micro_model(spec, seed)
    adapt_output_layer(model, proxy.n_classes, seed=seed)
    optimizer = Adam(model.named_parameters(), lr=lr)
    n = len(proxy.labels)
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(n)
        for batch in _batch_ranges(n, batch_size):
            idx = order[np.asarray(batch)]
            optimizer.zero_grad()
            logits = model(Tensor(proxy.images[idx]))
            loss = ops.cross_entropy(logits, proxy.labels[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise RuntimeError(
                    f"non-finite proxy loss {value} pretraining '{kind}' at "
                    f"epoch {epoch} (lr={lr:g}, batch={batch_size}, seed={seed})"
                )
            loss.backward()
            optimizer.step()
    return model


def proxy_accuracy(model, images, labels, batch_size=64):
    from .tensor import Tensor

    model.eval()
    correct = 0
    for batch in _batch_ranges(len(labels), batch_size):
        idx = np.asarray(batch)
        logits = model(Tensor(images[idx])).data
        correct += int((np.argmax(logits, axis=1) == labels[idx]).sum())
    model.train()
    return correct / len(labels)


def pretrain_proxy(kinds, proxy: ProxyDataset, epochs, seed, snapshot_dir,
                   lr=0.001, batch_size=8, width_scale=0.25, feature_dim=32):
    """One trained backbone snapshot per kind; heads are not saved."""
    snapshot_dir = Path(snapshot_dir)
    snapshot_dir.mkdir(parents=True, exist_ok=True)
    store = {}
    for kind in sorted(set(kinds)):
        member_seed = int(np.random.SeedSequence(
            [seed, _kind_index(kind)]).generate_state(1)[0])
        model = train_proxy_member(
            kind, proxy, epochs, member_seed, lr=lr, batch_size=batch_size,
            width_scale=width_scale, feature_dim=feature_dim,
        )
        path = proxy_snapshot_path(snapshot_dir, kind)
        save_weights(path, backbone_state(model))
        store[kind] = path
    return store


def _kind_index(kind):
    from .models import KINDS

    try:
        return KINDS.index(kind)
    except ValueError:
        raise ConfigError(
            f"unknown model kind '{kind}', expected one of {KINDS}"
        ) from None


def grid_cells():
    """Table cell order: smoothed, then pretrained, then learning rate."""
    return [
        (smoothed, pretrained, lr)
        for smoothed in (False, True)
        for pretrained in (False, True)
        for lr in GRID_LEARNING_RATES
    ]


def cell_seed(master_seed, architecture_id, cell_index):
    return int(np.random.SeedSequence(
        [master_seed, architecture_id, cell_index]).generate_state(1)[0])


def run_grid(architecture_ids, dataset: Dataset, master_seed: int,
             config: ExperimentConfig):
    """All grid cells for the given architectures, in table order."""
    jobs = []
    for arch in architecture_ids:
        for idx, (smoothed, pretrained, lr) in enumerate(grid_cells()):
            jobs.append(replace(
                config, architecture_id=arch, smoothed=smoothed,
                pretrained=pretrained, learning_rate=lr,
                seed=cell_seed(master_seed, arch, idx),
            ))
    return _map_ordered(lambda cfg: train(cfg, dataset)[1], jobs)


CSV_COLUMNS = ("model", "use_smoothed_scan", "pre_trained", "learning_rate",
               "classification_accuracy")


def _record_cells(record):
    if not record.model:
        raise ConfigError("record has an empty model name")
    return (record.model, str(record.use_smoothed_scan),
            str(record.pre_trained), f"{record.learning_rate:g}",
            f"{record.accuracy:.4f}")


def emit_table(records, format: str = "csv") -> str:
    if not records:
        raise ConfigError("no records to emit")
    rows = [_record_cells(r) for r in records]
    if format == "csv":
        lines = [",".join(CSV_COLUMNS)] + [",".join(row) for row in rows]
        return "\n".join(lines) + "\n"
    if format in ("markdown", "md"):
        lines = ["| " + " | ".join(CSV_COLUMNS) + " |",
                 "|" + "|".join([" --- "] * len(CSV_COLUMNS)) + "|"]
        lines += ["| " + " | ".join(row) + " |" for row in rows]
        return "\n".join(lines) + "\n"
    raise ConfigError(f"unknown table format '{format}'")


def records_from_csv(text) -> list:
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines or lines[0] != ",".join(CSV_COLUMNS):
        raise ConfigError(
            f"bad results header, expected '{','.join(CSV_COLUMNS)}'"
        )
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != len(CSV_COLUMNS):
            raise ConfigError(
                f"line {lineno}: expected {len(CSV_COLUMNS)} fields, got "
                f"{len(parts)}"
            )
        model, smoothed, pretrained, lr, acc = parts
        try:
            records.append(ResultRecord(
                model=model, use_smoothed_scan=_BOOLS[smoothed.lower()],
                pre_trained=_BOOLS[pretrained.lower()],
                learning_rate=float(lr), accuracy=float(acc),
            ))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"line {lineno}: bad field ({exc})") from None
    return records


def transfer_comparison(preset_ids, master_seeds, config: ExperimentConfig,
                        work_dir, pretrain_epochs=10, proxy_n_per_class=24):
    """Mean pretrained vs untrained accuracy per preset over master seeds.

    Each master seed gets its own synthetic dataset and its own proxy
    snapshot store, so the comparison averages over data draws and inits.
    """
    work_dir = Path(work_dir)
    kinds = sorted({k for pid in preset_ids for k in PRESET_MEMBERS[pid]})
    sums = {pid: {"pretrained": 0.0, "untrained": 0.0} for pid in preset_ids}
    for master in master_seeds:
        dataset = generate_classification_task(config.task_spec(), master)
        snapshot_dir = work_dir / f"seed-{master}"
        proxy_spec = replace(config, n_per_class=proxy_n_per_class).task_spec()
        from .data import generate_proxy_pretraining_task

        proxy = generate_proxy_pretraining_task(proxy_spec, master)
        pretrain_proxy(kinds, proxy, pretrain_epochs, master, snapshot_dir,
                       width_scale=config.width_scale,
                       feature_dim=config.feature_dim)
        for pid in preset_ids:
            for pretrained in (True, False):
                cfg = replace(config, architecture_id=pid,
                              pretrained=pretrained, seed=master,
                              snapshot_dir=str(snapshot_dir))
                _, record = train(cfg, dataset)
                key = "pretrained" if pretrained else "untrained"
                sums[pid][key] += record.accuracy
    n = len(master_seeds)
    return {
        pid: {
            "pretrained": sums[pid]["pretrained"] / n,
            "untrained": sums[pid]["untrained"] / n,
            "gap": (sums[pid]["pretrained"] - sums[pid]["untrained"]) / n,
        }
        for pid in preset_ids
    }
