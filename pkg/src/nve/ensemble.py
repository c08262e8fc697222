"""Dual-stream ensemble: parallel member blocks per tissue stream.

A ``ModelBlock`` runs its members side by side and concatenates their
feature vectors in member order. The ``CoreArchitecture`` holds one block
for the gray-matter stream and one for the white-matter stream with
independent parameters, then classifies concat(gm, wm) through relu and a
single 2-logit linear head.

Class index 0 means the patient class, 1 the control class (see
``CLASS_NAMES``). ``predict`` breaks exact logit ties toward index 0.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .layers import Linear, Module
from .models import MicroModelSpec, build_micro_model
from .snapshot import load_weights, pack_weights, save_weights, unpack_weights

CLASS_NAMES = ("pd", "hc")

PRESET_MEMBERS = {
    1: ("densenet", "shufflenet", "squeezenet"),
    2: ("densenet", "shufflenet", "squeezenet", "mobilenet"),
    3: ("shufflenet", "vgg", "mobilenet"),
}


def _thread_count():
    raw = os.environ.get("NVE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _map_ordered(fn, items):
    """Apply fn to items, optionally on a thread pool, preserving order."""
    n = _thread_count()
    if n == 1 or len(items) == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(n, len(items))) as pool:
        return list(pool.map(fn, items))


class ModelBlock(Module):
    """Ordered member networks evaluated in parallel, features concatenated."""

    def __init__(self, members):
        super().__init__()
        if not members:
            raise ConfigError("a model block needs at least one member")
        self.members = list(members)

    @property
    def combined_dim(self):
        return sum(m.spec.feature_dim for m in self.members)

    def forward(self, x):
        return block_forward(self, x)


def block_forward(block, x):
    """Concat of member feature vectors, in member order."""

    def run(indexed):
        i, member = indexed
        try:
            return member.features(x)
        except ValueError as exc:
            raise ShapeError(
                f"member {i} ({member.spec.kind}) failed on input "
                f"{x.shape}: {exc}"
            ) from exc

    feats = _map_ordered(run, list(enumerate(block.members)))
    return feats[0] if len(feats) == 1 else ops.concat(feats, axis=1)


class CoreArchitecture(Module):
    """Two tissue-stream blocks and the final 2-class linear head."""

    def __init__(self, gm_block, wm_block, rng):
        super().__init__()
        self.gm_block = gm_block
        self.wm_block = wm_block
        self.head = Linear(gm_block.combined_dim + wm_block.combined_dim, 2, rng)

    def forward(self, gm, wm):
        return core_forward(self, gm, wm)


def core_forward(core, gm, wm):
    """logits = head(relu(concat(gm features, wm features)))."""
    streams = []
    for name, block, x in (("gm", core.gm_block, gm), ("wm", core.wm_block, wm)):
        try:
            streams.append(block_forward(block, x))
        except ValueError as exc:
            raise ShapeError(f"{name} stream: {exc}") from exc
    return core.head(ops.relu(ops.concat(streams, axis=1)))


def predict(core, gm, wm):
    """Class indices per sample; an exact tie resolves to index 0."""
    logits = core_forward(core, gm, wm).data
    return np.argmax(logits, axis=1)


def backbone_state(model):
    """Member state without any classifier head, the proxy snapshot payload."""
    return {k: v for k, v in model.named_state() if not k.startswith("head.")}


def proxy_snapshot_path(snapshot_dir, kind):
    return Path(snapshot_dir) / f"proxy_{kind}.nvw"


def build_preset(preset_id, pretrained, seed, in_channels=8, feature_dim=32,
                 width_scale=0.25, depth=(2, 2), snapshot_dir=None):
    """Instantiate a preset architecture, optionally from proxy snapshots.

    Each stream gets its own freshly seeded member parameters. With
    pretrained=True every member backbone is loaded from
    ``snapshot_dir/proxy_<kind>.nvw`` (both streams start from the same
    snapshot); the head is always fresh.
    """
    if preset_id not in PRESET_MEMBERS:
        raise ConfigError(
            f"unknown preset {preset_id}, expected one of "
            f"{sorted(PRESET_MEMBERS)}"
        )
    if pretrained and snapshot_dir is None:
        raise ConfigError("pretrained=True needs a snapshot_dir")

    kinds = PRESET_MEMBERS[preset_id]
    blocks = []
    for stream_idx in range(2):
        members = []
        for member_idx, kind in enumerate(kinds):
            member_seed = np.random.SeedSequence(
                [seed, stream_idx, member_idx]
            ).generate_state(1)[0]
            spec = MicroModelSpec(kind, in_channels=in_channels,
                                  width_scale=width_scale, depth=depth,
                                  feature_dim=feature_dim)
            member = build_micro_model(spec, member_seed)
            if pretrained:
                path = proxy_snapshot_path(snapshot_dir, kind)
                if not path.exists():
                    raise ConfigError(
                        f"no proxy snapshot for member kind '{kind}' "
                        f"(expected {path})"
                    )
                member.load_state(load_weights(path))
                member.pretrained_tag = path.name
            members.append(member)
        blocks.append(ModelBlock(members))

    head_seed = np.random.SeedSequence([seed, 2]).generate_state(1)[0]
    return CoreArchitecture(blocks[0], blocks[1],
                            np.random.default_rng(head_seed))


def save_core(path, core):
    save_weights(path, dict(core.named_state()))


def load_core(path, core):
    """Load a full-architecture snapshot strictly into an existing core."""
    core.load_state(load_weights(path))
    return core


def core_bytes(core):
    return pack_weights(dict(core.named_state()))


def load_core_bytes(blob, core):
    core.load_state(unpack_weights(blob))
    return core
