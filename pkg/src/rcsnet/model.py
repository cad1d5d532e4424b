"""Full detector graph: backbone with 32x downsampling, PANet-style neck,
two anchor heads; plus config parsing, weight serialization and whole-model
reparameterization.

The layer graph is a flat ordered list of named nodes, each reading earlier
nodes' outputs, with exactly two sinks (the heads). One structural walk,
driven by an array "source", builds the graph for three callers: fresh
seeded initialization, weight-file loading, and rebuilding after fusion.
The source records every array it hands out in request order, which is the
serialization manifest -- so save, load and fuse can never drift apart.
"""

import io
import json
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .analysis import AnchorSet
from .blocks import OSAModule, RCSUnit, rcs_osa_forward, downsample_forward
from .errors import (
    ConfigError,
    ManifestMismatchError,
    ShapeError,
    StateError,
    TruncatedWeightsError,
    WeightFileError,
    WeightMagicError,
    WeightVersionError,
)
from .reparam import (
    DEPLOYED,
    TRAIN,
    RepVGGBlock,
    block_forward,
    fuse_block,
    fuse_conv_bn,
)
from .tensor_ops import (
    BNParams,
    ConvParams,
    activation,
    batchnorm_infer,
    check_tensor,
    concat_channels,
    conv2d,
    conv_out_dim,
    maxpool2d,
    upsample_nearest,
)

MAGIC = b"RCSW"
FORMAT_VERSION = 1

PAPER_ANCHORS = ((87.0, 90.0), (127.0, 139.0), (154.0, 171.0), (191.0, 240.0))


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    """Static description of a detector: channel plan, depths, anchors."""

    stage_channels: tuple[int, ...]
    osa_depths: tuple[int, ...]
    num_classes: int
    anchors: AnchorSet
    input_size: int = 640
    head_strides: tuple[int, int] = (16, 32)

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "osa_depths", tuple(int(n) for n in self.osa_depths))
        object.__setattr__(self, "head_strides", tuple(int(s) for s in self.head_strides))
        if self.input_size < 32 or self.input_size % 32 != 0:
            raise ConfigError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if len(self.stage_channels) != 5:
            raise ConfigError(f"stage_channels needs 5 entries, got {len(self.stage_channels)}")
        if any(c < 2 or c % 2 != 0 for c in self.stage_channels):
            raise ConfigError(f"stage_channels must be even and >= 2, got {self.stage_channels}")
        if len(self.osa_depths) != 4:
            raise ConfigError(f"osa_depths needs 4 entries, got {len(self.osa_depths)}")
        if any(n < 1 for n in self.osa_depths):
            raise ConfigError(f"osa_depths must be >= 1, got {self.osa_depths}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.head_strides != (16, 32):
            raise ConfigError(f"head_strides must be (16, 32), got {self.head_strides}")
        if len(self.anchors.pairs) != 4:
            raise ConfigError(f"need exactly 4 anchors, got {len(self.anchors.pairs)}")

    @property
    def anchors_per_head(self) -> int:
        return 2

    @property
    def head_channels(self) -> int:
        """Prediction channels per head: anchors * (5 + num_classes)."""
        return self.anchors_per_head * (5 + self.num_classes)

    def head_anchors(self, head_index: int) -> tuple[tuple[float, float], ...]:
        """Two anchors per head, smaller pair to the finer stride."""
        return self.anchors.pairs[2 * head_index: 2 * head_index + 2]


def nano_config() -> ModelConfig:
    """Reference desk-scale configuration used throughout the test suite."""
    return ModelConfig(
        stage_channels=(16, 32, 64, 128, 256),
        osa_depths=(1, 1, 2, 2),
        num_classes=1,
        anchors=AnchorSet(PAPER_ANCHORS),
    )


_CONFIG_KEYS = (
    "version", "input_size", "num_classes", "stage_channels",
    "osa_depths", "head_strides", "anchors",
)


def parse_config(text: str) -> ModelConfig:
    """Parse the key/value config format (see format_config)."""
    fields: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ConfigError(f"line {lineno}: expected 'key: value', got {raw!r}")
        key, value = (part.strip() for part in line.split(":", 1))
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in fields:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        fields[key] = value
    missing = [k for k in _CONFIG_KEYS if k not in fields]
    if missing:
        raise ConfigError(f"missing config keys: {', '.join(missing)}")

    def ints(key):
        try:
            return tuple(int(tok) for tok in fields[key].split())
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None

    if ints("version") != (1,):
        raise ConfigError(f"unsupported config version {fields['version']!r}")
    pairs = []
    for tok in fields["anchors"].split():
        if "x" not in tok:
            raise ConfigError(f"anchors: expected WxH pairs, got {tok!r}")
        w, h = tok.split("x", 1)
        try:
            pairs.append((float(w), float(h)))
        except ValueError:
            raise ConfigError(f"anchors: bad pair {tok!r}") from None
    return ModelConfig(
        stage_channels=ints("stage_channels"),
        osa_depths=ints("osa_depths"),
        num_classes=ints("num_classes")[0],
        anchors=AnchorSet(tuple(pairs)),
        input_size=ints("input_size")[0],
        head_strides=ints("head_strides"),
    )


def format_config(cfg: ModelConfig) -> str:
    anchor_txt = " ".join(f"{w:g}x{h:g}" for w, h in cfg.anchors.pairs)
    return (
        "# rcsnet model config\n"
        "version: 1\n"
        f"input_size: {cfg.input_size}\n"
        f"num_classes: {cfg.num_classes}\n"
        f"stage_channels: {' '.join(map(str, cfg.stage_channels))}\n"
        f"osa_depths: {' '.join(map(str, cfg.osa_depths))}\n"
        f"head_strides: {' '.join(map(str, cfg.head_strides))}\n"
        f"anchors: {anchor_txt}\n"
    )


def load_config(path) -> ModelConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def save_config(cfg: ModelConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_config(cfg))


# ---------------------------------------------------------------------------
# Array sources: every parameter array flows through one of these
# ---------------------------------------------------------------------------

class _InitSource:
    """Seeded random initialization; records arrays in request order."""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.recorded: list[tuple[str, np.ndarray]] = []

    def get(self, name, shape, kind, fan_in=None):
        rng = self.rng
        if kind in ("kernel", "bias"):
            bound = 1.0 / np.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, shape)
        elif kind == "gamma":
            # fan-in-scaled weights attenuate activations ~1/sqrt(3) per conv;
            # this gamma range restores per-block gain ~1 so the random-init
            # network stays input-sensitive through 32x of depth
            arr = rng.uniform(1.35, 2.35, shape)
        elif kind in ("beta", "mean"):
            arr = rng.uniform(-0.5, 0.5, shape)
        elif kind == "var":
            arr = rng.uniform(0.25, 2.0, shape)
        elif kind == "ia":
            arr = rng.uniform(-0.1, 0.1, shape)
        elif kind == "im":
            arr = rng.uniform(0.9, 1.1, shape)
        else:
            raise ValueError(f"unknown init kind {kind!r}")
        arr = arr.astype(np.float32)
        self.recorded.append((name, arr))
        return arr


class _DictSource:
    """Arrays from a prebuilt mapping (weight file or fusion output)."""

    def __init__(self, arrays: dict[str, np.ndarray]):
        self.arrays = arrays
        self.recorded: list[tuple[str, np.ndarray]] = []
        self._used: set[str] = set()

    def get(self, name, shape, kind, fan_in=None):
        if name not in self.arrays:
            raise ManifestMismatchError(f"model structure expects array {name!r}, not present")
        arr = self.arrays[name]
        if arr.shape != tuple(shape):
            raise ManifestMismatchError(
                f"array {name!r} has shape {arr.shape}, structure expects {tuple(shape)}"
            )
        self._used.add(name)
        self.recorded.append((name, arr))
        return arr

    def check_consumed(self):
        extra = [k for k in self.arrays if k not in self._used]
        if extra:
            raise ManifestMismatchError(f"unexpected arrays in file: {', '.join(sorted(extra))}")


# ---------------------------------------------------------------------------
# Graph nodes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvBNNode:
    conv: ConvParams
    bn: Optional[BNParams]


@dataclass(frozen=True)
class RepNode:
    block: RepVGGBlock


@dataclass(frozen=True)
class OSANode:
    module: OSAModule


@dataclass(frozen=True)
class PoolNode:
    k: int
    stride: int


@dataclass(frozen=True)
class UpsampleNode:
    factor: int


@dataclass(frozen=True)
class ConcatNode:
    pass


@dataclass(frozen=True)
class HeadNode:
    """RepVGG block + 1x1 prediction conv with implicit per-channel
    add (pre-conv) and multiply (post-conv) vectors; the vectors fold into
    the prediction conv at reparameterization time."""

    rep: RepVGGBlock
    pred: ConvParams
    implicit_add: Optional[np.ndarray]
    implicit_mul: Optional[np.ndarray]


@dataclass(frozen=True)
class GraphEntry:
    name: str
    node: object
    inputs: tuple[str, ...]


# -- builders (names requested here define the serialization manifest) -----

def _src_conv(src, name, ci, co, k, stride, padding) -> ConvParams:
    fan_in = ci * k * k
    kernel = src.get(f"{name}.kernel", (co, ci, k, k), "kernel", fan_in)
    bias = src.get(f"{name}.bias", (co,), "bias", fan_in)
    return ConvParams(kernel, bias, stride=stride, padding=padding)


def _src_bn(src, name, c) -> BNParams:
    return BNParams(
        gamma=src.get(f"{name}.gamma", (c,), "gamma"),
        beta=src.get(f"{name}.beta", (c,), "beta"),
        mean=src.get(f"{name}.mean", (c,), "mean"),
        var=src.get(f"{name}.var", (c,), "var"),
    )


def _src_convbn(src, name, ci, co, k, stride, padding, mode) -> ConvBNNode:
    conv = _src_conv(src, f"{name}.conv", ci, co, k, stride, padding)
    bn = _src_bn(src, f"{name}.bn", co) if mode == TRAIN else None
    return ConvBNNode(conv, bn)


def _src_rep(src, name, ci, co, stride, mode) -> RepVGGBlock:
    if mode == DEPLOYED:
        fused = _src_conv(src, f"{name}.fused", ci, co, 3, stride, 1)
        return RepVGGBlock(None, None, None, stride=stride, mode=DEPLOYED, fused=fused)
    conv3 = _src_conv(src, f"{name}.k3", ci, co, 3, stride, 1)
    bn3 = _src_bn(src, f"{name}.bn3", co)
    conv1 = _src_conv(src, f"{name}.k1", ci, co, 1, stride, 0)
    bn1 = _src_bn(src, f"{name}.bn1", co)
    bn_id = _src_bn(src, f"{name}.bnid", co) if (ci == co and stride == 1) else None
    return RepVGGBlock((conv3, bn3), (conv1, bn1), bn_id, stride=stride)


def _src_osa(src, name, c, n, mode) -> OSAModule:
    units = tuple(
        RCSUnit(_src_rep(src, f"{name}.u{i + 1}", c // 2, c // 2, 1, mode))
        for i in range(n)
    )
    aggregate = _src_conv(src, f"{name}.agg", 3 * c, c, 1, 1, 0)
    return OSAModule(units, aggregate)


def _src_head(src, name, ci, co, mode) -> HeadNode:
    rep = _src_rep(src, f"{name}.rep", ci, ci, 1, mode)
    pred = _src_conv(src, f"{name}.pred", ci, co, 1, 1, 0)
    if mode == TRAIN:
        ia = src.get(f"{name}.ia", (ci,), "ia")
        im = src.get(f"{name}.im", (co,), "im")
    else:
        ia = im = None
    return HeadNode(rep, pred, ia, im)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Model:
    cfg: ModelConfig
    mode: str
    graph: tuple[GraphEntry, ...]
    outputs: tuple[str, str]
    shapes: dict  # node name -> (c, h, w) at cfg.input_size
    arrays: tuple[tuple[str, np.ndarray], ...]  # manifest order

    @property
    def parameter_count(self) -> int:
        return sum(arr.size for _, arr in self.arrays)

    def complexity_entries(self, mode: str) -> list[tuple]:
        """Structural conv/data-movement inventory for one mode.

        Yields ("conv", name, m, k, c1, c2) rows for convolutions and
        ("move", name, m, c1, c2) rows for BN / pool / upsample / shuffle /
        concat traffic, m being the output spatial size. Pure structure:
        available for both modes regardless of the model's own mode.
        """
        if mode not in (TRAIN, DEPLOYED):
            raise ValueError(f"mode must be 'train' or 'deployed', got {mode!r}")
        rows: list[tuple] = []

        def square(name):
            c, h, w = self.shapes[name]
            if h != w:
                raise ShapeError(f"non-square map at {name}: {h}x{w}")
            return c, h

        def rep_rows(name, m_out, ci, co, stride):
            if mode == DEPLOYED:
                rows.append(("conv", f"{name}.fused", m_out, 3, ci, co))
                return
            rows.append(("conv", f"{name}.k3", m_out, 3, ci, co))
            rows.append(("conv", f"{name}.k1", m_out, 1, ci, co))
            rows.append(("move", f"{name}.bn3", m_out, co, co))
            rows.append(("move", f"{name}.bn1", m_out, co, co))
            if ci == co and stride == 1:
                rows.append(("move", f"{name}.bnid", m_out, co, co))

        for entry in self.graph:
            node, name = entry.node, entry.name
            if isinstance(node, ConvBNNode):
                _, m_out = square(name)
                rows.append(("conv", f"{name}.conv", m_out, node.conv.k,
                             node.conv.c_in, node.conv.c_out))
                if mode == TRAIN:
                    rows.append(("move", f"{name}.bn", m_out, node.conv.c_out, node.conv.c_out))
            elif isinstance(node, RepNode):
                _, m_out = square(name)
                rep_rows(name, m_out, node.block.c_in, node.block.c_out, node.block.stride)
            elif isinstance(node, OSANode):
                c, m_out = square(name)
                half = c // 2
                for i in range(node.module.n):
                    rep_rows(f"{name}.u{i + 1}", m_out, half, half, 1)
                    rows.append(("move", f"{name}.u{i + 1}.shuffle", m_out, c, c))
                rows.append(("move", f"{name}.cascade", m_out, 3 * c, 3 * c))
                rows.append(("conv", f"{name}.agg", m_out, 1, 3 * c, c))
            elif isinstance(node, PoolNode):
                c, m_out = square(name)
                rows.append(("move", name, m_out, c, c))
            elif isinstance(node, UpsampleNode):
                c, m_out = square(name)
                rows.append(("move", name, m_out, c, c))
            elif isinstance(node, ConcatNode):
                c, m_out = square(name)
                rows.append(("move", name, m_out, c, c))
            elif isinstance(node, HeadNode):
                _, m_out = square(name)
                rep_rows(f"{name}.rep", m_out, node.rep.c_in, node.rep.c_out, 1)
                rows.append(("conv", f"{name}.pred", m_out, 1,
                             node.pred.c_in, node.pred.c_out))
        return rows


def _assemble(cfg: ModelConfig, mode: str, src) -> Model:
    """The single structural walk shared by build, load and fuse."""
    c0, c1, c2, c3, c4 = cfg.stage_channels
    stage_io = list(zip((c0, c1, c2, c3), (c1, c2, c3, c4)))
    entries: list[GraphEntry] = []

    def add(name, node, *inputs):
        entries.append(GraphEntry(name, node, tuple(inputs)))
        return name

    prev = add("stem", _src_convbn(src, "stem", 3, c0, 3, 1, 1, mode), "input")
    prev = add("stem.pool", PoolNode(2, 2), prev)
    for i, (ci, co) in enumerate(stage_io, start=1):
        prev = add(f"b{i}.down", RepNode(_src_rep(src, f"b{i}.down", ci, co, 2, mode)), prev)
        prev = add(f"b{i}.osa", OSANode(_src_osa(src, f"b{i}.osa", co, cfg.osa_depths[i - 1], mode)), prev)
    p4, p5 = "b3.osa", "b4.osa"

    lat = add("neck.lat", _src_convbn(src, "neck.lat", c4, c3, 1, 1, 0, mode), p5)
    up = add("neck.up", UpsampleNode(2), lat)
    cat16 = add("neck.cat16", ConcatNode(), up, p4)
    fuse16 = add("neck.fuse16", _src_convbn(src, "neck.fuse16", 2 * c3, c3, 1, 1, 0, mode), cat16)
    n4 = add("neck.osa16", OSANode(_src_osa(src, "neck.osa16", c3, cfg.osa_depths[-2], mode)), fuse16)
    down = add("neck.down", RepNode(_src_rep(src, "neck.down", c3, c3, 2, mode)), n4)
    cat32 = add("neck.cat32", ConcatNode(), down, lat)
    n5 = add("neck.osa32", OSANode(_src_osa(src, "neck.osa32", 2 * c3, cfg.osa_depths[-1], mode)), cat32)

    add("head16", _src_head(src, "head16", c3, cfg.head_channels, mode), n4)
    add("head32", _src_head(src, "head32", 2 * c3, cfg.head_channels, mode), n5)

    graph = tuple(entries)
    shapes = _infer_shapes(cfg, graph)
    return Model(
        cfg=cfg,
        mode=mode,
        graph=graph,
        outputs=("head16", "head32"),
        shapes=shapes,
        arrays=tuple(src.recorded),
    )


def _node_out_shape(node, in_shapes):
    """Static (c, h, w) propagation for one node."""
    if isinstance(node, ConvBNNode):
        (c, h, w), p = in_shapes[0], node.conv
        return (p.c_out, conv_out_dim(h, p.k, p.stride, p.padding),
                conv_out_dim(w, p.k, p.stride, p.padding))
    if isinstance(node, RepNode):
        c, h, w = in_shapes[0]
        blk = node.block
        return (blk.c_out, conv_out_dim(h, 3, blk.stride, 1), conv_out_dim(w, 3, blk.stride, 1))
    if isinstance(node, OSANode):
        return in_shapes[0]
    if isinstance(node, PoolNode):
        c, h, w = in_shapes[0]
        return (c, (h - node.k) // node.stride + 1, (w - node.k) // node.stride + 1)
    if isinstance(node, UpsampleNode):
        c, h, w = in_shapes[0]
        return (c, h * node.factor, w * node.factor)
    if isinstance(node, ConcatNode):
        (ca, ha, wa), (cb, hb, wb) = in_shapes
        if (ha, wa) != (hb, wb):
            raise ShapeError(f"concat spatial mismatch: {(ha, wa)} vs {(hb, wb)}")
        return (ca + cb, ha, wa)
    if isinstance(node, HeadNode):
        c, h, w = in_shapes[0]
        return (node.pred.c_out, h, w)
    raise TypeError(f"unknown node {type(node).__name__}")


def _infer_shapes(cfg, graph):
    shapes = {"input": (3, cfg.input_size, cfg.input_size)}
    for entry in graph:
        missing = [n for n in entry.inputs if n not in shapes]
        if missing:
            raise ConfigError(f"node {entry.name} reads unknown node(s) {missing}")
        shapes[entry.name] = _node_out_shape(entry.node, [shapes[n] for n in entry.inputs])
    return shapes


def build_model(cfg: ModelConfig, seed: int) -> Model:
    """Deterministic seeded construction of a train-mode model.

    Conv weights and biases are uniform in [-s, s] with s = 1/sqrt(fan_in);
    BN statistics are drawn in ranges that mimic a trained network
    (gamma ~ [0.5, 1.5], var ~ [0.25, 2]).
    """
    return _assemble(cfg, TRAIN, _InitSource(seed))


def _head_forward(x, node: HeadNode):
    y = activation(block_forward(x, node.rep))
    if node.implicit_add is not None:
        y = y + node.implicit_add[None, :, None, None]
    y = conv2d(y, node.pred)
    if node.implicit_mul is not None:
        y = y * node.implicit_mul[None, :, None, None]
    return y


def forward(m: Model, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Run the graph; returns the two raw head tensors (no sigmoid)."""
    cache = forward_all(m, x)
    return cache[m.outputs[0]], cache[m.outputs[1]]


def forward_all(m: Model, x: np.ndarray) -> dict[str, np.ndarray]:
    """Run the graph and keep every node's output, keyed by node name."""
    check_tensor(x)
    s = m.cfg.input_size
    if x.shape[1:] != (3, s, s):
        raise ShapeError(f"model expects (n, 3, {s}, {s}), got {x.shape}")
    cache = {"input": x}
    for entry in m.graph:
        node = entry.node
        vals = [cache[n] for n in entry.inputs]
        if isinstance(node, ConvBNNode):
            y = conv2d(vals[0], node.conv)
            if node.bn is not None:
                y = batchnorm_infer(y, node.bn)
            y = activation(y)
        elif isinstance(node, RepNode):
            y = downsample_forward(vals[0], node.block)
        elif isinstance(node, OSANode):
            y = rcs_osa_forward(vals[0], node.module)
        elif isinstance(node, PoolNode):
            y = maxpool2d(vals[0], node.k, node.stride)
        elif isinstance(node, UpsampleNode):
            y = upsample_nearest(vals[0], node.factor)
        elif isinstance(node, ConcatNode):
            y = concat_channels(vals[0], vals[1])
        elif isinstance(node, HeadNode):
            y = _head_forward(vals[0], node)
        else:
            raise TypeError(f"unknown node {type(node).__name__}")
        cache[entry.name] = y
    return cache


# ---------------------------------------------------------------------------
# Reparameterization
# ---------------------------------------------------------------------------

def _fold_head_pred(node: HeadNode) -> ConvParams:
    """Fold the implicit vectors into the 1x1 prediction conv:
    im * (W @ (x + ia) + b) == W' @ x + b'."""
    kernel = node.pred.kernel.astype(np.float64)
    bias = node.pred.bias.astype(np.float64)
    ia = node.implicit_add.astype(np.float64)
    im = node.implicit_mul.astype(np.float64)
    bias = im * (bias + kernel[:, :, 0, 0] @ ia)
    kernel = kernel * im[:, None, None, None]
    return ConvParams(kernel.astype(np.float32), bias.astype(np.float32), stride=1, padding=0)


def _fused_arrays(entry: GraphEntry) -> dict[str, np.ndarray]:
    name, node = entry.name, entry.node

    def conv_pair(prefix, p: ConvParams):
        return {f"{prefix}.kernel": p.kernel, f"{prefix}.bias": p.bias}

    if isinstance(node, ConvBNNode):
        fused = fuse_conv_bn(node.conv, node.bn)
        return conv_pair(f"{name}.conv", fused)
    if isinstance(node, RepNode):
        return conv_pair(f"{name}.fused", fuse_block(node.block))
    if isinstance(node, OSANode):
        out = {}
        for i, unit in enumerate(node.module.units, start=1):
            out.update(conv_pair(f"{name}.u{i}.fused", fuse_block(unit.block)))
        out.update(conv_pair(f"{name}.agg", node.module.aggregate))
        return out
    if isinstance(node, HeadNode):
        out = conv_pair(f"{name}.rep.fused", fuse_block(node.rep))
        out.update(conv_pair(f"{name}.pred", _fold_head_pred(node)))
        return out
    return {}


def reparameterize_model(m: Model) -> Model:
    """Fuse every multi-branch node; forward-equivalent deployed model."""
    if m.mode != TRAIN:
        raise StateError("model is already deployed")
    arrays: dict[str, np.ndarray] = {}
    for entry in m.graph:
        arrays.update(_fused_arrays(entry))
    src = _DictSource(arrays)
    deployed = _assemble(m.cfg, DEPLOYED, src)
    src.check_consumed()
    return deployed


# ---------------------------------------------------------------------------
# Weight serialization
# ---------------------------------------------------------------------------

def save_weights(m: Model, path) -> None:
    """Binary format: magic 'RCSW', u32 version, u8 mode, u32 manifest
    length, JSON manifest of (name, shape) in order, then raw little-endian
    float32 data concatenated in manifest order."""
    manifest = [{"name": name, "shape": list(arr.shape)} for name, arr in m.arrays]
    blob = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<B", 1 if m.mode == DEPLOYED else 0))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in m.arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_weights(cfg: ModelConfig, path) -> Model:
    """Inverse of save_weights; the manifest must match the structure the
    config implies, array for array."""
    with open(path, "rb") as fh:
        data = fh.read()
    buf = io.BytesIO(data)
    magic = buf.read(4)
    if magic != MAGIC:
        raise WeightMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    header = buf.read(5)
    if len(header) < 5:
        raise TruncatedWeightsError("file ends inside the header")
    version, mode_flag = struct.unpack("<IB", header)
    if version != FORMAT_VERSION:
        raise WeightVersionError(f"unsupported format version {version}")
    if mode_flag not in (0, 1):
        raise WeightFileError(f"bad mode flag {mode_flag}")
    raw_len = buf.read(4)
    if len(raw_len) < 4:
        raise TruncatedWeightsError("file ends inside the header")
    (manifest_len,) = struct.unpack("<I", raw_len)
    blob = buf.read(manifest_len)
    if len(blob) < manifest_len:
        raise TruncatedWeightsError("file ends inside the manifest")
    try:
        manifest = json.loads(blob.decode("utf-8"))
        items = [(e["name"], tuple(int(d) for d in e["shape"])) for e in manifest]
    except (ValueError, KeyError, TypeError) as exc:
        raise WeightFileError(f"unreadable manifest: {exc}") from None
    mode = DEPLOYED if mode_flag else TRAIN

    # validate the manifest against the structure before trusting its
    # shapes to slice the payload
    probe = _DictSource({name: np.zeros(shape, dtype=np.float32) for name, shape in items})
    _assemble(cfg, mode, probe)
    probe.check_consumed()

    arrays = {}
    for name, shape in items:
        count = int(np.prod(shape)) if shape else 1
        raw = buf.read(4 * count)
        if len(raw) < 4 * count:
            raise TruncatedWeightsError(f"payload ends inside array {name!r}")
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    trailing = buf.read()
    if trailing:
        raise WeightFileError(f"{len(trailing)} trailing bytes after payload")

    src = _DictSource(arrays)
    model = _assemble(cfg, mode, src)
    src.check_consumed()
    return model
