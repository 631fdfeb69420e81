"""Complex Channel Net (CCN) and Complex Triple Net (CTN).

Both share a feature module: a real 3x3 stem conv with relu, conversion of
its output to complex form (2D DFT or zero imaginary part), then three
complex residual blocks, each followed by 2x2 complex max-pooling.

CCN feeds the pooled features' real and imaginary parts through a real MLP
trunk (shared or duplicated) and a sigmoid head. CTN maps them through a
complex fully connected layer and complex L2 normalization to a descriptor.
"""

from __future__ import annotations

import contextlib
import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Adam, Node, Tape
from .ctensor import ComplexTensor, ShapeError
from .layers import (ComplexBatchNorm, ComplexLinear, ComplexResidualBlock, Linear, Module,
                     RealConv2d, cl2_norm, complex_max_pool)

_CHOICES = {
    "architecture": ("ccn", "ctn"),
    "input_conversion": ("dft", "zero_imag"),
    "bn_mode": ("per_component", "covariance"),
    "distance_mode": ("modulus_sum", "literal_clamped"),
    "loss_form": ("corrected", "literal"),
    "decision_mode": ("siamese", "pseudo_siamese"),
    "init_scheme": ("rayleigh", "glorot"),
    "dtype": ("float64", "float32"),
}


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    architecture: str = "ctn"
    input_conversion: str = "dft"
    bn_mode: str = "per_component"
    distance_mode: str = "modulus_sum"
    loss_form: str = "corrected"
    decision_mode: str = "siamese"
    descriptor_dim: int = 128
    patch_size: int = 32
    stem_channels: int = 32
    block_channels: tuple = (32, 64, 128)
    fc_width: int = 4096
    init_scheme: str = "rayleigh"
    bn_momentum: float = 0.9
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float | None = None
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        self.block_channels = tuple(int(c) for c in self.block_channels)
        self.validate()

    def validate(self) -> None:
        for key, allowed in _CHOICES.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key}={getattr(self, key)!r}; expected one of {allowed}")
        if len(self.block_channels) != 3:
            raise ConfigError("block_channels needs exactly three entries")
        if self.patch_size % 8:
            raise ConfigError("patch_size must be divisible by 8 (three 2x pools)")
        for key in ("descriptor_dim", "patch_size", "stem_channels", "fc_width"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive")
        if not 0.0 < self.bn_momentum < 1.0:
            raise ConfigError("bn_momentum must lie in (0, 1)")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        s = self.patch_size // 8
        return (self.block_channels[2], s, s)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["block_channels"] = list(self.block_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "ModelConfig":
        return cls.from_dict(json.loads(s))


def _as_node(tape: Tape, x) -> Node:
    return x if isinstance(x, Node) else tape.constant(x)


class FeatureModule(Module):
    def __init__(self, cfg: ModelConfig, in_channels: int, rng: np.random.Generator):
        self.name = "feature"
        dt = cfg.np_dtype
        self.conversion = cfg.input_conversion
        self.in_channels = in_channels
        self.patch_size = cfg.patch_size
        self.stem = RealConv2d("feature.stem", in_channels, cfg.stem_channels, 3, rng, dtype=dt)
        plan = [cfg.stem_channels, *cfg.block_channels]
        self.blocks = [ComplexResidualBlock(f"feature.block{k + 1}", plan[k], plan[k + 1], rng,
                                            bn_mode=cfg.bn_mode, scheme=cfg.init_scheme,
                                            momentum=cfg.bn_momentum, dtype=dt)
                       for k in range(3)]

    def forward(self, tape: Tape, x, training: bool) -> Node:
        x = _as_node(tape, x)
        n, c, h, w = x.shape
        if c != self.in_channels or h != self.patch_size or w != self.patch_size:
            raise ShapeError(f"expected (N, {self.in_channels}, {self.patch_size}, "
                             f"{self.patch_size}) patches, got {x.shape}")
        h = ag.relu(self.stem.forward(tape, x))
        if self.conversion == "dft":
            # unitary scaling keeps spectrum energy equal to the stem's
            h = ag.scale(ag.dft2d(h), 1.0 / self.patch_size)
        else:
            h = ag.from_real(h)
        for block in self.blocks:
            h = complex_max_pool(block.forward(tape, h, training), 2)
        return h


class _Trunk(Module):
    def __init__(self, name, din, width, rng, dtype):
        self.name = name
        self.fcs = [Linear(f"{name}.fc{k + 1}", din if k == 0 else width, width, rng, dtype)
                    for k in range(3)]

    def forward(self, tape, x):
        for fc in self.fcs:
            x = ag.relu(fc.forward(tape, x))
        return x


# small head weights keep the fresh sigmoid away from saturation
HEAD_INIT_STD = 1e-3


class DecisionModule(Module):
    """Real MLP over the real and imaginary feature parts, then a sigmoid head."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.name = "decision"
        dt = cfg.np_dtype
        self.mode = cfg.decision_mode
        din = int(np.prod(cfg.feature_shape))
        if self.mode == "siamese":
            self.trunk_r = _Trunk("decision.trunk", din, cfg.fc_width, rng, dt)
            self.trunk_i = self.trunk_r
        else:
            self.trunk_r = _Trunk("decision.trunk_r", din, cfg.fc_width, rng, dt)
            self.trunk_i = _Trunk("decision.trunk_i", din, cfg.fc_width, rng, dt)
        self.head = Linear("decision.head", 2 * cfg.fc_width, 1, rng, dt, init_std=HEAD_INIT_STD)

    def branches(self, tape: Tape, real: Node, imag: Node) -> tuple[Node, Node]:
        if self.trunk_r is self.trunk_i:
            n = real.shape[0]
            both = self.trunk_r.forward(tape, ag.concat([real, imag], axis=0))
            return ag.take(both, slice(0, n)), ag.take(both, slice(n, 2 * n))
        return self.trunk_r.forward(tape, real), self.trunk_i.forward(tape, imag)

    def forward(self, tape: Tape, feat: Node) -> Node:
        n = feat.shape[0]
        real = ag.reshape(ag.real_part(feat), (n, -1))
        imag = ag.reshape(ag.imag_part(feat), (n, -1))
        hr, hi = self.branches(tape, real, imag)
        logit = self.head.forward(tape, ag.concat([hr, hi], axis=1))
        return ag.reshape(ag.sigmoid(logit), (n,))


class MetricModule(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.name = "metric"
        din = int(np.prod(cfg.feature_shape))
        self.fc = ComplexLinear("metric.fc", din, cfg.descriptor_dim, rng, cfg.init_scheme,
                                cfg.np_dtype)

    def forward(self, tape: Tape, feat: Node) -> Node:
        n = feat.shape[0]
        return cl2_norm(self.fc.forward(tape, ag.creshape(feat, (n, -1))))


class _Net(Module):
    def __init__(self, cfg: ModelConfig):
        self.config = cfg

    @property
    def dtype(self):
        return self.config.np_dtype

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def shape_manifest(self) -> dict[str, tuple]:
        return {name: tuple(p.shape) for name, p in self.named_parameters()}

    def _cast(self, x):
        return np.asarray(x, dtype=self.dtype)


class CCN(_Net):
    """Complex Channel Net: 2-channel patch pair -> match probability."""

    def __init__(self, cfg: ModelConfig):
        if cfg.architecture != "ccn":
            raise ConfigError("CCN needs architecture='ccn'")
        super().__init__(cfg)
        rng = np.random.default_rng(cfg.seed)
        self.name = "ccn"
        self.feature = FeatureModule(cfg, 2, rng)
        self.decision = DecisionModule(cfg, rng)

    def forward(self, tape: Tape, pairs, training: bool = True) -> Node:
        if not isinstance(pairs, Node):
            pairs = self._cast(pairs)
        return self.decision.forward(tape, self.feature.forward(tape, pairs, training))

    def score(self, pairs, batch: int = 256) -> np.ndarray:
        """Inference-mode scores for an (N, 2, S, S) array."""
        pairs = self._cast(pairs)
        out = [_inference(self, pairs[i:i + batch])
               for i in range(0, len(pairs), batch)]
        return np.concatenate(out) if out else np.zeros(0, self.dtype)


class CTN(_Net):
    """Complex Triple Net: patch -> unit-norm complex descriptor."""

    def __init__(self, cfg: ModelConfig):
        if cfg.architecture != "ctn":
            raise ConfigError("CTN needs architecture='ctn'")
        super().__init__(cfg)
        rng = np.random.default_rng(cfg.seed)
        self.name = "ctn"
        self.feature = FeatureModule(cfg, 1, rng)
        self.metric = MetricModule(cfg, rng)

    def forward(self, tape: Tape, patches, training: bool = True) -> Node:
        if not isinstance(patches, Node):
            patches = self._cast(patches)
        return self.metric.forward(tape, self.feature.forward(tape, patches, training))

    def forward_train(self, tape: Tape, p1, p2, pn, training: bool = True):
        """Run the three branches as one concatenated batch.

        The branches share every weight; batch-norm statistics are computed over
        the union of the three branch batches.
        """
        n = len(p1)
        if not (len(p2) == n and len(pn) == n):
            raise ShapeError("triplet branches must have equal batch sizes")
        desc = self.forward(tape, np.concatenate([self._cast(p1), self._cast(p2), self._cast(pn)]),
                            training)
        return tuple(ag.cslice(desc, k * n, (k + 1) * n, axis=0) for k in range(3))

    def describe(self, patches, batch: int = 256) -> ComplexTensor:
        """Inference-mode descriptors for an (N, 1, S, S) array."""
        patches = self._cast(patches)
        parts = [_inference(self, patches[i:i + batch])
                 for i in range(0, len(patches), batch)]
        if not parts:
            d = self.config.descriptor_dim
            return ComplexTensor.zeros((0, d), self.dtype)
        return ComplexTensor(np.concatenate([p.real for p in parts]),
                             np.concatenate([p.imag for p in parts]))


def _inference(model, x):
    tape = Tape()
    value = model.forward(tape, x, training=False).value
    tape.release()
    return value


def build_model(cfg: ModelConfig):
    return CCN(cfg) if cfg.architecture == "ccn" else CTN(cfg)


def batchnorm_layers(model: Module) -> list[ComplexBatchNorm]:
    return [m for m in model.modules() if isinstance(m, ComplexBatchNorm)]


@contextlib.contextmanager
def bn_calibration(model: Module):
    """Within the block, a training-mode forward overwrites the running statistics
    with the statistics of that batch (momentum 0)."""
    layers = batchnorm_layers(model)
    saved = [layer.momentum for layer in layers]
    for layer in layers:
        layer.momentum = 0.0
    try:
        yield
    finally:
        for layer, m in zip(layers, saved):
            layer.momentum = m


# -- checkpoints ---------------------------------------------------------------

MODEL_FORMAT = "cvpatch-model"


def make_optimizer(model: _Net) -> Adam:
    c = model.config
    return Adam(model.parameters(), lr=c.lr, betas=(c.beta1, c.beta2), eps=c.adam_eps,
                weight_decay=c.weight_decay, grad_clip=c.grad_clip)


def save_model(path, model: _Net, optimizer: Adam | None = None, step: int = 0,
               extra_meta: dict | None = None) -> None:
    meta = {"format": MODEL_FORMAT, "config": model.config.to_dict(), "step": int(step),
            "shapes": {k: list(v) for k, v in model.shape_manifest().items()}}
    if extra_meta:
        meta.update(extra_meta)
    buffers = {f"buffer/{k}": v for k, v in model.named_buffers()}
    ag.save_checkpoint(path, model.parameters(), meta, extra=buffers, optimizer=optimizer)


def load_model(path, with_optimizer: bool = False):
    """Load a checkpoint; returns (model, meta) or (model, meta, optimizer)."""
    meta, tensors = ag.load_checkpoint(path)
    if meta.get("format") != MODEL_FORMAT:
        raise ConfigError(f"{path}: not a model checkpoint")
    cfg = ModelConfig.from_dict(meta["config"])
    model = build_model(cfg)
    manifest = model.shape_manifest()
    stored = {k: tuple(v) for k, v in meta["shapes"].items()}
    if stored != manifest:
        raise ConfigError(f"{path}: parameter shapes disagree with the embedded config")
    for name, p in model.named_parameters():
        value = tensors[f"param/{name}"]
        if tuple(value.shape) != manifest[name]:
            raise ConfigError(f"{path}: {name} has shape {value.shape}, expected {manifest[name]}")
        p.value = value
        p.zero_grad()
    model.load_buffers({k[len("extra/buffer/"):]: v for k, v in tensors.items()
                        if k.startswith("extra/buffer/")})
    if not with_optimizer:
        return model, meta
    opt = make_optimizer(model)
    if "adam.t" in tensors:
        opt.load_state_tensors(tensors)
    return model, meta, opt
