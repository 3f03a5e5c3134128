"""The assembled network: encoder, two expansive paths, heads, and losses.

The contracting path is a standard double-conv + max-pool ladder.  Two
decoders climb back up: the additional (auxiliary) path consumes the
MSC-processed encoder skips, and the original (main) path consumes, at each
stage, the MDSA-attended concatenation of the auxiliary stage output with the
same MSC skip.  Skips are aligned by resolution, each MSC output is computed
once and shared by both decoders, and both heads are 1x1 convolutions to the
mask channels.  Training minimizes lambda_s * BCE(main) + lambda_a * BCE(aux).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import blocks
from .blocks import (
    apply_conv,
    conv_block,
    init_conv_block,
    init_dspa,
    init_msc,
    kaiming_conv,
    mdsa,
)
from .data import read_otf, write_otf
from .tensor import (
    Tensor,
    ShapeError,
    add,
    bce_with_logits,
    concat_channels,
    maxpool2d,
    scale,
)

CONFIG_ENTRY = "config.json"


class CheckpointError(ValueError):
    """A checkpoint does not match the expected parameter set or shapes."""


def _default_encoder_channels():
    return [64, 128, 256, 512, 1024]


@dataclass
class ModelConfig:
    """Architecture and loss hyperparameters.

    ``encoder_channels`` must double at every stage and ``decoder_channels``
    is its reverse; ``input_size`` is the square input extent, a power of two
    no smaller than 2**(depth-1).  ``mdsa_enabled=False`` builds the ablation
    variant whose main-path skips bypass the attention stack.
    """

    depth: int = 5
    encoder_channels: list = field(default_factory=_default_encoder_channels)
    decoder_channels: list = None
    out_channels: int = 2
    k: int = 10
    lambda_s: float = 10.0
    lambda_a: float = 1.0
    input_size: int = 512
    mdsa_enabled: bool = True

    def __post_init__(self):
        self.encoder_channels = list(self.encoder_channels)
        if self.decoder_channels is None:
            self.decoder_channels = list(reversed(self.encoder_channels))
        else:
            self.decoder_channels = list(self.decoder_channels)
        self.validate()

    def validate(self):
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if len(self.encoder_channels) != self.depth:
            raise ValueError(
                f"encoder_channels must list {self.depth} stages,"
                f" got {len(self.encoder_channels)}"
            )
        for i in range(1, self.depth):
            if self.encoder_channels[i] != 2 * self.encoder_channels[i - 1]:
                raise ValueError(
                    f"encoder_channels must double per stage, got {self.encoder_channels}"
                )
        if self.decoder_channels != list(reversed(self.encoder_channels)):
            raise ValueError("decoder_channels must be the reverse of encoder_channels")
        if self.out_channels < 1:
            raise ValueError("out_channels must be >= 1")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.lambda_s < 0 or self.lambda_a < 0:
            raise ValueError("loss weights must be >= 0")
        n = self.input_size
        if n < 1 or (n & (n - 1)) != 0:
            raise ValueError(f"input_size must be a power of two, got {n}")
        if n < 2 ** (self.depth - 1):
            raise ValueError(
                f"input_size {n} too small for depth {self.depth}"
                f" (needs >= {2 ** (self.depth - 1)})"
            )
        return self

    def to_dict(self):
        return {
            "depth": self.depth,
            "encoder_channels": list(self.encoder_channels),
            "decoder_channels": list(self.decoder_channels),
            "out_channels": self.out_channels,
            "k": self.k,
            "lambda_s": self.lambda_s,
            "lambda_a": self.lambda_a,
            "input_size": self.input_size,
            "mdsa_enabled": self.mdsa_enabled,
        }

    @classmethod
    def from_dict(cls, d):
        allowed = {
            "depth", "encoder_channels", "decoder_channels", "out_channels",
            "k", "lambda_s", "lambda_a", "input_size", "mdsa_enabled",
        }
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class DualOutput:
    """Logit maps from both heads, each (N, L, H, W)."""

    main_logits: Tensor
    aux_logits: Tensor


class OmegaNet:
    """Parameterized network instance; read-only during forward passes."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        d = config.depth
        enc_ch = config.encoder_channels
        dec_ch = config.decoder_channels

        self.encoder = []
        prev = 1
        for ch in enc_ch:
            self.encoder.append(init_conv_block(rng, prev, ch, ch, dtype))
            prev = ch

        # decoder stage j (1-based) works at skip E_{d-j} with C = dec_ch[j] channels
        self.skip_msc = [init_msc(rng, dec_ch[j], dtype) for j in range(1, d)]
        if config.mdsa_enabled:
            self.skip_dspa = [
                init_dspa(rng, 2 * dec_ch[j], config.k, dtype) for j in range(1, d)
            ]
        else:
            self.skip_dspa = None

        self.aux_up, self.aux_block = [], []
        self.main_up, self.main_block = [], []
        for j in range(1, d):
            c = dec_ch[j]
            self.aux_up.append(
                kaiming_conv(rng, dec_ch[j - 1], c, 2, stride=2, transposed=True, dtype=dtype)
            )
            self.aux_block.append(init_conv_block(rng, 2 * c, c, c, dtype))
            self.main_up.append(
                kaiming_conv(rng, dec_ch[j - 1], c, 2, stride=2, transposed=True, dtype=dtype)
            )
            self.main_block.append(init_conv_block(rng, 3 * c, c, c, dtype))

        self.head_aux = kaiming_conv(rng, dec_ch[d - 1], config.out_channels, 1, dtype=dtype)
        self.head_main = kaiming_conv(rng, dec_ch[d - 1], config.out_channels, 1, dtype=dtype)

    # -- parameters ---------------------------------------------------------

    def named_parameters(self):
        out = []
        for i, block in enumerate(self.encoder, start=1):
            out.extend(block.named_parameters(f"enc.{i}"))
        for j, msc in enumerate(self.skip_msc, start=1):
            out.extend(msc.named_parameters(f"msc.{j}"))
        if self.skip_dspa is not None:
            for j, dp in enumerate(self.skip_dspa, start=1):
                out.extend(dp.named_parameters(f"dspa.{j}"))
        for j in range(1, self.config.depth):
            out.extend(self.aux_up[j - 1].named_parameters(f"aux.{j}.up"))
            out.extend(self.aux_block[j - 1].named_parameters(f"aux.{j}.block"))
        for j in range(1, self.config.depth):
            out.extend(self.main_up[j - 1].named_parameters(f"main.{j}.up"))
            out.extend(self.main_block[j - 1].named_parameters(f"main.{j}.block"))
        out.extend(self.head_aux.named_parameters("head.aux"))
        out.extend(self.head_main.named_parameters("head.main"))
        return out

    def num_parameters(self):
        return sum(p.size for _, p in self.named_parameters())

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.zero_grad()

    # -- forward ------------------------------------------------------------

    def encode(self, x: Tensor):
        """Contracting path; returns the d feature maps, deepest last."""
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"expected input shape (N, 1, H, W), got {x.shape}")
        if x.shape[2] != cfg.input_size or x.shape[3] != cfg.input_size:
            raise ShapeError(
                f"expected {cfg.input_size}x{cfg.input_size} input,"
                f" got {x.shape[2]}x{x.shape[3]}"
            )
        feats = []
        cur = x
        for i, block in enumerate(self.encoder):
            if i > 0:
                cur = maxpool2d(cur)
            cur = conv_block(cur, block)
            feats.append(cur)
        return feats

    def msc_skips(self, encs):
        """Cascade-MSC output for each skip, stage order (computed once, shared)."""
        d = self.config.depth
        return [
            blocks.cascade_msc(encs[d - 1 - j], self.skip_msc[j - 1])
            for j in range(1, d)
        ]

    def decode_additional(self, encs, msc_outs=None):
        """Auxiliary expansive path; returns its d-1 stage outputs."""
        if msc_outs is None:
            msc_outs = self.msc_skips(encs)
        outs = []
        prev = encs[-1]
        for j in range(1, self.config.depth):
            up = apply_conv(prev, self.aux_up[j - 1])
            prev = conv_block(concat_channels([up, msc_outs[j - 1]]), self.aux_block[j - 1])
            outs.append(prev)
        return outs

    def decode_original(self, encs, aux_feats, msc_outs=None):
        """Main expansive path with attended skips; returns its d-1 stage outputs."""
        if msc_outs is None:
            msc_outs = self.msc_skips(encs)
        outs = []
        prev = encs[-1]
        for j in range(1, self.config.depth):
            skip = concat_channels([aux_feats[j - 1], msc_outs[j - 1]])
            if self.skip_dspa is not None:
                skip = mdsa(skip, self.skip_dspa[j - 1])
            up = apply_conv(prev, self.main_up[j - 1])
            prev = conv_block(concat_channels([up, skip]), self.main_block[j - 1])
            outs.append(prev)
        return outs

    def forward(self, x: Tensor) -> DualOutput:
        encs = self.encode(x)
        msc_outs = self.msc_skips(encs)
        aux_feats = self.decode_additional(encs, msc_outs)
        main_feats = self.decode_original(encs, aux_feats, msc_outs)
        return DualOutput(
            main_logits=apply_conv(main_feats[-1], self.head_main),
            aux_logits=apply_conv(aux_feats[-1], self.head_aux),
        )

    def loss(self, out: DualOutput, mask: Tensor) -> Tensor:
        return dual_loss(out, mask, self.config.lambda_s, self.config.lambda_a)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def bce_loss(logits: Tensor, mask: Tensor) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against a {0,1} mask."""
    if logits.shape != mask.shape:
        raise ShapeError(f"bce_loss shape mismatch: {logits.shape} vs {mask.shape}")
    if not np.isin(mask.data, (0.0, 1.0)).all():
        raise ValueError("bce_loss mask must contain only 0 and 1")
    return bce_with_logits(logits, mask)


def dual_loss(out: DualOutput, mask: Tensor, lambda_s: float = 10.0,
              lambda_a: float = 1.0) -> Tensor:
    """lambda_s * BCE(main) + lambda_a * BCE(aux)."""
    main = scale(bce_loss(out.main_logits, mask), lambda_s)
    aux = scale(bce_loss(out.aux_logits, mask), lambda_a)
    return add(main, aux)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _json_entry(obj) -> np.ndarray:
    raw = json.dumps(obj, sort_keys=True).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float32)


def _entry_json(arr):
    arr = np.asarray(arr)
    codes = arr.astype(np.uint8)
    if not np.array_equal(codes.astype(np.float32), arr.astype(np.float32)):
        raise CheckpointError("corrupt config entry in checkpoint")
    return json.loads(bytes(codes).decode("utf-8"))


def save_checkpoint(net: OmegaNet, path, extra=None) -> None:
    """Write the config header plus every parameter (and optional trainer
    state arrays) into one OTF container."""
    entries = [(CONFIG_ENTRY, _json_entry(net.config.to_dict()))]
    for name, p in net.named_parameters():
        entries.append((name, np.ascontiguousarray(p.data, dtype=np.float32)))
    for name, arr in (extra or {}).items():
        entries.append((name, np.ascontiguousarray(arr, dtype=np.float32)))
    write_otf(path, entries)


def load_checkpoint(path):
    """Returns (ModelConfig, {name: ndarray}) with the config entry stripped."""
    entries = read_otf(path)
    if CONFIG_ENTRY not in entries:
        raise CheckpointError(f"checkpoint {path} has no {CONFIG_ENTRY} entry")
    config = ModelConfig.from_dict(_entry_json(entries.pop(CONFIG_ENTRY)))
    return config, entries


def restore_parameters(net: OmegaNet, entries: dict) -> dict:
    """Copy parameter tensors into the net, validating names and shapes.

    Non-parameter entries (trainer state, ``adam.*``) are returned untouched;
    any other unknown tensor is an error.
    """
    remaining = dict(entries)
    for name, p in net.named_parameters():
        if name not in remaining:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        arr = remaining.pop(name)
        if tuple(arr.shape) != tuple(p.shape):
            raise CheckpointError(
                f"checkpoint tensor {name!r} has shape {tuple(arr.shape)},"
                f" expected {tuple(p.shape)}"
            )
        p.data = arr.astype(net.dtype)
    for name in remaining:
        if not (name.startswith("adam.") or name.startswith("trainer.")):
            raise CheckpointError(f"unexpected tensor {name!r} in checkpoint")
    return remaining


def build_from_checkpoint(path, dtype=np.float32):
    """Rebuild a network from a checkpoint; returns (net, trainer state dict)."""
    config, entries = load_checkpoint(path)
    net = OmegaNet(config, seed=0, dtype=dtype)
    extra = restore_parameters(net, entries)
    return net, extra
