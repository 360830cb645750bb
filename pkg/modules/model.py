#!/usr/bin/env python3
"""
Networks - strided convolutional encoder with multi-scale fusion, segmentation
decoder and the projection head used only during training.
"""

from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from utils.errors import DatasetIOError


@dataclass(frozen=True)
class EncoderSpec:
    stage_channels: tuple = (16, 32)
    stage_strides: tuple = (4, 8)
    in_channels: int = 3

    def __post_init__(self):
        if len(self.stage_channels) != len(self.stage_strides) or not self.stage_channels:
            raise ValueError("stage_channels and stage_strides must be non-empty and pair up")
        previous = 1
        for stride in self.stage_strides:
            if stride < 1 or stride & (stride - 1) or stride < previous:
                raise ValueError(f"stage strides must be non-decreasing powers of two, got {self.stage_strides}")
            previous = stride

    @property
    def fused_dim(self):
        return sum(self.stage_channels)

    @property
    def output_stride(self):
        return self.stage_strides[0]

    @property
    def max_stride(self):
        return self.stage_strides[-1]


@dataclass(frozen=True)
class ProjectorSpec:
    layer_dims: tuple

    def __post_init__(self):
        if len(self.layer_dims) < 2:
            raise ValueError("projector needs at least an input and an output width")
        if self.layer_dims[-1] < 2:
            raise ValueError("embedding width must be >= 2")

    @classmethod
    def halving(cls, d):
        """d -> d/2 -> d/4"""
        return cls((d, d // 2, d // 4))

    @property
    def out_dim(self):
        return self.layer_dims[-1]


@dataclass(frozen=True)
class DecoderSpec:
    num_classes: int
    upsample: int = 4
    hidden: int = 32

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")


def _stage(in_ch, out_ch, ratio):
    if ratio > 1:
        # non-overlapping patch embedding for the downsampling step
        down = nn.Conv2d(in_ch, out_ch, kernel_size=ratio, stride=ratio)
    else:
        down = nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1)
    return nn.Sequential(down, nn.ReLU(), nn.Conv2d(out_ch, out_ch, kernel_size=3, padding=1), nn.ReLU())


def fuse_multiscale(stages):
    """Resize every stage to the finest grid and concatenate on channels"""
    if not stages:
        raise ValueError("no feature stages to fuse")
    if len(stages) == 1:
        return stages[0]
    size = stages[0].shape[-2:]
    resized = [stages[0]] + [
        s if s.shape[-2:] == size else F.interpolate(s, size=size, mode="bilinear", align_corners=False)
        for s in stages[1:]
    ]
    return torch.cat(resized, dim=1)


class Encoder(nn.Module):
    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        blocks = []
        in_ch, previous = spec.in_channels, 1
        for channels, stride in zip(spec.stage_channels, spec.stage_strides):
            blocks.append(_stage(in_ch, channels, stride // previous))
            in_ch, previous = channels, stride
        self.stages = nn.ModuleList(blocks)

    def stage_outputs(self, x):
        h, w = x.shape[-2:]
        if h % self.spec.max_stride or w % self.spec.max_stride:
            raise ValueError(f"input size {h}x{w} is not divisible by stride {self.spec.max_stride}")
        outputs = []
        for stage in self.stages:
            x = stage(x)
            outputs.append(x)
        return outputs

    def forward(self, x):
        return fuse_multiscale(self.stage_outputs(x))


class Decoder(nn.Module):
    def __init__(self, in_dim, spec):
        super().__init__()
        self.spec = spec
        self.head = nn.Sequential(
            nn.Conv2d(in_dim, spec.hidden, kernel_size=1),
            nn.ReLU(),
            nn.Conv2d(spec.hidden, spec.num_classes, kernel_size=1),
        )

    def forward(self, y):
        logits = self.head(y)
        if self.spec.upsample == 1:
            return logits
        size = (y.shape[-2] * self.spec.upsample, y.shape[-1] * self.spec.upsample)
        return F.interpolate(logits, size=size, mode="bilinear", align_corners=False)


class Projector(nn.Module):
    """Linear -> BatchNorm -> ReLU for every hidden width, plain Linear at the end"""

    def __init__(self, spec, bn_momentum=0.1, bn_eps=1e-5):
        super().__init__()
        self.spec = spec
        dims = spec.layer_dims
        layers = []
        for i in range(len(dims) - 2):
            layers += [
                nn.Linear(dims[i], dims[i + 1], bias=False),
                nn.BatchNorm1d(dims[i + 1], momentum=bn_momentum, eps=bn_eps),
                nn.ReLU(),
            ]
        layers.append(nn.Linear(dims[-2], dims[-1]))
        self.net = nn.Sequential(*layers)

    def forward(self, pooled):
        if self.training and pooled.shape[0] < 2:
            raise ValueError("projector needs a batch of at least 2 in training mode")
        return self.net(pooled)

    @staticmethod
    def expected_parameter_count(layer_dims):
        dims = list(layer_dims)
        weights = sum(a * b for a, b in zip(dims[:-1], dims[1:]))
        norm = sum(2 * d for d in dims[1:-1])
        return weights + norm + dims[-1]


def stop_gradient_boundary(y, enabled):
    """Cut the projector path off from the encoder when enabled"""
    return y.detach() if enabled else y


class BTSegNet(nn.Module):
    """Encoder f_theta, decoder f_psi and projection head f_phi"""

    def __init__(self, encoder_spec, decoder_spec, projector_spec, seed=0, dtype=torch.float64):
        super().__init__()
        self.encoder_spec = encoder_spec
        self.decoder_spec = decoder_spec
        self.projector_spec = projector_spec
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.encoder = Encoder(encoder_spec)
            self.decoder = Decoder(encoder_spec.fused_dim, decoder_spec)
            self.projector = Projector(projector_spec)
            self._init_weights()
        self.to(dtype)

    @classmethod
    def from_config(cls, config, num_classes):
        encoder_spec = EncoderSpec(tuple(config.stage_channels), tuple(config.stage_strides))
        decoder_spec = DecoderSpec(num_classes, upsample=encoder_spec.output_stride,
                                   hidden=config.decoder_hidden)
        d = encoder_spec.fused_dim
        projector_spec = ProjectorSpec(tuple(config.projector_dims)) if config.projector_dims \
            else ProjectorSpec.halving(d)
        if projector_spec.layer_dims[0] != d:
            raise ValueError(f"projector input width {projector_spec.layer_dims[0]} != fused dim {d}")
        dtype = torch.float64 if config.dtype == "float64" else torch.float32
        return cls(encoder_spec, decoder_spec, projector_spec, seed=config.seed, dtype=dtype)

    def _init_weights(self):
        for module in self.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_normal_(module.weight, mode="fan_in", nonlinearity="relu")
                if module.bias is not None:
                    nn.init.zeros_(module.bias)

    def segment(self, x):
        """Inference path: encoder then decoder, logits at input resolution"""
        return self.decoder(self.encoder(x))

    def param_groups(self):
        return {
            "encoder": list(self.encoder.parameters()),
            "decoder": list(self.decoder.parameters()),
            "projector": list(self.projector.parameters()),
        }

    def specs(self):
        return {
            "encoder": asdict(self.encoder_spec),
            "decoder": asdict(self.decoder_spec),
            "projector": asdict(self.projector_spec),
        }

    @classmethod
    def from_specs(cls, specs, dtype=torch.float64):
        return cls(
            EncoderSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in specs["encoder"].items()}),
            DecoderSpec(**specs["decoder"]),
            ProjectorSpec(tuple(specs["projector"]["layer_dims"])),
            dtype=dtype,
        )


def save_checkpoint(path, model, step, extra=None):
    """Single torch archive: parameters by module path, specs, step and extras"""
    path = Path(path)
    payload = {
        "state_dict": model.state_dict(),
        "specs": model.specs(),
        "step": step,
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
    }
    payload.update(extra or {})
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(payload, tmp)
        tmp.replace(path)
    except OSError as e:
        raise DatasetIOError(f"could not write checkpoint: {e}", path) from e
    return path


def load_checkpoint(path):
    """Returns (model, payload)"""
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError) as e:
        raise DatasetIOError(f"could not read checkpoint: {e}", path) from e
    dtype = getattr(torch, payload.get("dtype", "float64"))
    model = BTSegNet.from_specs(payload["specs"], dtype=dtype)
    model.load_state_dict(payload["state_dict"])
    return model, payload
