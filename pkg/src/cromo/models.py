"""Encoder/projector/predictor stacks, frozen snapshots, and EMA targets."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
from torchvision.models import resnet18, resnet50

from .container import load_arrays, save_arrays


@dataclass
class ModelConfig:
    """Architecture dimensions; defaults target CIFAR-scale inputs."""

    arch: str = "resnet18"
    in_channels: int = 3
    image_size: int = 32
    feature_dim: int = 512          # encoder output D_f (ignored by resnets)
    projector_hidden: int = 2048
    projector_dim: int = 2048       # D_z
    predictor_hidden: int = 4096    # byol predictor hidden width
    use_predictor: bool = False     # byol only
    distill_hidden: int = 0         # 0 -> defaults to projector_dim
    distill_batchnorm: bool = True
    mlp_hidden: tuple[int, ...] = (64, 64)   # mlp / small_cnn trunk widths
    mlp_norm: str = "batch"         # mlp encoder: "batch" | "layer" | "none"

    def resolved_distill_hidden(self) -> int:
        return self.distill_hidden or self.projector_dim


def _mlp(dims: list[int], batchnorm: bool = True, norm: str = "batch") -> nn.Sequential:
    if not batchnorm:
        norm = "none"
    layers: list[nn.Module] = []
    for i in range(len(dims) - 1):
        layers.append(nn.Linear(dims[i], dims[i + 1],
                                bias=not (norm == "batch" and i < len(dims) - 2)))
        if i < len(dims) - 2:
            if norm == "batch":
                layers.append(nn.BatchNorm1d(dims[i + 1]))
            elif norm == "layer":
                layers.append(nn.LayerNorm(dims[i + 1]))
            layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


class _Flatten(nn.Module):
    def forward(self, x):
        return x.reshape(x.shape[0], -1)


def _cifar_resnet(builder, in_channels: int) -> tuple[nn.Module, int]:
    """Torchvision resnet with a 3x3 stem and no initial pooling (small images)."""
    net = builder(num_classes=10)
    net.conv1 = nn.Conv2d(in_channels, 64, kernel_size=3, stride=1, padding=1, bias=False)
    net.maxpool = nn.Identity()
    feature_dim = net.fc.in_features
    net.fc = nn.Identity()
    return net, feature_dim


def _small_cnn(in_channels: int, widths: tuple[int, ...], feature_dim: int) -> nn.Module:
    chans = [in_channels] + list(widths)
    blocks: list[nn.Module] = []
    for i in range(len(chans) - 1):
        blocks += [nn.Conv2d(chans[i], chans[i + 1], 3, padding=1),
                   nn.BatchNorm2d(chans[i + 1]), nn.ReLU(inplace=True),
                   nn.MaxPool2d(2)]
    blocks += [nn.AdaptiveAvgPool2d(1), _Flatten(),
               nn.Linear(chans[-1], feature_dim)]
    return nn.Sequential(*blocks)


def _mlp_encoder(cfg: ModelConfig) -> nn.Module:
    in_dim = cfg.in_channels * cfg.image_size * cfg.image_size
    dims = [in_dim] + list(cfg.mlp_hidden) + [cfg.feature_dim]
    return nn.Sequential(_Flatten(), _mlp(dims, norm=cfg.mlp_norm))


class TriNet(nn.Module):
    """Encoder + projector (+ optional byol predictor and distill predictor)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.arch == "resnet18":
            self.encoder, self.feature_dim = _cifar_resnet(resnet18, cfg.in_channels)
        elif cfg.arch == "resnet50":
            self.encoder, self.feature_dim = _cifar_resnet(resnet50, cfg.in_channels)
        elif cfg.arch == "small_cnn":
            self.feature_dim = cfg.feature_dim
            self.encoder = _small_cnn(cfg.in_channels, cfg.mlp_hidden, cfg.feature_dim)
        elif cfg.arch == "mlp":
            self.feature_dim = cfg.feature_dim
            self.encoder = _mlp_encoder(cfg)
        else:
            raise ValueError(f"unknown arch {cfg.arch!r}")

        self.projector = _mlp([self.feature_dim, cfg.projector_hidden,
                               cfg.projector_hidden, cfg.projector_dim])
        self.predictor = None
        if cfg.use_predictor:
            self.predictor = _mlp([cfg.projector_dim, cfg.predictor_hidden,
                                   cfg.projector_dim])
        dh = cfg.resolved_distill_hidden()
        self.distill_predictor = _mlp([cfg.projector_dim, dh, cfg.projector_dim],
                                      batchnorm=cfg.distill_batchnorm)

    @property
    def projector_dim(self) -> int:
        return self.cfg.projector_dim

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.encoder(x)
        z = self.projector(h)
        return h, z


def build_trinet(arch: str, cfg: ModelConfig | None = None, **overrides) -> TriNet:
    """Construct a TriNet for the named architecture."""
    base = cfg.__dict__ if cfg is not None else {}
    merged = {**base, "arch": arch, **overrides}
    return TriNet(ModelConfig(**merged))


def embed(net: nn.Module, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Forward returning (features, embeddings); fails fast on non-finite output."""
    h, z = net(x)
    if not torch.isfinite(h).all() or not torch.isfinite(z).all():
        bad_h = int((~torch.isfinite(h)).sum())
        bad_z = int((~torch.isfinite(z)).sum())
        raise FloatingPointError(
            f"non-finite model outputs: {bad_h} feature and {bad_z} embedding "
            f"entries (batch {tuple(x.shape)})")
    return h, z


class FrozenModel(nn.Module):
    """Immutable deep copy of an encoder+projector pair.

    Parameters never receive gradients, batch norm runs on frozen running
    statistics, and forward passes are executed under no_grad so outputs are
    safe to use as constants in any loss.
    """

    def __init__(self, encoder: nn.Module, projector: nn.Module):
        super().__init__()
        self.encoder = copy.deepcopy(encoder)
        self.projector = copy.deepcopy(projector)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):  # noqa: D102 - keep frozen semantics
        return super().train(False)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        with torch.no_grad():
            h = self.encoder(x)
            z = self.projector(h)
        return h, z


def snapshot(net: TriNet) -> FrozenModel:
    """Freeze a copy of the network's encoder+projector; source unaffected."""
    was_training = net.training
    net.eval()
    frozen = FrozenModel(net.encoder, net.projector)
    if was_training:
        net.train()
    return frozen


class EmaTarget(nn.Module):
    """Momentum-averaged shadow of an online encoder+projector."""

    def __init__(self, net: TriNet):
        super().__init__()
        self.encoder = copy.deepcopy(net.encoder)
        self.projector = copy.deepcopy(net.projector)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        with torch.no_grad():
            h = self.encoder(x)
            z = self.projector(h)
        return h, z


def ema_update(target: EmaTarget, online: TriNet, m: float) -> None:
    """Elementwise target <- m * target + (1 - m) * online, params and buffers."""
    if not 0.0 <= m <= 1.0:
        raise ValueError("momentum must be in [0, 1]")
    pairs = [(target.encoder, online.encoder), (target.projector, online.projector)]
    with torch.no_grad():
        for tgt_mod, src_mod in pairs:
            tgt_params = dict(tgt_mod.named_parameters())
            src_params = dict(src_mod.named_parameters())
            if tgt_params.keys() != src_params.keys():
                raise ValueError("target/online parameter sets differ")
            for name, tp in tgt_params.items():
                sp = src_params[name]
                if tp.shape != sp.shape:
                    raise ValueError(f"shape mismatch for {name}")
                tp.mul_(m).add_(sp, alpha=1.0 - m)
            for (name, tb), (_, sb) in zip(tgt_mod.named_buffers(), src_mod.named_buffers()):
                if tb.dtype.is_floating_point:
                    tb.mul_(m).add_(sb.to(tb.dtype), alpha=1.0 - m)
                else:
                    tb.copy_(sb)


def ema_momentum(base: float, step: int, total_steps: int) -> float:
    """Cosine ramp from ``base`` toward 1 over the training horizon."""
    if total_steps <= 0:
        return base
    frac = min(max(step / total_steps, 0.0), 1.0)
    return 1.0 - (1.0 - base) * (np.cos(np.pi * frac) + 1.0) / 2.0


def state_dict_to_arrays(module: nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    out = {}
    for key, tensor in module.state_dict().items():
        out[prefix + key] = tensor.detach().cpu().numpy()
    return out


def arrays_to_state_dict(arrays: dict[str, np.ndarray], prefix: str = "") -> dict[str, torch.Tensor]:
    out = {}
    for key, arr in arrays.items():
        if key.startswith(prefix):
            out[key[len(prefix):]] = torch.from_numpy(np.ascontiguousarray(arr))
    return out


def save_checkpoint(path, net: TriNet, *, meta: dict,
                    ema: EmaTarget | None = None) -> None:
    """Persist model (and optional EMA target) parameters with run metadata."""
    arrays = state_dict_to_arrays(net, "model/")
    if ema is not None:
        arrays.update(state_dict_to_arrays(ema, "ema/"))
    payload = dict(meta)
    payload["model_config"] = {**net.cfg.__dict__,
                               "mlp_hidden": list(net.cfg.mlp_hidden)}
    payload["has_ema"] = ema is not None
    save_arrays(path, arrays, meta=payload)


def load_checkpoint(path) -> tuple[TriNet, EmaTarget | None, dict]:
    """Rebuild a TriNet (and EMA target if stored) from a checkpoint file."""
    arrays, meta = load_arrays(path)
    cfg_dict = dict(meta["model_config"])
    cfg_dict["mlp_hidden"] = tuple(cfg_dict.get("mlp_hidden", ()))
    cfg = ModelConfig(**cfg_dict)
    net = TriNet(cfg)
    net.load_state_dict(arrays_to_state_dict(arrays, "model/"))
    ema = None
    if meta.get("has_ema"):
        ema = EmaTarget(net)
        ema_sd = arrays_to_state_dict(arrays, "ema/")
        full = {}
        for k, v in ema_sd.items():
            full[k] = v
        ema.load_state_dict(full)
    return net, ema, meta
