"""CVGAN component networks, condition adapters and ablation variants.

All networks are 1-D convolutional over the ``n_feature`` axis. Conditions
enter by channel concatenation: the history block contributes ``2k`` channels,
the HI class a single learned embedding channel.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ContractError, RangeError, ShapeError

logger = logging.getLogger(__name__)

N_CLASSES = 32
DOWNSAMPLE = 16  # four stride-2 stages
CHECKPOINT_FORMAT = 1

# cond: "full" = history + class, "class" = class only, "none" = unconditional
VARIANTS = {
    "CVGAN": dict(cond="full", encoder=True, discriminator=True, classifier=True, channel_scale=1.0),
    "CVAE": dict(cond="full", encoder=True, discriminator=False, classifier=False, channel_scale=1.0),
    "CGAN": dict(cond="full", encoder=False, discriminator=True, classifier=True, channel_scale=1.0),
    "CVGAN_no_H": dict(cond="class", encoder=True, discriminator=True, classifier=True, channel_scale=1.0),
    "GAN": dict(cond="none", encoder=False, discriminator=True, classifier=False, channel_scale=0.5),
    "VAE": dict(cond="none", encoder=True, discriminator=False, classifier=False, channel_scale=0.5),
    "VGAN": dict(cond="none", encoder=True, discriminator=True, classifier=False, channel_scale=0.5),
}

ENCODER_CHANNELS = (16, 32, 64, 128, 32)
ENCODER_STRIDES = (2, 2, 2, 2, 1)
GENERATOR_CHANNELS = (256, 128, 64, 32, 16)
DISCRIMINATOR_LAST = 32
CLASSIFIER_LAST = 256


@dataclass
class NetConfig:
    variant: str = "CVGAN"
    k: int = 15
    n_feature: int = 512
    latent_dim: int | None = None
    channel_scale: float | None = None
    slope: float = 0.2
    dropout: float = 0.5
    n_classes: int = N_CLASSES

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {sorted(VARIANTS)}")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.n_feature % DOWNSAMPLE:
            raise ConfigError(f"n_feature must be a multiple of {DOWNSAMPLE}, got {self.n_feature}")
        if self.latent_dim is None:
            self.latent_dim = self.n_feature // DOWNSAMPLE
        # z enters the generator as one channel of the downsampled length
        if self.latent_dim != self.n_feature // DOWNSAMPLE:
            raise ConfigError(
                f"latent_dim must equal n_feature/{DOWNSAMPLE}={self.n_feature // DOWNSAMPLE}, got {self.latent_dim}"
            )
        if self.channel_scale is None:
            self.channel_scale = VARIANTS[self.variant]["channel_scale"]

    @property
    def cond(self) -> str:
        return VARIANTS[self.variant]["cond"]

    @property
    def base_len(self) -> int:
        return self.n_feature // DOWNSAMPLE


@dataclass
class Condition:
    """HI class per sample plus the optional ``(B, k, 2, n_feature)`` history."""

    hi_class: torch.Tensor
    history: torch.Tensor | None = None


@dataclass
class LatentCode:
    mu: torch.Tensor
    logvar: torch.Tensor
    z: torch.Tensor | None = None
    noise: torch.Tensor | None = None


def _ch(c: int, scale: float) -> int:
    return max(1, int(round(c * scale)))


class ClassAdapter(nn.Module):
    """Learned lookup from HI class to a ``1 x length`` embedding channel."""

    def __init__(self, length: int, n_classes: int = N_CLASSES):
        super().__init__()
        self.length = length
        self.table = nn.Embedding(n_classes, length)

    def forward(self, hi_class: torch.Tensor) -> torch.Tensor:
        hi_class = torch.as_tensor(hi_class, dtype=torch.long)
        if hi_class.numel() and (hi_class.min() < 0 or hi_class.max() >= self.table.num_embeddings):
            raise RangeError(f"HI class outside [0, {self.table.num_embeddings - 1}]")
        return self.table(hi_class).unsqueeze(1)


def conv_block(cin, cout, stride, slope):
    return nn.Sequential(
        nn.Conv1d(cin, cout, kernel_size=3, stride=stride, padding=1),
        nn.BatchNorm1d(cout),
        nn.LeakyReLU(slope),
    )


def deconv_block(cin, cout, stride, slope):
    return nn.Sequential(
        nn.ConvTranspose1d(cin, cout, kernel_size=3, stride=stride, padding=1, output_padding=stride - 1),
        nn.BatchNorm1d(cout),
        nn.LeakyReLU(slope),
    )


class Backbone(nn.Module):
    def __init__(self, in_ch: int, channels, strides=ENCODER_STRIDES, slope: float = 0.2):
        super().__init__()
        layers = []
        c = in_ch
        for cout, s in zip(channels, strides):
            layers.append(conv_block(c, cout, s, slope))
            c = cout
        self.blocks = nn.Sequential(*layers)
        self.out_channels = c

    def forward(self, x):
        return self.blocks(x)


class _Conditioned(nn.Module):
    """Shared plumbing that turns a Condition into extra input channels."""

    def __init__(self, cfg: NetConfig, length: int):
        super().__init__()
        self.cfg = cfg
        self.length = length
        self.adapter = ClassAdapter(length, cfg.n_classes) if cfg.cond != "none" else None

    @property
    def cond_channels(self) -> int:
        return {"full": 2 * self.cfg.k + 1, "class": 1, "none": 0}[self.cfg.cond]

    def condition_input(self, cond: Condition | None, batch: int) -> list[torch.Tensor]:
        mode = self.cfg.cond
        if mode == "none":
            if cond is not None:
                raise ContractError(f"variant {self.cfg.variant} is unconditional and rejects conditions")
            return []
        if cond is None:
            raise ContractError(f"variant {self.cfg.variant} requires a condition")
        cls = self.adapter(cond.hi_class)
        if cls.shape[0] != batch:
            raise ShapeError(f"condition batch {cls.shape[0]} != input batch {batch}")
        if mode == "class":
            return [cls]
        h = cond.history
        k, nf = self.cfg.k, self.cfg.n_feature
        if h is None:
            raise ContractError(f"variant {self.cfg.variant} requires a history block")
        if tuple(h.shape[1:]) != (k, 2, nf) or h.shape[0] != batch:
            raise ShapeError(f"history must be ({batch}, {k}, 2, {nf}), got {tuple(h.shape)}")
        h = h.reshape(batch, 2 * k, nf)
        if self.length != nf:
            h = F.avg_pool1d(h, nf // self.length)
        return [h, cls]


def _check_signal(x: torch.Tensor, cfg: NetConfig, channels: int = 2):
    if x.dim() != 3 or x.shape[1] != channels or x.shape[2] != cfg.n_feature:
        raise ShapeError(f"signal must be (B, {channels}, {cfg.n_feature}), got {tuple(x.shape)}")


class Encoder(_Conditioned):
    def __init__(self, cfg: NetConfig, in_signal: int = 2):
        super().__init__(cfg, cfg.n_feature)
        s = cfg.channel_scale
        self.in_signal = in_signal
        chans = [_ch(c, s) for c in ENCODER_CHANNELS]
        self.backbone = Backbone(in_signal + self.cond_channels, chans, ENCODER_STRIDES, cfg.slope)
        flat = chans[-1] * cfg.base_len
        self.mu = nn.Linear(flat, cfg.latent_dim)
        self.logvar = nn.Linear(flat, cfg.latent_dim)

    def forward(self, x, cond=None):
        _check_signal(x, self.cfg, self.in_signal)
        h = torch.cat([x, *self.condition_input(cond, x.shape[0])], dim=1)
        h = torch.sigmoid(self.backbone(h)).flatten(1)
        return self.mu(h), self.logvar(h)


class Generator(_Conditioned):
    def __init__(self, cfg: NetConfig, out_signal: int = 2):
        super().__init__(cfg, cfg.base_len)
        s = cfg.channel_scale
        chans = [_ch(c, s) for c in GENERATOR_CHANNELS]
        self.out_signal = out_signal
        self.stem = deconv_block(self.cond_channels + 1, chans[0], 1, cfg.slope)
        self.up = nn.Sequential(*[deconv_block(a, b, 2, cfg.slope) for a, b in zip(chans[:-1], chans[1:])])
        self.head = nn.ConvTranspose1d(chans[-1], out_signal, kernel_size=3, stride=1, padding=1)

    def forward(self, z, cond=None):
        if z.dim() != 2 or z.shape[1] != self.cfg.latent_dim:
            raise ShapeError(f"z must be (B, {self.cfg.latent_dim}), got {tuple(z.shape)}")
        h = torch.cat([*self.condition_input(cond, z.shape[0]), z.unsqueeze(1)], dim=1)
        return torch.sigmoid(self.head(self.up(self.stem(h))))


class Critic(_Conditioned):
    """Discriminator (1 output) or classifier (n_classes outputs)."""

    def __init__(self, cfg: NetConfig, last_channels: int, n_out: int):
        super().__init__(cfg, cfg.n_feature)
        s = cfg.channel_scale
        chans = [_ch(c, s) for c in ENCODER_CHANNELS[:-1]] + [_ch(last_channels, s)]
        self.backbone = Backbone(2 + self.cond_channels, chans, ENCODER_STRIDES, cfg.slope)
        self.drop = nn.Dropout(cfg.dropout)
        self.fc = nn.Linear(chans[-1], n_out)
        self.feature_dim = chans[-1]

    def forward(self, x, cond=None):
        _check_signal(x, self.cfg)
        h = torch.cat([x, *self.condition_input(cond, x.shape[0])], dim=1)
        feats = self.backbone(h).mean(dim=2)
        return self.fc(self.drop(feats)), feats


def reparameterize(mu: torch.Tensor, logvar: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    if mu.shape != logvar.shape or mu.shape != noise.shape:
        raise ShapeError(f"mu {tuple(mu.shape)}, logvar {tuple(logvar.shape)}, noise {tuple(noise.shape)} differ")
    return mu + torch.exp(0.5 * logvar) * noise


class ModelBundle(nn.Module):
    """The sub-networks one ablation variant needs, with gated access."""

    def __init__(self, cfg: NetConfig, seed_lineage: list | None = None):
        super().__init__()
        self.cfg = cfg
        spec = VARIANTS[cfg.variant]
        self.encoder = Encoder(cfg) if spec["encoder"] else None
        self.generator = Generator(cfg)
        self.discriminator = Critic(cfg, DISCRIMINATOR_LAST, 1) if spec["discriminator"] else None
        self.classifier = Critic(cfg, CLASSIFIER_LAST, cfg.n_classes) if spec["classifier"] else None
        self.seed_lineage = list(seed_lineage or [])

    @property
    def variant(self) -> str:
        return self.cfg.variant

    @property
    def conditional(self) -> bool:
        return self.cfg.cond != "none"

    def _need(self, name: str) -> nn.Module:
        net = getattr(self, name)
        if net is None:
            raise ContractError(f"variant {self.variant} has no {name}")
        return net

    def has(self, name: str) -> bool:
        return getattr(self, name) is not None

    def encode(self, x, cond=None) -> LatentCode:
        mu, logvar = self._need("encoder")(x, cond)
        return LatentCode(mu, logvar)

    def generate(self, z, cond=None):
        return self.generator(z, cond)

    def discriminate(self, x, cond=None):
        logit, feats = self._need("discriminator")(x, cond)
        return logit.squeeze(1), feats

    def classify(self, x, cond=None):
        return self._need("classifier")(x, cond)

    def vae_parameters(self):
        nets = [self.encoder, self.generator]
        return [p for n in nets if n is not None for p in n.parameters()]

    def hyperparameters(self) -> dict:
        return asdict(self.cfg)


def build_model(variant: str, k: int = 15, n_feature: int = 512, seed: int | None = None, **overrides) -> ModelBundle:
    cfg = NetConfig(variant=variant, k=k, n_feature=n_feature, **overrides)
    if seed is None:
        return ModelBundle(cfg)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ModelBundle(cfg, seed_lineage=[seed])


class InitialGenerator(nn.Module):
    """Unconditional VAE over whole ``k x 2 x n_feature`` healthy windows.

    Samples from it seed the history buffer of an autoregressive rollout.
    """

    def __init__(self, k: int = 15, n_feature: int = 512, channel_scale: float = 1.0, slope: float = 0.2):
        super().__init__()
        self.cfg = NetConfig(variant="VAE", k=k, n_feature=n_feature, channel_scale=channel_scale, slope=slope)
        self.encoder = Encoder(self.cfg, in_signal=2 * k)
        self.generator = Generator(self.cfg, out_signal=2 * k)
        self.trained = False
        self.seed_lineage: list = []

    @property
    def k(self) -> int:
        return self.cfg.k

    def encode(self, windows: torch.Tensor) -> LatentCode:
        b = windows.shape[0]
        mu, logvar = self.encoder(windows.reshape(b, 2 * self.k, self.cfg.n_feature))
        return LatentCode(mu, logvar)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        out = self.generator(z)
        return out.reshape(z.shape[0], self.k, 2, self.cfg.n_feature)

    def vae_parameters(self):
        return list(self.parameters())

    def hyperparameters(self) -> dict:
        return {"k": self.cfg.k, "n_feature": self.cfg.n_feature, "channel_scale": self.cfg.channel_scale, "slope": self.cfg.slope}


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, model: nn.Module, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    kind = "initial" if isinstance(model, InitialGenerator) else "bundle"
    payload = {
        "format": CHECKPOINT_FORMAT,
        "kind": kind,
        "variant": "INIT" if kind == "initial" else model.variant,
        "hyper": model.hyperparameters(),
        "state": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "seed_lineage": list(getattr(model, "seed_lineage", [])),
        "trained": bool(getattr(model, "trained", True)),
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path, expect: dict | None = None):
    """Rebuild a model from a checkpoint; ``expect`` pins hyperparameters."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: unsupported checkpoint format {payload.get('format')!r}")
    hyper = payload["hyper"]
    for key, want in (expect or {}).items():
        if key in hyper and hyper[key] != want:
            raise ConfigError(f"{path}: checkpoint {key}={hyper[key]!r} does not match expected {want!r}")
    if payload["kind"] == "initial":
        model = InitialGenerator(**hyper)
    else:
        model = ModelBundle(NetConfig(**hyper))
    model.load_state_dict(payload["state"])
    model.seed_lineage = payload["seed_lineage"]
    model.trained = payload["trained"]
    model.eval()
    return model


def clone_model(model: nn.Module) -> nn.Module:
    return copy.deepcopy(model)
