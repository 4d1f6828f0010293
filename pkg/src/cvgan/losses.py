"""Loss terms of the CVGAN objective and the named configurations conf1..conf14.

Reductions: batch mean everywhere; KL sums over latent dims; element-wise
squared errors (Recon, Feature, he, hp) are means over elements; the
batch-level feature matching terms (mf, mc) are half squared norms summed
over the feature dimension. Log-probabilities are taken from logits through
``softplus`` identities, e.g. ``-log D = softplus(-logit)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum

import torch
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

N_CLASSES = 32


class Term(str, Enum):
    RECON = "Recon"
    KL = "KL"
    FEATURE = "Feature"
    HE = "he"
    HP = "hp"
    MF = "mf"
    MC = "mc"
    L1 = "L1"
    C = "C"
    D = "d"
    BIN = "Bin"


# inputs each term consumes
REQUIRES = {
    Term.RECON: ("x", "x_recon"),
    Term.KL: ("mu", "logvar"),
    Term.FEATURE: ("fc_real", "fc_recon", "fd_real", "fd_recon"),
    Term.HE: ("x2", "x_recon"),
    Term.HP: ("x2", "x_prior"),
    Term.MF: ("fd_real", "fd_prior"),
    Term.MC: ("centers", "fc_prior", "labels"),
    Term.L1: ("d_recon",),
    Term.C: ("c_real", "labels"),
    Term.D: ("d_real", "d_prior"),
    Term.BIN: ("d_recon",),
}


def _get(inputs: dict, term: Term, name: str):
    v = inputs.get(name)
    if v is None:
        raise ConfigError(f"loss term {term.value} needs input {name!r}")
    return v


def recon_loss(x, x_recon):
    return F.mse_loss(x_recon, x)


def kl_loss(mu, logvar):
    return 0.5 * (mu.pow(2) + logvar.exp() - logvar - 1.0).sum(dim=1).mean()


def feature_loss(fc_real, fc_recon, fd_real, fd_recon):
    # either critic may be absent for unconditional variants
    total = 0.0
    if fc_real is not None:
        total = total + F.mse_loss(fc_recon, fc_real)
    if fd_real is not None:
        total = total + F.mse_loss(fd_recon, fd_real)
    return total


def history_loss(x2, target):
    """Half the mean squared gap between the mean history row and ``target``."""
    return 0.5 * (x2.mean(dim=1) - target).pow(2).mean()


def mean_feature_loss(fd_real, fd_fake):
    return 0.5 * (fd_real.mean(dim=0) - fd_fake.mean(dim=0)).pow(2).sum()


def class_center_loss(centers, fc_fake, labels):
    """Half squared distance between stored real centers and fake class means.

    Only classes present in ``labels`` contribute.
    """
    total = fc_fake.new_zeros(())
    for c in torch.unique(labels):
        fake_mean = fc_fake[labels == c].mean(dim=0)
        total = total + 0.5 * (centers[c] - fake_mean).pow(2).sum()
    return total


def recon_adversarial_loss(d_recon):
    """-E[log(1 - D(x_recon))], a discriminator-side term."""
    return F.softplus(d_recon).mean()


def classifier_loss(c_real, labels):
    return F.cross_entropy(c_real, labels)


def discriminator_loss(d_real, d_prior):
    return F.softplus(-d_real).mean() + F.softplus(d_prior).mean()


def bin_loss(d_recon, c_recon=None, labels=None):
    loss = F.softplus(-d_recon).mean()
    if c_recon is not None:
        loss = loss + F.cross_entropy(c_recon, labels)
    return loss


def loss_term(term: Term | str, inputs: dict) -> torch.Tensor:
    term = Term(term)
    for name in REQUIRES[term]:
        if name in ("fc_real", "fc_recon", "fd_real", "fd_recon"):
            continue
        _get(inputs, term, name)
    g = inputs.get
    if term is Term.RECON:
        return recon_loss(g("x"), g("x_recon"))
    if term is Term.KL:
        return kl_loss(g("mu"), g("logvar"))
    if term is Term.FEATURE:
        has_c = g("fc_real") is not None and g("fc_recon") is not None
        has_d = g("fd_real") is not None and g("fd_recon") is not None
        if not (has_c or has_d):
            raise ConfigError("loss term Feature needs classifier or discriminator features")
        return feature_loss(
            g("fc_real") if has_c else None, g("fc_recon"), g("fd_real") if has_d else None, g("fd_recon")
        )
    if term is Term.HE:
        return history_loss(g("x2"), g("x_recon"))
    if term is Term.HP:
        return history_loss(g("x2"), g("x_prior"))
    if term is Term.MF:
        return mean_feature_loss(g("fd_real"), g("fd_prior"))
    if term is Term.MC:
        centers = g("centers")
        if isinstance(centers, ClassCenterState):
            centers = centers.centers
        return class_center_loss(centers, g("fc_prior"), g("labels"))
    if term is Term.L1:
        return recon_adversarial_loss(g("d_recon"))
    if term is Term.C:
        return classifier_loss(g("c_real"), g("labels"))
    if term is Term.D:
        return discriminator_loss(g("d_real"), g("d_prior"))
    if term is Term.BIN:
        c = g("c_recon")
        if c is not None:
            _get(inputs, term, "labels")
        return bin_loss(g("d_recon"), c, g("labels"))
    raise ConfigError(f"unhandled loss term {term}")


# ---------------------------------------------------------------------------
# class centers


@dataclass
class ClassCenterState:
    centers: torch.Tensor  # (n_classes, m)
    decay: float = 0.9
    counts: torch.Tensor | None = None

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ConfigError("center decay must lie in (0, 1)")
        if self.counts is None:
            self.counts = torch.zeros(self.centers.shape[0], dtype=torch.long)

    @classmethod
    def empty(cls, feature_dim: int, n_classes: int = N_CLASSES, decay: float = 0.9) -> "ClassCenterState":
        return cls(torch.zeros(n_classes, feature_dim), decay)


@torch.no_grad()
def update_class_centers(state: ClassCenterState, class_features: torch.Tensor, labels: torch.Tensor) -> ClassCenterState:
    if class_features.shape[1] != state.centers.shape[1]:
        raise ShapeError(f"feature width {class_features.shape[1]} != center width {state.centers.shape[1]}")
    centers = state.centers.clone()
    counts = state.counts.clone()
    feats = class_features.detach().to(centers.dtype)
    for c in torch.unique(labels):
        mean = feats[labels == c].mean(dim=0)
        if counts[c] == 0:
            centers[c] = mean
        else:
            centers[c] = state.decay * centers[c] + (1.0 - state.decay) * mean
        counts[c] += int((labels == c).sum())
    return ClassCenterState(centers, state.decay, counts)


# ---------------------------------------------------------------------------
# configurations

# VAE-side extras and discriminator-side terms per named configuration.
# Recon and KL are always on the VAE side and d always on the discriminator.
TABLE = {
    "conf1": (("Bin",), ("d",)),
    "conf2": (("Feature", "mc", "hp"), ("d",)),
    "conf3": (("Bin",), ("d", "L1")),
    "conf4": (("Feature", "mc", "hp", "he"), ("d",)),
    "conf5": (("Bin", "mc"), ("d", "L1")),
    "conf6": (("Bin", "mc", "mf", "he"), ("d",)),
    "conf7": (("Bin", "mc", "mf"), ("d", "L1")),
    "conf8": (("Feature", "mc", "mf"), ("d", "L1")),
    "conf9": (("Feature",), ("d",)),
    "conf10": (("Bin", "mc", "mf"), ("d",)),
    "conf11": (("Bin", "mc", "mf", "hp"), ("d",)),
    "conf12": (("Bin", "mc"), ("d",)),
    "conf13": (("Bin", "mc", "hp"), ("d",)),
    "conf14": (("Feature", "mc"), ("d",)),
}
DEFAULT_CONFIG = "conf9"

VAE_SIDE = {Term.RECON, Term.KL, Term.FEATURE, Term.HE, Term.HP, Term.MF, Term.MC, Term.BIN}
DISC_SIDE = {Term.D, Term.L1}


@dataclass
class LossConfig:
    name: str
    vae_terms: dict = field(default_factory=dict)  # Term -> weight
    disc_terms: dict = field(default_factory=dict)
    classifier_term_enabled: bool = True
    classifier_weight: float = 1.0

    def __post_init__(self):
        self.vae_terms = {Term(t): float(w) for t, w in self.vae_terms.items()}
        self.disc_terms = {Term(t): float(w) for t, w in self.disc_terms.items()}
        self.vae_terms.setdefault(Term.RECON, 1.0)
        self.vae_terms.setdefault(Term.KL, 1.0)
        self.disc_terms.setdefault(Term.D, 1.0)
        bad = [t.value for t in self.vae_terms if t not in VAE_SIDE] + [t.value for t in self.disc_terms if t not in DISC_SIDE]
        if bad:
            raise ConfigError(f"{self.name}: terms on the wrong side: {bad}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "vae_terms": {t.value: w for t, w in sorted(self.vae_terms.items(), key=lambda kv: kv[0].value)},
            "disc_terms": {t.value: w for t, w in sorted(self.disc_terms.items(), key=lambda kv: kv[0].value)},
            "classifier_term_enabled": self.classifier_term_enabled,
            "classifier_weight": self.classifier_weight,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(**d)

    def with_weight(self, term: Term | str, weight: float) -> "LossConfig":
        term = Term(term)
        vae, disc = dict(self.vae_terms), dict(self.disc_terms)
        (vae if term in VAE_SIDE else disc)[term] = float(weight)
        return replace(self, vae_terms=vae, disc_terms=disc)

    def with_terms(self, *terms) -> "LossConfig":
        cfg = self
        for t in terms:
            cfg = cfg.with_weight(t, 1.0)
        return cfg


def compose_config(name: str, weights: dict | None = None) -> LossConfig:
    if name not in TABLE:
        raise ConfigError(f"unknown loss configuration {name!r}")
    vae, disc = TABLE[name]
    cfg = LossConfig(name, {t: 1.0 for t in vae}, {t: 1.0 for t in disc})
    for term, w in (weights or {}).items():
        cfg = cfg.with_weight(term, w)
    return cfg


def total_losses(config: LossConfig, inputs: dict):
    """Weighted sums per component.

    Returns ``(vae_loss, disc_loss, classifier_loss, breakdown)`` where the
    breakdown maps each evaluated term to its unweighted value. A component
    with no inputs available (e.g. no discriminator outputs) yields None.
    """
    breakdown = {}

    def side(terms):
        if not terms:
            return None
        total = 0.0
        for term, w in terms.items():
            v = loss_term(term, inputs)
            breakdown[term.value] = v
            total = total + w * v
        return total

    vae = side(config.vae_terms)
    disc = side(config.disc_terms) if inputs.get("d_real") is not None else None
    cls = None
    if config.classifier_term_enabled and inputs.get("c_real") is not None:
        cls = config.classifier_weight * loss_term(Term.C, inputs)
        breakdown[Term.C.value] = cls
    return vae, disc, cls, breakdown


def restrict_to_variant(config: LossConfig, has_encoder: bool, has_discriminator: bool, has_classifier: bool) -> LossConfig:
    """Drop terms whose networks a variant lacks.

    Decoder-only variants replace the reconstruction-based objective with the
    adversarial generator loss evaluated on prior samples (see trainer).
    """
    vae = dict(config.vae_terms)
    disc = dict(config.disc_terms)
    if not has_discriminator:
        for t in (Term.FEATURE, Term.MF, Term.BIN):
            vae.pop(t, None)
        disc = {}
    if not has_classifier:
        vae.pop(Term.MC, None)
    if not has_encoder:
        for t in (Term.RECON, Term.KL, Term.FEATURE, Term.HE):
            vae.pop(t, None)
        disc.pop(Term.L1, None)
        if has_discriminator:
            vae.setdefault(Term.BIN, 1.0)
    out = LossConfig.__new__(LossConfig)
    out.name = config.name
    out.vae_terms = vae
    out.disc_terms = disc
    out.classifier_term_enabled = config.classifier_term_enabled and has_classifier
    out.classifier_weight = config.classifier_weight
    return out
