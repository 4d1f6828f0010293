"""Training regimes for CVGAN-family bundles.

One optimization step runs in a fixed order: discriminator, classifier, then
encoder/generator. Fakes are produced once per step; the critics see them
detached, and the generator-side loss reuses the same graph through the
freshly updated critics.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .dataset import BearingLifecycle, WindowSet, dataset_fingerprint
from .errors import ConfigError, ContractError, InsufficientDataError, NumericalError
from .losses import (
    REQUIRES,
    ClassCenterState,
    LossConfig,
    Term,
    compose_config,
    kl_loss,
    loss_term,
    recon_loss,
    restrict_to_variant,
    total_losses,
    update_class_centers,
)
from .nets import N_CLASSES, Condition, Critic, InitialGenerator, ModelBundle, NetConfig, reparameterize, save_checkpoint

logger = logging.getLogger(__name__)

MODES = ("non_ar", "ar", "ar_finetune_full", "ar_finetune_no_C", "ar_finetune_no_DC")
PAPER_SEEDS = (15, 25, 35, 45, 55)

FROZEN_IN_FINETUNE = {
    "ar_finetune_full": (),
    "ar_finetune_no_C": ("classifier",),
    "ar_finetune_no_DC": ("discriminator", "classifier"),
}


@dataclass
class TrainPlan:
    mode: str = "non_ar"
    epochs: int = 100
    early_stop_patience: int = 30
    batch_size: int = 1024
    lr_gen: float = 6e-4
    lr_dc: float = 2e-4
    seed: int = 15
    finetune_epochs: int = 1
    val_fraction: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    grad_clip: float | None = None
    center_decay: float = 0.9

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown training mode {self.mode!r}; expected one of {MODES}")
        if self.epochs < 1 or self.batch_size < 1 or self.early_stop_patience < 1:
            raise ConfigError("epochs, batch_size and early_stop_patience must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")
        self.betas = tuple(self.betas)


@dataclass
class RunManifest:
    plan: dict
    loss_config: dict
    variant: str
    dataset_fingerprint: str
    epochs: list = field(default_factory=list)
    best_epoch: int | None = None
    best_score: float | None = None
    early_stop_epoch: int | None = None
    checkpoint_paths: list = field(default_factory=list)
    wall_clock_s: float = 0.0
    status: str = "running"
    message: str = ""
    extra: dict = field(default_factory=dict)

    def append_epoch(self, record: dict):
        self.epochs.append(dict(record))

    def loss_trace(self) -> list[dict]:
        return [dict(r) for r in self.epochs]

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, run_dir: str | Path):
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "manifest.json").write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True, default=str))
        keys = sorted({k for r in self.epochs for k in r})
        with open(run_dir / "loss_trace.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            for r in self.epochs:
                w.writerow(r)


def param_fingerprint(module: nn.Module | None) -> str:
    h = hashlib.sha1()
    if module is not None:
        for name, p in sorted(module.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _split(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * fraction))
    if fraction > 0 and n_val == 0 and n > 1:
        n_val = 1
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _condition(model: ModelBundle, x2: torch.Tensor, cls: torch.Tensor) -> Condition | None:
    mode = model.cfg.cond
    if mode == "none":
        return None
    if mode == "class":
        return Condition(cls)
    return Condition(cls, x2)


def _needed_inputs(config: LossConfig) -> set[str]:
    need = set()
    for t in list(config.vae_terms) + list(config.disc_terms):
        need.update(REQUIRES[t])
    if Term.BIN in config.vae_terms:
        need.add("c_recon")
    return need


def _check_finite(value: torch.Tensor, what: str):
    if not torch.isfinite(value).all():
        raise NumericalError(f"non-finite {what}")


class _Stepper:
    """Holds optimizers and class-center state for one bundle and loss config."""

    def __init__(self, model: ModelBundle, config: LossConfig, plan: TrainPlan):
        self.model = model
        self.plan = plan
        self.config = restrict_to_variant(
            config, model.has("encoder"), model.has("discriminator"), model.has("classifier")
        )
        self.need = _needed_inputs(self.config)
        opt = lambda params, lr: torch.optim.AdamW(params, lr=lr, betas=plan.betas, weight_decay=plan.weight_decay)
        self.opt_vae = opt(model.vae_parameters(), plan.lr_gen)
        self.opt_d = opt(model.discriminator.parameters(), plan.lr_dc) if model.has("discriminator") else None
        self.opt_c = opt(model.classifier.parameters(), plan.lr_dc) if model.has("classifier") else None
        self.centers = (
            ClassCenterState.empty(model.classifier.feature_dim, N_CLASSES, plan.center_decay)
            if model.has("classifier")
            else None
        )
        self.frozen: tuple[str, ...] = ()

    def freeze(self, names: Sequence[str]):
        self.frozen = tuple(names)
        for name in self.frozen:
            net = getattr(self.model, name)
            if net is not None:
                net.eval()
                net.requires_grad_(False)

    def _clip(self, params):
        if self.plan.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, self.plan.grad_clip)

    def _generator_side(self, x, x2, cls, gen: torch.Generator):
        m = self.model
        cond = _condition(m, x2, cls)
        out = {"x": x, "x2": x2, "labels": cls, "centers": self.centers}
        latent = m.cfg.latent_dim
        b = x.shape[0]
        if m.has("encoder"):
            code = m.encode(x, cond)
            eps = torch.randn(b, latent, generator=gen)
            out["mu"], out["logvar"] = code.mu, code.logvar
            out["x_recon"] = m.generate(reparameterize(code.mu, code.logvar, eps), cond)
        if m.has("discriminator") or {"x_prior", "fd_prior", "fc_prior", "d_prior"} & self.need or not m.has("encoder"):
            zp = torch.randn(b, latent, generator=gen)
            out["x_prior"] = m.generate(zp, cond)
        if not m.has("encoder"):
            # decoder-only variants: the prior sample stands in for the reconstruction
            out["x_recon"] = out["x_prior"]
        return out, cond

    def step(self, x, x2, cls, gen: torch.Generator) -> dict:
        m = self.model
        record = {}
        out, cond = self._generator_side(x, x2, cls, gen)

        if m.has("discriminator") and "discriminator" not in self.frozen:
            d_real, _ = m.discriminate(x, cond)
            d_prior, _ = m.discriminate(out["x_prior"].detach(), cond)
            dins = {"d_real": d_real, "d_prior": d_prior}
            if Term.L1 in self.config.disc_terms:
                dins["d_recon"], _ = m.discriminate(out["x_recon"].detach(), cond)
            loss = sum(w * _disc_term(t, dins) for t, w in self.config.disc_terms.items())
            _check_finite(loss, "discriminator loss")
            self.opt_d.zero_grad(set_to_none=True)
            loss.backward()
            self._clip(m.discriminator.parameters())
            self.opt_d.step()
            record["disc"] = loss.item()

        fc_real = None
        if m.has("classifier") and self.config.classifier_term_enabled and "classifier" not in self.frozen:
            c_real, fc_real = m.classify(x, cond)
            loss = self.config.classifier_weight * nn.functional.cross_entropy(c_real, cls)
            _check_finite(loss, "classifier loss")
            self.opt_c.zero_grad(set_to_none=True)
            loss.backward()
            self._clip(m.classifier.parameters())
            self.opt_c.step()
            record["cls"] = loss.item()
            fc_real = fc_real.detach()

        inputs = self._critic_features(out, cond, fc_real)
        vae, _, _, parts = total_losses(_vae_only(self.config), inputs)
        _check_finite(vae, "generator-side loss")
        self.opt_vae.zero_grad(set_to_none=True)
        vae.backward()
        self._clip(m.vae_parameters())
        self.opt_vae.step()
        record["vae"] = vae.item()
        for k, v in parts.items():
            record[f"term_{k}"] = v.item()

        if self.centers is not None and "classifier" not in self.frozen:
            if fc_real is None:
                with torch.no_grad():
                    _, fc_real = m.classify(x, cond)
            self.centers = update_class_centers(self.centers, fc_real, cls)
        return record

    def _critic_features(self, out: dict, cond, fc_real=None) -> dict:
        m = self.model
        need = self.need
        x = out["x"]
        if m.has("discriminator"):
            if {"fd_real"} & need:
                with torch.no_grad():
                    out["fd_real"] = m.discriminate(x, cond)[1]
            if {"d_recon", "fd_recon"} & need:
                out["d_recon"], out["fd_recon"] = m.discriminate(out["x_recon"], cond)
            if "fd_prior" in need:
                out["fd_prior"] = m.discriminate(out["x_prior"], cond)[1]
        if m.has("classifier"):
            if "fc_real" in need:
                if fc_real is None:
                    with torch.no_grad():
                        fc_real = m.classify(x, cond)[1]
                out["fc_real"] = fc_real
            if {"fc_recon", "c_recon"} & need:
                out["c_recon"], out["fc_recon"] = m.classify(out["x_recon"], cond)
            if "fc_prior" in need:
                out["fc_prior"] = m.classify(out["x_prior"], cond)[1]
        out["centers"] = self.centers
        return out

    @torch.no_grad()
    def validation_score(self, windows: WindowSet, rows: np.ndarray, seed: int, histories=None) -> float:
        """Generator-side loss on held-out windows, eval mode, fixed noise."""
        if len(rows) == 0:
            return math.nan
        m = self.model
        was_training = {n: getattr(m, n).training for n in ("encoder", "generator", "discriminator", "classifier") if m.has(n)}
        m.eval()
        gen = torch.Generator().manual_seed(seed + 7919)
        total, count = 0.0, 0
        for chunk in np.array_split(rows, max(1, math.ceil(len(rows) / self.plan.batch_size))):
            x, x2, cls = _tensors(windows, chunk, histories)
            out, cond = self._generator_side(x, x2, cls, gen)
            inputs = self._critic_features(out, cond)
            vae, _, _, _ = total_losses(_vae_only(self.config), inputs)
            total += float(vae) * len(chunk)
            count += len(chunk)
        for n, flag in was_training.items():
            getattr(m, n).train(flag and n not in self.frozen)
        return total / count

    def set_train(self):
        self.model.train()
        for name in self.frozen:
            net = getattr(self.model, name)
            if net is not None:
                net.eval()


def _disc_term(term: Term, dins: dict) -> torch.Tensor:
    return loss_term(term, dins)


def _vae_only(config: LossConfig) -> LossConfig:
    out = copy.copy(config)
    out.disc_terms = {}
    out.classifier_term_enabled = False
    return out


def _tensors(windows: WindowSet, rows, histories=None):
    x, x2, _, cls = windows.batch(rows, histories)
    return torch.from_numpy(x), torch.from_numpy(x2), torch.from_numpy(cls)


@torch.no_grad()
def self_rollout_histories(model: ModelBundle, lifecycles: Sequence[BearingLifecycle], k: int, seed: int) -> list[np.ndarray]:
    """Replace each lifecycle's series after position k with the model's own rollout.

    The first k rows stay real; every later row is generated from the last k
    rows of the same rollout and the lifecycle's own class at that step.
    Returned arrays are used only as history sources.
    """
    was = model.training
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    outs = [lc.series.copy() for lc in lifecycles]
    lengths = np.array([len(lc) for lc in lifecycles])
    buf = torch.from_numpy(np.stack([lc.series[:k] for lc in lifecycles]).astype(np.float32))
    for t in range(k, int(lengths.max())):
        alive = np.flatnonzero(lengths > t)
        cls = torch.as_tensor([int(lifecycles[j].hi_class[t]) for j in alive])
        h = buf[alive]
        z = torch.randn(len(alive), model.cfg.latent_dim, generator=gen)
        x = model.generate(z, _condition(model, h, cls))
        _check_finite(x, f"rollout output at step {t}")
        buf[alive] = torch.cat([h[:, 1:], x.unsqueeze(1)], dim=1)
        for i, j in enumerate(alive):
            outs[j][t] = x[i].numpy()
    model.train(was)
    return outs


def train(
    model: ModelBundle,
    windows: WindowSet,
    config: LossConfig | str,
    plan: TrainPlan,
    run_dir: str | Path | None = None,
    log_every: int = 1,
) -> tuple[ModelBundle, RunManifest]:
    """Train ``model`` on ``windows`` according to ``plan``.

    Returns the model with its best (lowest validation score) weights restored
    and the run manifest. ``run_dir`` receives manifest, loss trace and the
    best checkpoint when given.
    """
    if isinstance(config, str):
        config = compose_config(config)
    if len(windows) == 0:
        raise InsufficientDataError("no training windows")
    if plan.mode != "non_ar" and model.cfg.cond != "full":
        raise ContractError(f"mode {plan.mode} rebuilds histories and needs a history-conditioned variant, not {model.variant}")
    if windows.k != model.cfg.k or windows.n_feature != model.cfg.n_feature:
        raise ContractError(
            f"windows (k={windows.k}, n_feature={windows.n_feature}) do not match model "
            f"(k={model.cfg.k}, n_feature={model.cfg.n_feature})"
        )

    torch.manual_seed(plan.seed)
    gen = torch.Generator().manual_seed(plan.seed)
    rng = np.random.default_rng(plan.seed)
    train_rows, val_rows = _split(len(windows), plan.val_fraction, plan.seed)
    if len(val_rows) == 0:
        val_rows = train_rows
    stepper = _Stepper(model, config, plan)
    manifest = RunManifest(
        plan=asdict(plan),
        loss_config=stepper.config.to_dict() | {"requested": config.to_dict()},
        variant=model.variant,
        dataset_fingerprint=dataset_fingerprint(windows.lifecycles),
    )
    t0 = time.time()

    def run_epoch(epoch: int, phase: str, histories=None):
        stepper.set_train()
        order = rng.permutation(train_rows)
        sums: dict[str, float] = {}
        n = 0
        for start in range(0, len(order), plan.batch_size):
            rows = order[start : start + plan.batch_size]
            if len(rows) < 2:
                continue  # batch-norm needs two samples
            x, x2, cls = _tensors(windows, rows, histories)
            rec = stepper.step(x, x2, cls, gen)
            for key, v in rec.items():
                sums[key] = sums.get(key, 0.0) + v * len(rows)
            n += len(rows)
        record = {"epoch": epoch, "phase": phase}
        record.update({k: v / max(n, 1) for k, v in sorted(sums.items())})
        record["val"] = stepper.validation_score(windows, val_rows, plan.seed, histories)
        if not math.isfinite(record["val"]):
            raise NumericalError(f"non-finite validation score at epoch {epoch}")
        manifest.append_epoch(record)
        if log_every and epoch % log_every == 0:
            logger.info("%s epoch %d: %s", phase, epoch, {k: round(v, 5) for k, v in record.items() if isinstance(v, float)})
        return record

    try:
        best_state = copy.deepcopy(model.state_dict())
        best, best_epoch = math.inf, -1
        main_mode = "ar" if plan.mode == "ar" else "non_ar"
        for epoch in range(plan.epochs):
            histories = None
            if main_mode == "ar":
                histories = self_rollout_histories(model, windows.lifecycles, windows.k, plan.seed * 100003 + epoch)
            rec = run_epoch(epoch, main_mode, histories)
            if rec["val"] < best:
                best, best_epoch = rec["val"], epoch
                best_state = copy.deepcopy(model.state_dict())
            elif epoch - best_epoch >= plan.early_stop_patience:
                manifest.early_stop_epoch = epoch
                break
        model.load_state_dict(best_state)
        manifest.best_epoch, manifest.best_score = best_epoch, best

        if plan.mode.startswith("ar_finetune"):
            stepper.freeze(FROZEN_IN_FINETUNE[plan.mode])
            for i in range(plan.finetune_epochs):
                histories = self_rollout_histories(model, windows.lifecycles, windows.k, plan.seed * 100003 + 50000 + i)
                run_epoch(plan.epochs + i, "ar_finetune", histories)
            for name in stepper.frozen:
                getattr(model, name).requires_grad_(True)
    except NumericalError as err:
        manifest.status = "aborted"
        manifest.message = str(err)
        manifest.wall_clock_s = time.time() - t0
        if run_dir is not None:
            manifest.write(run_dir)
        raise

    model.eval()
    model.seed_lineage = list(model.seed_lineage) + [plan.seed]
    manifest.status = "complete"
    manifest.wall_clock_s = time.time() - t0
    if run_dir is not None:
        ckpt = save_checkpoint(Path(run_dir) / "checkpoint.pt", model, {"loss_config": stepper.config.to_dict(), "plan": asdict(plan)})
        manifest.checkpoint_paths.append(str(ckpt))
        manifest.write(run_dir)
    return model, manifest


# ---------------------------------------------------------------------------
# initial generator


def healthy_windows(lifecycles: Sequence[BearingLifecycle], k: int) -> np.ndarray:
    """All k-row windows lying entirely at or before each lifecycle's FPT."""
    parts = []
    for lc in lifecycles:
        last_start = lc.fpt_index - k + 1
        if last_start >= 0:
            parts.append(np.stack([lc.series[s : s + k] for s in range(last_start + 1)]))
    if not parts:
        raise InsufficientDataError(f"no pre-FPT segment of length >= {k}")
    return np.concatenate(parts).astype(np.float32)


def train_initial_generator(
    lifecycles: Sequence[BearingLifecycle],
    k: int,
    plan: TrainPlan,
    channel_scale: float = 1.0,
    run_dir: str | Path | None = None,
) -> InitialGenerator:
    data = torch.from_numpy(healthy_windows(lifecycles, k))
    n_feature = data.shape[-1]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(plan.seed)
        model = InitialGenerator(k, n_feature, channel_scale)
    torch.manual_seed(plan.seed)
    gen = torch.Generator().manual_seed(plan.seed)
    rng = np.random.default_rng(plan.seed)
    train_rows, val_rows = _split(len(data), plan.val_fraction, plan.seed)
    if len(val_rows) == 0:
        val_rows = train_rows
    opt = torch.optim.AdamW(model.parameters(), lr=plan.lr_gen, betas=plan.betas, weight_decay=plan.weight_decay)
    latent = model.cfg.latent_dim

    def loss_of(batch, g):
        code = model.encode(batch)
        eps = torch.randn(batch.shape[0], latent, generator=g)
        recon = model.decode(reparameterize(code.mu, code.logvar, eps))
        return recon_loss(batch, recon) + kl_loss(code.mu, code.logvar)

    best, best_epoch = math.inf, -1
    best_state = copy.deepcopy(model.state_dict())
    trace = []
    for epoch in range(plan.epochs):
        model.train()
        order = rng.permutation(train_rows)
        for start in range(0, len(order), plan.batch_size):
            rows = order[start : start + plan.batch_size]
            if len(rows) < 2:
                continue
            loss = loss_of(data[rows], gen)
            _check_finite(loss, "initial generator loss")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        model.eval()
        with torch.no_grad():
            val = float(loss_of(data[val_rows], torch.Generator().manual_seed(plan.seed + 7919)))
        trace.append({"epoch": epoch, "val": val})
        if val < best:
            best, best_epoch = val, epoch
            best_state = copy.deepcopy(model.state_dict())
        elif epoch - best_epoch >= plan.early_stop_patience:
            break
    model.load_state_dict(best_state)
    model.eval()
    model.trained = True
    model.seed_lineage = [plan.seed]
    if run_dir is not None:
        run_dir = Path(run_dir)
        save_checkpoint(run_dir / "initial.pt", model, {"plan": asdict(plan), "trace": trace})
        (run_dir / "initial_trace.json").write_text(json.dumps(trace, indent=1))
    return model


# ---------------------------------------------------------------------------
# FID feature extractor


def train_feature_extractor(
    windows: WindowSet,
    epochs: int = 20,
    seed: int = 0,
    batch_size: int = 128,
    lr: float = 2e-4,
) -> Critic:
    """Unconditional HI-class classifier on real signals; its pooled features feed FID."""
    cfg = NetConfig(variant="GAN", k=windows.k, n_feature=windows.n_feature, channel_scale=1.0)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = Critic(cfg, 256, N_CLASSES)
    torch.manual_seed(seed)
    x, _, _, cls = windows.batch()
    x, cls = torch.from_numpy(x), torch.from_numpy(cls)
    opt = torch.optim.AdamW(net.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        net.train()
        order = rng.permutation(len(x))
        for start in range(0, len(order), batch_size):
            rows = order[start : start + batch_size]
            if len(rows) < 2:
                continue
            logits, _ = net(x[rows])
            loss = nn.functional.cross_entropy(logits, cls[rows])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    net.eval()
    return net


# ---------------------------------------------------------------------------
# seeds


@dataclass
class SeedReport:
    values: dict  # seed -> float or dict of floats
    failures: dict  # seed -> message
    mean: float | dict | None
    partial: bool

    def to_dict(self) -> dict:
        return {
            "values": {str(k): v for k, v in self.values.items()},
            "failures": {str(k): v for k, v in self.failures.items()},
            "mean": self.mean,
            "partial": self.partial,
        }


def run_seeds(task: Callable[[int], float | dict], seeds: Sequence[int] = PAPER_SEEDS) -> SeedReport:
    """Run ``task(seed)`` for each seed; failures are recorded, never averaged in."""
    values, failures = {}, {}
    for s in seeds:
        try:
            values[s] = task(s)
        except Exception as err:  # noqa: BLE001 - the report carries the failure
            logger.warning("seed %s failed: %s", s, err)
            failures[s] = f"{type(err).__name__}: {err}"
            logger.debug(traceback.format_exc())
    mean = None
    if values:
        first = next(iter(values.values()))
        if isinstance(first, dict):
            mean = {key: float(np.mean([v[key] for v in values.values()])) for key in first}
        else:
            mean = float(np.mean(list(values.values())))
    return SeedReport(values, failures, mean, partial=bool(failures))
