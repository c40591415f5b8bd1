"""Alternating training of disentangler, synthesizer and discriminators."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import checkpoint as ckpt
from .data import DatasetManifest, manifest_patches
from .disentangler import Disentangler, reconstruct_genuine
from .errors import NumericError, ParamError
from .objectives import (
    DiscriminatorBank,
    LossWeights,
    discriminator_loss,
    generator_loss,
    pixel_loss,
    regularizer_loss,
    total_loss,
)
from .synthesizer import Synthesizer, reconstruct_recaptured

log = logging.getLogger(__name__)

GENERATION = "generation"
SELF_SUPERVISION = "self_supervision"
DISCRIMINATOR = "discriminator"
LOSS_COLUMNS = ("iter", "L_R", "L_G", "L_D", "L_P", "L")


@dataclass
class TrainConfig:
    learning_rate: float = 2e-5
    batch_size: int = 4
    total_iterations: int = 100_000
    beta1: float = 0.9
    beta2: float = 0.999
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_every: int = 10_000
    epoch_size: int = 0  # 0: ceil(training patches / batch_size)
    val_every: int = 0  # 0: once per epoch
    log_every: int = 100
    side: int = 224
    disentangler_widths: tuple = (12, 24, 48, 96)
    synthesizer_width: float = 1.0
    discriminator_width: float = 1.0
    # False: one bank judges genuine reconstructions, a second judges synthesized recaptures.
    shared_discriminator: bool = False

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ParamError("learning_rate must be > 0")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ParamError("batch_size must be a positive even number (half genuine, half recaptured)")
        if self.total_iterations < 0:
            raise ParamError("total_iterations must be >= 0")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ParamError("checkpoint_every and log_every must be >= 1")
        if self.epoch_size < 0 or self.val_every < 0:
            raise ParamError("epoch_size and val_every must be >= 0")


def schedule(epoch: int) -> frozenset:
    """Parts executed in a (1-based) epoch: the discriminator trains on even epochs only."""
    if epoch < 1:
        raise ParamError(f"epochs are 1-based, got {epoch}")
    if epoch % 2 == 0:
        return frozenset({GENERATION, SELF_SUPERVISION, DISCRIMINATOR})
    return frozenset({GENERATION, SELF_SUPERVISION})


@dataclass
class TrainState:
    disentangler: Disentangler
    synthesizer: Synthesizer
    disc_genuine: DiscriminatorBank
    disc_recaptured: DiscriminatorBank
    frozen: Disentangler
    gen_opt: torch.optim.Optimizer
    disc_opt: torch.optim.Optimizer
    epoch_size: int
    iteration: int = 0
    epoch: int = 1
    last_checkpoint: Optional[str] = None

    def banks(self):
        if self.disc_genuine is self.disc_recaptured:
            return [self.disc_genuine]
        return [self.disc_genuine, self.disc_recaptured]

    def refresh_frozen(self) -> None:
        self.frozen.load_state_dict(self.disentangler.state_dict())

    def tensors(self):
        out = ckpt.module_tensors(self.disentangler, "disentangler.")
        out.update(ckpt.module_tensors(self.synthesizer, "synthesizer."))
        for name, bank in (("disc_genuine.", self.disc_genuine), ("disc_recaptured.", self.disc_recaptured)):
            out.update(ckpt.module_tensors(bank, name))
        return out


def _freeze(module: torch.nn.Module) -> torch.nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def create_state(config: TrainConfig, epoch_size: int) -> TrainState:
    config.validate()
    if epoch_size < 1:
        raise ParamError("epoch_size must be >= 1")
    torch.manual_seed(config.seed)
    dis = Disentangler(config.disentangler_widths, config.side)
    syn = Synthesizer(config.synthesizer_width)
    dg = DiscriminatorBank(config.discriminator_width, config.side)
    dr = dg if config.shared_discriminator else DiscriminatorBank(config.discriminator_width, config.side)
    frozen = _freeze(copy.deepcopy(dis))
    for m in (dis, syn, dg, dr, frozen):
        m.to(memory_format=torch.channels_last)
    betas = (config.beta1, config.beta2)
    gen_opt = torch.optim.Adam(list(dis.parameters()) + list(syn.parameters()), lr=config.learning_rate, betas=betas)
    disc_params = list(dg.parameters()) + ([] if dr is dg else list(dr.parameters()))
    disc_opt = torch.optim.Adam(disc_params, lr=config.learning_rate, betas=betas)
    return TrainState(dis, syn, dg, dr, frozen, gen_opt, disc_opt, epoch_size)


def _set_grad(modules, flag: bool) -> None:
    for m in modules:
        for p in m.parameters():
            p.requires_grad_(flag)


@dataclass
class GeneratorTerms:
    l_r: torch.Tensor
    l_g: torch.Tensor
    l_p: torch.Tensor
    hat_g: torch.Tensor
    hat_r: torch.Tensor
    fake_g_maps: list
    fake_r_maps: list


def generator_terms(state: TrainState, i_g: torch.Tensor, i_r: torch.Tensor,
                    weights: LossWeights = LossWeights()) -> GeneratorTerms:
    """Generation and self-supervision forward passes (no parameter updates)."""
    nb = i_g.shape[0]
    dis, syn = state.disentangler, state.synthesizer
    # (1) generation: disentangle both domains, rebuild a genuine image and a recapture
    trace = dis(torch.cat([i_g, i_r], 0))
    g_gen, g_rec = trace.G[:nb], trace.G[nb:]
    hat_g = reconstruct_genuine(i_r, g_rec)
    hat_r = reconstruct_recaptured(i_g, syn(i_g, g_rec))
    l_r = regularizer_loss(g_gen, g_rec, weights)
    fake_g_maps = state.disc_genuine(hat_g)
    fake_r_maps = state.disc_recaptured(hat_r)
    l_g = generator_loss(fake_g_maps, fake_r_maps)
    # (2) self-supervision through the epoch-start copy of the disentangler
    pseudo_g = reconstruct_genuine(hat_r, state.frozen(hat_r))
    l_p = pixel_loss(pseudo_g, i_g)
    return GeneratorTerms(l_r, l_g, l_p, hat_g, hat_r, fake_g_maps, fake_r_maps)


def train_step(state: TrainState, batch, weights: LossWeights = LossWeights()) -> dict:
    """One iteration over a (genuine, recaptured) batch; mutates ``state``.

    Returns the scalar losses of this iteration.
    """
    i_g, i_r = batch
    if i_g.shape != i_r.shape:
        raise ParamError("batch needs equal numbers of genuine and recaptured patches")
    parts = schedule(state.epoch)
    nb = i_g.shape[0]
    dg, dr = state.disc_genuine, state.disc_recaptured
    banks = state.banks()

    state.disentangler.train()
    state.synthesizer.train()
    _set_grad(banks, False)
    terms = generator_terms(state, i_g, i_r, weights)
    l_r, l_g, l_p = terms.l_r, terms.l_g, terms.l_p
    hat_g, hat_r, fake_g_maps, fake_r_maps = terms.hat_g, terms.hat_r, terms.fake_g_maps, terms.fake_r_maps

    gen_obj = weights.lambda_r * l_r + weights.lambda_g * l_g + weights.lambda_p * l_p
    if not torch.isfinite(gen_obj):
        raise NumericError(f"non-finite generator objective at iteration {state.iteration}", state.last_checkpoint)
    state.gen_opt.zero_grad(set_to_none=False)
    gen_obj.backward()
    state.gen_opt.step()
    _set_grad(banks, True)

    # (3) discriminators, generator outputs detached
    hat_g_d, hat_r_d = hat_g.detach(), hat_r.detach()
    if DISCRIMINATOR in parts:
        for b in banks:
            b.train()
        rg, fg = _split_maps(dg(torch.cat([i_g, hat_g_d], 0)), nb)
        rr, fr = _split_maps(dr(torch.cat([i_r, hat_r_d], 0)), nb)
        l_d = discriminator_loss(rg, fg, rr, fr)
        if not torch.isfinite(l_d):
            raise NumericError(f"non-finite discriminator loss at iteration {state.iteration}", state.last_checkpoint)
        state.disc_opt.zero_grad(set_to_none=False)
        (weights.lambda_d * l_d).backward()
        state.disc_opt.step()
    else:
        with torch.no_grad():
            l_d = discriminator_loss(dg(i_g), [m.detach() for m in fake_g_maps],
                                     dr(i_r), [m.detach() for m in fake_r_maps])

    try:
        total = total_loss(l_r, l_g, l_d, l_p, weights)
    except NumericError as exc:
        raise NumericError(str(exc), state.last_checkpoint) from exc

    state.iteration += 1
    if state.iteration % state.epoch_size == 0:
        state.epoch += 1
        state.refresh_frozen()
    return {
        "iter": state.iteration,
        "L_R": float(l_r.detach()),
        "L_G": float(l_g.detach()),
        "L_D": float(l_d.detach()),
        "L_P": float(l_p.detach()),
        "L": float(total.detach()),
    }


def _split_maps(maps, nb):
    return [m[:nb] for m in maps], [m[nb:] for m in maps]


@torch.no_grad()
def validation_pixel_loss(state: TrainState, genuine: torch.Tensor, recaptured: torch.Tensor,
                          batch: int = 8) -> float:
    """Inference-mode L_P over paired validation patches."""
    n = min(len(genuine), len(recaptured))
    if n == 0:
        return float("nan")
    dis, syn = state.disentangler, state.synthesizer
    modes = dis.training, syn.training
    dis.eval()
    syn.eval()
    total = 0.0
    try:
        for s in range(0, n, batch):
            i_g, i_r = genuine[s:s + batch][: n - s], recaptured[s:s + batch][: n - s]
            g_rec = dis(i_r).G
            hat_r = reconstruct_recaptured(i_g, syn(i_g, g_rec))
            pseudo = reconstruct_genuine(hat_r, dis(hat_r))
            total += float((pseudo - i_g).abs().mean()) * len(i_g)
    finally:
        dis.train(modes[0])
        syn.train(modes[1])
    return total / n


@dataclass
class TrainResult:
    state: TrainState
    history: list
    val_history: list
    best_checkpoint: Optional[str] = None


class _BatchSampler:
    """Seeded, epoch-wise reshuffled draws of half-batches from each class."""

    def __init__(self, n_genuine, n_recaptured, half, seed):
        self.rng = np.random.default_rng(seed)
        self.half = half
        self.pools = [self._fresh(n_genuine), self._fresh(n_recaptured)]
        self.sizes = (n_genuine, n_recaptured)

    def _fresh(self, n):
        return list(self.rng.permutation(n))

    def _take(self, k):
        out = []
        while len(out) < self.half:
            if not self.pools[k]:
                self.pools[k] = self._fresh(self.sizes[k])
            out.append(self.pools[k].pop())
        return out

    def next(self):
        return self._take(0), self._take(1)


def _class_tensors(manifest: DatasetManifest, side: int):
    patches, labels, _ = manifest_patches(manifest, "train", side)
    # NHWC storage viewed as NCHW is exactly the channels_last layout the convolutions prefer
    x = torch.from_numpy(np.ascontiguousarray(patches)).permute(0, 3, 1, 2)
    return x[torch.from_numpy(labels == 0)], x[torch.from_numpy(labels == 1)]


def save_state(state: TrainState, path, config: TrainConfig, extra=None) -> str:
    meta = {
        "kind": "disentangle",
        "iteration": state.iteration,
        "epoch": state.epoch,
        "side": config.side,
        "disentangler_widths": ",".join(str(w) for w in config.disentangler_widths),
        "synthesizer_width": config.synthesizer_width,
        "discriminator_width": config.discriminator_width,
        "shared_discriminator": int(config.shared_discriminator),
        "seed": config.seed,
    }
    meta.update(extra or {})
    ckpt.save_checkpoint(state.tensors(), path, meta)
    return str(path)


def load_disentangler(path) -> Disentangler:
    """Rebuild the live disentangler from a training checkpoint."""
    tensors, meta = ckpt.load_checkpoint(path)
    widths = tuple(int(w) for w in meta.get("disentangler_widths", "12,24,48,96").split(","))
    model = Disentangler(widths, int(meta.get("side", 224)))
    ckpt.load_module(model, tensors, "disentangler.")
    return model.eval()


def train(config: TrainConfig, train_manifest: DatasetManifest, val_manifest: Optional[DatasetManifest] = None,
          out_dir=None, callback=None) -> TrainResult:
    """Run ``config.total_iterations`` alternating steps.

    With ``out_dir`` set, writes ``losses.csv``, ``train.log`` lines, periodic
    ``ckpt_<iter>.mmdt`` archives and ``best.mmdt`` (lowest validation L_P).
    ``callback(state, row)`` runs after every iteration.
    """
    config.validate()
    genuine, recaptured = _class_tensors(train_manifest, config.side)
    if len(genuine) == 0 or len(recaptured) == 0:
        raise ParamError("training manifest needs both genuine and recaptured patches")
    n_total = len(genuine) + len(recaptured)
    epoch_size = config.epoch_size or math.ceil(n_total / config.batch_size)
    state = create_state(config, epoch_size)
    val = _class_tensors(val_manifest, config.side) if val_manifest is not None else None
    val_every = config.val_every or epoch_size

    out = Path(out_dir) if out_dir is not None else None
    csv_fh = log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        csv_fh = open(out / "losses.csv", "w", newline="", encoding="utf-8")
        writer = csv.writer(csv_fh)
        writer.writerow(LOSS_COLUMNS)
        log_fh = open(out / "train.log", "w", encoding="utf-8")

    history, val_history = [], []
    best, best_path = math.inf, None
    sampler = _BatchSampler(len(genuine), len(recaptured), config.batch_size // 2, config.seed)
    try:
        for _ in range(config.total_iterations):
            gi, ri = sampler.next()
            row = train_step(state, (genuine[gi], recaptured[ri]), config.weights)
            history.append(row)
            if callback is not None:
                callback(state, row)
            if csv_fh is not None:
                writer.writerow([row[c] if c == "iter" else repr(row[c]) for c in LOSS_COLUMNS])
                csv_fh.flush()
            it = state.iteration
            if it % config.log_every == 0:
                msg = (f"iter {it} epoch {state.epoch} " +
                       " ".join(f"{k}={row[k]:.5g}" for k in LOSS_COLUMNS[1:]))
                log.info(msg)
                if log_fh is not None:
                    log_fh.write(msg + "\n")
                    log_fh.flush()
            if out is not None and it % config.checkpoint_every == 0:
                state.last_checkpoint = save_state(state, out / f"ckpt_{it:06d}.mmdt", config)
            if val is not None and it % val_every == 0:
                v = validation_pixel_loss(state, *val)
                val_history.append({"iter": it, "val_L_P": v})
                if out is not None and v < best:
                    best = v
                    best_path = save_state(state, out / "best.mmdt", config, {"val_L_P": repr(v)})
        if out is not None and state.iteration > 0 and state.iteration % config.checkpoint_every:
            state.last_checkpoint = save_state(state, out / f"ckpt_{state.iteration:06d}.mmdt", config)
    finally:
        if csv_fh is not None:
            csv_fh.close()
        if log_fh is not None:
            log_fh.close()
    return TrainResult(state, history, val_history, best_path)
