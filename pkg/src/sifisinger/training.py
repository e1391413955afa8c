"""Objective assembly, alternating generator / discriminator updates, checkpoints."""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import dsp
from .config import Config, from_dict
from .errors import CorruptCheckpoint, NonFiniteLoss, VersionMismatch
from .generator import Discriminator, discriminator_loss, feature_matching_loss, generator_adv_loss, generator_loss, mel_loss
from .model import SiFiSinger
from .pitch import PitchNet, f0_recon_loss, freeze, mcep_recon_loss
from .posterior import kl_loss
from .prior import am_loss, duration_loss
from .score_io import Vocab

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOSS_TERMS = ("L_G", "L_adv_G", "L_mel", "L_fm", "L_kl", "L_am", "L_dur", "L_mcep", "L_F0", "L_adv_D")


def total_objective(L_G, L_kl, L_am, L_dur, L_mcep=None, L_F0=None):
    """Generator-side objective: unit-weight sum of its six parts; absent terms count as zero."""
    total = L_G + L_kl + L_am + L_dur
    for t in (L_mcep, L_F0):
        if t is not None:
            total = total + t
    return total


@dataclass
class LossBundle:
    L_G: torch.Tensor
    L_adv_G: torch.Tensor
    L_mel: torch.Tensor
    L_fm: torch.Tensor
    L_kl: torch.Tensor
    L_am: torch.Tensor
    L_dur: torch.Tensor
    L_mcep: torch.Tensor | None = None
    L_F0: torch.Tensor | None = None
    L_adv_D: torch.Tensor | None = None
    weights: dict = field(default_factory=dict)

    @property
    def total(self):
        return total_objective(self.L_G, self.L_kl, self.L_am, self.L_dur, self.L_mcep, self.L_F0)

    def terms(self) -> dict:
        return {k: getattr(self, k) for k in LOSS_TERMS if getattr(self, k) is not None}

    def scalars(self) -> dict:
        out = {k: float(v.detach()) for k, v in self.terms().items()}
        out["L"] = float(self.total.detach())
        return out

    def check_finite(self):
        for k, v in self.terms().items():
            if not torch.isfinite(torch.as_tensor(v)).all():
                raise NonFiniteLoss(k, float(v))


def loss_weights(cfg: Config) -> dict:
    t = cfg.train
    return {"lambda1": t.lambda1, "lambda2": t.lambda2, "lambda_mel": t.lambda_mel, "lambda_fm": t.lambda_fm,
            "lambda_f0": t.lambda_f0, "lambda_mcep": t.lambda_mcep}


def discriminator_side_loss(out, discriminator) -> torch.Tensor:
    real, _ = discriminator(out["y"])
    fake, _ = discriminator(out["y_hat"].detach())
    return discriminator_loss(real, fake)


def generator_side_losses(out, batch, discriminator, pitch_net, cfg: Config) -> LossBundle:
    """Every generator-side term for one forward pass.  ``discriminator`` should be frozen by the caller."""
    t = cfg.train
    y, y_hat = out["y"], out["y_hat"]
    fake_scores, fake_feats = discriminator(y_hat)
    with torch.no_grad():
        _, real_feats = discriminator(y)
    l_adv = generator_adv_loss(fake_scores)
    l_fm = feature_matching_loss(real_feats, fake_feats)
    l_mel = mel_loss(y, y_hat, cfg.dsp)
    prior = out["prior"]
    mask = out["frame_mask"]
    bundle = LossBundle(
        L_G=generator_loss(l_adv, l_mel, l_fm, t.lambda_mel, t.lambda_fm),
        L_adv_G=l_adv, L_mel=l_mel, L_fm=l_fm,
        L_kl=kl_loss(out["posterior"], prior["prior"], mask),
        L_am=am_loss(prior["lf0"], prior["mcep"], batch["lf0"], batch["mcep"], t.lambda1, t.lambda2,
                     mask, batch["vuv"], prior["vuv_logit"], t.lambda_vuv),
        L_dur=duration_loss(prior["log_dur"], batch["duration_frames"], batch["note_duration_frames"],
                            prior["ph_mask"]),
        weights=loss_weights(cfg),
    )
    if t.diff_recon:
        if pitch_net is None:
            raise ValueError("the F0 reconstruction term needs a pretrained pitch net")
        bundle.L_mcep = mcep_recon_loss(y, y_hat, t.lambda_mcep, cfg.dsp)
        bundle.L_F0 = f0_recon_loss(pitch_net, y, y_hat, t.lambda_f0, vuv=out["vuv_seg"],
                                    sample_rate=cfg.dsp.sample_rate, ref_hop=cfg.dsp.hop, scale=t.f0_loss_scale)
    return bundle


def total_losses(model: SiFiSinger, discriminator, pitch_net, batch, cfg: Config, generator=None) -> LossBundle:
    """Forward pass plus every loss term, without any parameter update."""
    out = model.forward_train(batch, generator)
    bundle = generator_side_losses(out, batch, discriminator, pitch_net, cfg)
    bundle.L_adv_D = discriminator_side_loss(out, discriminator)
    bundle.check_finite()
    return bundle


def ablation_variants(cfg: Config, no_diff_recon: bool = False, no_am_source: bool = False) -> Config:
    """Copy of ``cfg`` with the requested ablations switched on."""
    cfg = copy.deepcopy(cfg)
    if no_diff_recon:
        cfg.train.diff_recon = False
    if no_am_source:
        cfg.model.prior.am_source = False
    return cfg.validate()


def build_models(cfg: Config, n_phonemes: int, n_notes: int, stats: dsp.NormStats | None = None):
    torch.manual_seed(cfg.train.seed)
    model = SiFiSinger(cfg, n_phonemes, n_notes)
    if stats is not None:
        model.set_norm_stats(stats)
    return model, Discriminator(cfg.model.discriminator)


def _set_requires_grad(module: nn.Module, flag: bool):
    for p in module.parameters():
        p.requires_grad_(flag)


class Trainer:
    """Alternating AdamW updates: discriminator on its loss, then the synthesis network on the full objective."""

    def __init__(self, cfg: Config, model: SiFiSinger, discriminator: Discriminator, pitch_net: PitchNet | None = None,
                 n_utterances: int = 1):
        self.cfg = cfg
        t = cfg.train
        self.model = model
        self.discriminator = discriminator
        self.pitch_net = freeze(pitch_net) if pitch_net is not None else None
        if t.diff_recon and pitch_net is None:
            raise ValueError("diff_recon is on but no pitch net was given")
        opt = dict(lr=t.learning_rate, betas=tuple(t.betas), eps=t.adam_eps, weight_decay=t.weight_decay)
        self.opt_g = torch.optim.AdamW(model.parameters(), **opt)
        self.opt_d = torch.optim.AdamW(discriminator.parameters(), **opt)
        self.sched_g = torch.optim.lr_scheduler.ExponentialLR(self.opt_g, t.lr_decay)
        self.sched_d = torch.optim.lr_scheduler.ExponentialLR(self.opt_d, t.lr_decay)
        self.steps_per_epoch = t.steps_per_epoch or math.ceil(n_utterances / t.batch_size)
        self.step = 0
        torch.manual_seed(t.seed)
        self.rng = torch.Generator()
        self.rng.manual_seed(t.seed)

    def train_step(self, batch) -> LossBundle:
        self.model.train()
        self.discriminator.train()
        clip = self.cfg.train.grad_clip
        out = self.model.forward_train(batch, self.rng)

        l_d = discriminator_side_loss(out, self.discriminator)
        if not torch.isfinite(l_d):
            raise NonFiniteLoss("L_adv_D", float(l_d))
        self.opt_d.zero_grad(set_to_none=True)
        l_d.backward()
        nn.utils.clip_grad_norm_(self.discriminator.parameters(), clip)
        self.opt_d.step()

        _set_requires_grad(self.discriminator, False)
        try:
            bundle = generator_side_losses(out, batch, self.discriminator, self.pitch_net, self.cfg)
            bundle.L_adv_D = l_d.detach()
            bundle.check_finite()
            total = bundle.total
            if not torch.isfinite(total):
                raise NonFiniteLoss("L", float(total))
            self.opt_g.zero_grad(set_to_none=True)
            total.backward()
            nn.utils.clip_grad_norm_(self.model.parameters(), clip)
            self.opt_g.step()
        finally:
            _set_requires_grad(self.discriminator, True)

        self.step += 1
        if self.step % self.steps_per_epoch == 0:
            self.sched_g.step()
            self.sched_d.step()
        return bundle

    @property
    def learning_rate(self):
        return self.opt_g.param_groups[0]["lr"]

    def fit(self, batches, steps: int, log_dir=None, checkpoint_dir=None, extras=None, callback=None) -> list:
        """Run ``steps`` updates from the iterator ``batches``; returns the per-step scalar history."""
        history = []
        writer = _LossLog(log_dir) if log_dir else None
        t0 = time.time()
        try:
            for _ in range(steps):
                bundle = self.train_step(next(batches))
                row = {"step": self.step, **bundle.scalars(), "lr": self.learning_rate}
                history.append(row)
                if writer:
                    writer.write(row)
                if self.step % self.cfg.train.log_every == 0 or self.step == 1:
                    log.info("step %d L %.4f (%.1fs)", self.step, row["L"], time.time() - t0)
                if checkpoint_dir and self.step % self.cfg.train.checkpoint_every == 0:
                    save_checkpoint(Path(checkpoint_dir) / f"step_{self.step:07d}.pt", self, **(extras or {}))
                if callback:
                    callback(row)
        finally:
            if writer:
                writer.close()
        return history

    def state_dict(self) -> dict:
        return {"opt_g": self.opt_g.state_dict(), "opt_d": self.opt_d.state_dict(),
                "sched_g": self.sched_g.state_dict(), "sched_d": self.sched_d.state_dict(),
                "step": self.step, "rng": self.rng.get_state(), "torch_rng": torch.get_rng_state()}

    def load_state_dict(self, state: dict):
        self.opt_g.load_state_dict(state["opt_g"])
        self.opt_d.load_state_dict(state["opt_d"])
        self.sched_g.load_state_dict(state["sched_g"])
        self.sched_d.load_state_dict(state["sched_d"])
        self.step = state["step"]
        self.rng.set_state(state["rng"])
        torch.set_rng_state(state["torch_rng"])


class _LossLog:
    """Step-indexed JSONL and CSV of every logged scalar."""

    columns = ("step", "L", *LOSS_TERMS, "lr")

    def __init__(self, log_dir):
        d = Path(log_dir)
        d.mkdir(parents=True, exist_ok=True)
        self.jsonl = open(d / "losses.jsonl", "a", encoding="utf-8")
        new = not (d / "losses.csv").exists()
        self.csv_file = open(d / "losses.csv", "a", newline="", encoding="utf-8")
        self.csv = csv.DictWriter(self.csv_file, self.columns, restval="")
        if new:
            self.csv.writeheader()

    def write(self, row):
        self.jsonl.write(json.dumps(row) + "\n")
        self.csv.writerow(row)

    def close(self):
        self.jsonl.close()
        self.csv_file.close()


# -- checkpoints ------------------------------------------------------------

@dataclass
class Checkpoint:
    model: SiFiSinger
    discriminator: Discriminator
    config: Config
    phonemes: Vocab
    notes: Vocab
    stats: dsp.NormStats | None
    step: int
    trainer_state: dict | None


def flat_state(model: SiFiSinger, discriminator: Discriminator | None = None) -> dict:
    state = {}
    for prefix, m in (("prior_encoder", model.prior_encoder), ("posterior_encoder", model.posterior_encoder),
                      ("generator", model.generator), ("discriminator", discriminator)):
        if m is not None:
            state.update({f"{prefix}.{k}": v for k, v in m.state_dict().items()})
    return state


def save_checkpoint(path, trainer: Trainer | None = None, model: SiFiSinger | None = None,
                    discriminator: Discriminator | None = None, vocabs=None, stats: dsp.NormStats | None = None):
    """Atomic write (temp file + rename) of weights, config, vocabularies and optimizer state."""
    if trainer is not None:
        model, discriminator = trainer.model, trainer.discriminator
    if model is None:
        raise ValueError("nothing to save")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {
        "schema_version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "state": flat_state(model, discriminator),
        "vocabs": {"phonemes": list(vocabs[0].symbols), "notes": list(vocabs[1].symbols)} if vocabs else None,
        "n_phonemes": model.prior_encoder.phoneme_emb.num_embeddings,
        "n_notes": model.prior_encoder.note_emb.num_embeddings,
        "norm_stats": json.loads(stats.to_json()) if stats is not None else None,
        "step": trainer.step if trainer else 0,
        "trainer": trainer.state_dict() if trainer else None,
    }
    buf = io.BytesIO()
    torch.save(blob, buf)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return path


def _read_blob(path):
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as e:
        raise CorruptCheckpoint(f"{path}: unreadable checkpoint ({type(e).__name__}: {e})") from None
    if not isinstance(blob, dict) or "schema_version" not in blob or "state" not in blob:
        raise CorruptCheckpoint(f"{path}: not a model checkpoint")
    if blob["schema_version"] != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint schema version {blob['schema_version']}, "
                              f"this code reads version {CHECKPOINT_VERSION}")
    return blob


def load_checkpoint(path) -> Checkpoint:
    blob = _read_blob(path)
    cfg = from_dict(blob["config"])
    model = SiFiSinger(cfg, blob["n_phonemes"], blob["n_notes"])
    disc = Discriminator(cfg.model.discriminator)
    groups = {"prior_encoder": model.prior_encoder, "posterior_encoder": model.posterior_encoder,
              "generator": model.generator, "discriminator": disc}
    split = {k: {} for k in groups}
    for key, v in blob["state"].items():
        prefix, rest = key.split(".", 1)
        if prefix not in split:
            raise CorruptCheckpoint(f"{path}: unexpected state key {key!r}")
        split[prefix][rest] = v
    for name, module in groups.items():
        if split[name] or name != "discriminator":
            module.load_state_dict(split[name])
    v = blob.get("vocabs") or {}
    stats = blob.get("norm_stats")
    return Checkpoint(model, disc, cfg,
                      Vocab(v.get("phonemes", [])), Vocab(v.get("notes", [])),
                      dsp.NormStats(np.asarray(stats["mcep_mean"]), np.asarray(stats["mcep_std"]),
                                    stats["lf0_mean"], stats["lf0_std"]) if stats else None,
                      blob.get("step", 0), blob.get("trainer"))


def resume_trainer(ckpt: Checkpoint, pitch_net=None, n_utterances: int = 1) -> Trainer:
    trainer = Trainer(ckpt.config, ckpt.model, ckpt.discriminator, pitch_net, n_utterances)
    if ckpt.trainer_state:
        trainer.load_state_dict(ckpt.trainer_state)
    return trainer
