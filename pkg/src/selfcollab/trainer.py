"""Three-stage training: basic two-branch GAN, SC rounds, Reb-SC rounds.

Each optimizer step synthesizes up to four pseudo-degraded images, then
updates the discriminator, the generator and the restorer in that order.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import ExperimentConfig
from .datapipe import PatchBatch, UnpairedDataset, load_paired, load_unpaired_root, sample_batch
from .imagecore import psnr, ssim, to_tensor
from .losses import (PATHS, LossReport, NonFiniteLoss, adv_loss_generator, bgm_loss,
                     consistency_loss, gan_terms, res_loss)
from .networks import (Discriminator, GaussianConvRestorer, Generator, RestorerSnapshot,
                       build_restorer, param_hash, snapshot)
from .prompt import PromptExtractor, extract_prompt, extract_prompt_ensembled, raw_prompt

log = logging.getLogger(__name__)

STAGES = ("basic", "sc", "rebsc")
DEVICE_ENV = "SELFCOLLAB_DEVICE"


def default_device() -> torch.device:
    return torch.device(os.environ.get(DEVICE_ENV, "cpu"))


def active_paths(flags) -> tuple:
    """Synthesis paths enabled by the ablation flags, in adv1..adv4 order."""
    on = {"x_u_syn"}
    if flags.self_synthesis_branch or flags.parallel_branches:
        on.add("x_s_syn")
    if flags.parallel_branches:
        on.update({"y_s_syn", "y_u_syn"})
    return tuple(p for p in PATHS if p in on)


def round_plan(start: int, end: int, n_rounds: int) -> list:
    """Split epochs ``[start, end)`` into rounds; the remainder goes to the last one."""
    base = (end - start) // n_rounds
    plan, s = [], start
    for r in range(1, n_rounds + 1):
        e = end if r == n_rounds else s + base
        plan.append((r, s, e))
        s = e
    return plan


def batch_seed(seed: int, epoch: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, step]).generate_state(1)[0])


class MetricsLog:
    """Line-delimited JSON, one record per optimizer step or event."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, record: dict) -> None:
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


@dataclass
class TrainState:
    config: ExperimentConfig
    generator: Generator
    discriminator: Discriminator
    restorer: torch.nn.Module
    stage0: GaussianConvRestorer
    pl: PromptExtractor
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    opt_r: torch.optim.Optimizer
    device: torch.device
    epoch: int = 0
    stage: str = "basic"
    round: int = 0
    step: int = 0
    aborted_steps: int = 0
    replacements: int = 0
    history: list = field(default_factory=list)
    metrics: MetricsLog = field(default_factory=MetricsLog)
    checkpoints: list = field(default_factory=list)
    out_dir: Path | None = None

    @property
    def weights(self):
        return self.config.losses.weights()

    @property
    def snapshot_active(self) -> bool:
        return isinstance(self.pl.frozen, RestorerSnapshot)

    def record(self, rec: dict) -> None:
        self.history.append(rec)
        self.metrics.write(rec)

    def events(self, kind: str) -> list:
        return [r for r in self.history if r.get("event") == kind]


def init_state(config: ExperimentConfig, out_dir=None, device=None) -> TrainState:
    device = device or default_device()
    n = config.networks
    torch.manual_seed(config.seed)
    g = Generator(n.channels, n.generator_channels, n.generator_blocks, n.generator_prompt_skip).to(device)
    d = Discriminator(n.channels, n.discriminator_channels, n.discriminator_layers).to(device)
    r = build_restorer(n.restorer, n.channels).to(device)
    s0 = GaussianConvRestorer(n.channels, n.stage0_kernel, n.stage0_learnable).to(device)
    o = config.optimizer
    betas = (o.beta1, o.beta2)
    g_params = list(g.parameters())
    if n.stage0_learnable:
        g_params += list(s0.parameters())
    state = TrainState(
        config=config, generator=g, discriminator=d, restorer=r, stage0=s0,
        pl=PromptExtractor(s0),
        opt_g=torch.optim.Adam(g_params, lr=o.lr, betas=betas),
        opt_d=torch.optim.Adam(d.parameters(), lr=o.lr, betas=betas),
        opt_r=torch.optim.Adam(r.parameters(), lr=o.lr, betas=betas),
        device=device,
    )
    if out_dir is not None:
        state.out_dir = Path(out_dir)
        state.out_dir.mkdir(parents=True, exist_ok=True)
        state.metrics = MetricsLog(state.out_dir / "metrics.jsonl")
    return state


# ---------------------------------------------------------------------------
# One step


def _capture(state: TrainState) -> dict:
    return {
        "g": copy.deepcopy(state.generator.state_dict()),
        "d": copy.deepcopy(state.discriminator.state_dict()),
        "r": copy.deepcopy(state.restorer.state_dict()),
        "s0": copy.deepcopy(state.stage0.state_dict()),
        "opt_g": copy.deepcopy(state.opt_g.state_dict()),
        "opt_d": copy.deepcopy(state.opt_d.state_dict()),
        "opt_r": copy.deepcopy(state.opt_r.state_dict()),
    }


def _rollback(state: TrainState, saved: dict) -> None:
    state.generator.load_state_dict(saved["g"])
    state.discriminator.load_state_dict(saved["d"])
    state.restorer.load_state_dict(saved["r"])
    state.stage0.load_state_dict(saved["s0"])
    state.opt_g.load_state_dict(saved["opt_g"])
    state.opt_d.load_state_dict(saved["opt_d"])
    state.opt_r.load_state_dict(saved["opt_r"])


def _finite(name, t):
    if not torch.isfinite(t).all():
        raise NonFiniteLoss(f"non-finite {name} loss")
    return t


def _prompt(state: TrainState, img):
    if not state.config.ablation.pl_module:
        return raw_prompt(img)
    if state.stage == "rebsc" and state.config.schedule.fold_prompts:
        return extract_prompt_ensembled(state.pl, img)
    return extract_prompt(state.pl, img)


def p2gan_step(state: TrainState, batch: PatchBatch) -> LossReport:
    """One optimizer step of every network; returns the loss decomposition.

    A non-finite loss rolls all parameters and optimizer states back to
    their pre-step values and increments ``state.aborted_steps``.
    """
    cfg = state.config
    w = state.weights
    flags = cfg.ablation
    paths = active_paths(flags)
    G, D, R = state.generator, state.discriminator, state.restorer
    x = batch.clean.to(state.device)
    y = batch.degraded.to(state.device)
    saved = _capture(state) if cfg.rollback_nonfinite else None
    report = LossReport(step=state.step, epoch=state.epoch, stage=state.stage,
                        round=state.round, folds=state.pl.fold_count)

    try:
        # synthesis, in dependency order
        y_r = R(y)
        d_y = _prompt(state, y)
        x_u = G(x, d_y)
        x_r = R(x_u.detach())
        fakes = {"x_u_syn": x_u}
        if len(paths) > 1:
            d_x = _prompt(state, x_u)
            if cfg.stop_grad_prompt:
                d_x = d_x.detach()
            if "y_s_syn" in paths:
                fakes["y_s_syn"] = G(y_r.detach(), d_y)
                fakes["y_u_syn"] = G(y_r.detach(), d_x)
            fakes["x_s_syn"] = G(x_r.detach(), d_x)

        # discriminator
        state.opt_d.zero_grad(set_to_none=True)
        s_real = D(y)
        terms = gan_terms(s_real, {p: D(fakes[p].detach()) for p in paths}, paths)
        loss_d = sum(terms[p] for p in paths)
        if cfg.losses.dedup_real and len(paths) > 1:
            loss_d = loss_d - (len(paths) - 1) * torch.mean((s_real - 1) ** 2)
        _finite("discriminator", loss_d).backward()
        state.opt_d.step()

        # generator
        state.opt_g.zero_grad(set_to_none=True)
        D.requires_grad_(False)
        try:
            g_adv = sum(adv_loss_generator(D(fakes[p])) for p in paths)
        finally:
            D.requires_grad_(True)
        bgm = bgm_loss(x, x_u, w) if flags.bgm_loss else x.new_zeros(())
        loss_g = g_adv + w.bgm * bgm
        _finite("generator", loss_g).backward()
        state.opt_g.step()

        # restorer
        state.opt_r.zero_grad(set_to_none=True)
        pairs = [(x_r, x)]
        if cfg.losses.branch1_pairs and "y_s_syn" in fakes:
            pairs.append((R(fakes["y_s_syn"].detach()), y_r.detach()))
        l_res = res_loss(pairs, w)
        if state.stage == "basic":
            loss_r = l_res
            l_res_sc = None
        else:
            use_folds = state.stage == "rebsc"
            with torch.no_grad():
                r_fake1 = state.pl.restore(x_u.detach(), folds=use_folds)
                r_fake2 = state.pl.restore(y, folds=use_folds)
            l_res_sc = l_res + consistency_loss(x_r, r_fake1, w) + consistency_loss(y_r, r_fake2, w)
            loss_r = l_res_sc
            report.extra["rfake_source"] = state.pl.frozen.param_hash
        _finite("restorer", loss_r).backward()
        state.opt_r.step()
    except NonFiniteLoss as exc:
        if saved is None:
            raise
        _rollback(state, saved)
        state.aborted_steps += 1
        log.warning("%s at step %d; rolled back", exc, state.step)
        report.extra["aborted"] = True
        report.grand_total = float("nan")
        state.step += 1
        return report

    adv_names = dict(zip(PATHS, ("adv1", "adv2", "adv3", "adv4")))
    for p in paths:
        setattr(report, adv_names[p], terms[p].item())
    report.gan_total = report.adv1 + report.adv2 + report.adv3 + report.adv4
    report.bgm = bgm.item()
    report.res = l_res.item()
    report.res_sc = l_res_sc.item() if l_res_sc is not None else 0.0
    report.g_adv = g_adv.item()
    res_term = report.res_sc if l_res_sc is not None else report.res
    report.grand_total = report.gan_total + w.bgm * report.bgm + res_term
    state.step += 1
    return report


# ---------------------------------------------------------------------------
# Epochs, validation and stages


@dataclass
class TrainData:
    train: UnpairedDataset
    val: list | None = None  # list of (clean, degraded) C x H x W tensors

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "TrainData":
        train = load_unpaired_root(cfg.data.root)
        val = None
        if cfg.data.val_root:
            val = [(to_tensor(c), to_tensor(d)) for c, d in load_paired(cfg.data.val_root)]
        return cls(train, val)


def steps_per_epoch(cfg: ExperimentConfig, data: TrainData) -> int:
    if cfg.data.steps_per_epoch:
        return cfg.data.steps_per_epoch
    return max(1, math.ceil(data.train.sizes[1] / cfg.data.batch_size))


@torch.no_grad()
def validate(restorer, pairs, device=None) -> dict:
    """Mean PSNR/SSIM of ``restorer`` over aligned (clean, degraded) pairs."""
    if not pairs:
        return {}
    ps, ss = [], []
    for clean, deg in pairs:
        dev = device or next(iter(restorer.parameters())).device
        out = restorer(deg.unsqueeze(0).to(dev))[0].cpu()
        ps.append(psnr(out, clean))
        ss.append(ssim(out.double(), clean.double()).item())
    return {"psnr": float(np.mean(ps)), "ssim": float(np.mean(ss))}


def run_epoch(state: TrainState, data: TrainData) -> dict:
    cfg = state.config
    n_steps = steps_per_epoch(cfg, data)
    reports = []
    for i in range(n_steps):
        batch = sample_batch(data.train, cfg.data.batch_size, cfg.data.patch_size,
                             batch_seed(cfg.seed, state.epoch, i))
        rep = p2gan_step(state, batch)
        state.record(rep.to_record())
        reports.append(rep)
    good = [r for r in reports if not r.extra.get("aborted")]
    means = {k: float(np.mean([getattr(r, k) for r in good])) if good else float("nan")
             for k in LossReport.LOSS_FIELDS}
    val = validate(state.restorer, data.val, state.device) if data.val else {}
    rec = {"event": "epoch", "epoch": state.epoch, "stage": state.stage, "round": state.round,
           "folds": state.pl.fold_count, **{f"mean_{k}": v for k, v in means.items()},
           **{f"val_{k}": v for k, v in val.items()}}
    state.record(rec)
    log.info("epoch %d stage %s round %d | gan %.4f bgm %.4f res %.4f res_sc %.4f | val psnr %s ssim %s",
             state.epoch, state.stage, state.round, means["gan_total"], means["bgm"],
             means["res"], means["res_sc"],
             f"{val['psnr']:.3f}" if val else "-", f"{val['ssim']:.4f}" if val else "-")
    state.epoch += 1
    return rec


def _set_stage(state: TrainState, stage: str) -> None:
    if state.stage == stage:
        return
    if STAGES.index(stage) != STAGES.index(state.stage) + 1:
        raise RuntimeError(f"illegal stage transition {state.stage} -> {stage}")
    state.record({"event": "stage", "from": state.stage, "to": stage, "epoch": state.epoch})
    state.stage = stage
    state.round = 0


def _save(state: TrainState, tag: str) -> Path | None:
    if state.out_dir is None:
        return None
    path = state.out_dir / "checkpoints" / f"{len(state.checkpoints):03d}_{tag}.pt"
    ckpt.save_checkpoint(state, path)
    state.checkpoints.append(str(path))
    return path


def _round_record(state: TrainState, data: TrainData) -> dict:
    val = validate(state.restorer, data.val, state.device) if data.val else {}
    rec = {"event": "round", "stage": state.stage, "round": state.round, "epoch": state.epoch,
           "folds": state.pl.fold_count, **{f"val_{k}": v for k, v in val.items()}}
    state.record(rec)
    return rec


def run_basic_stage(state: TrainState, data: TrainData) -> TrainState:
    """Epochs ``[0, s1)`` with the stage-0 Gaussian convolution in the prompt module."""
    s1 = state.config.schedule.s1
    if state.stage != "basic":
        raise RuntimeError(f"basic stage requested in stage {state.stage}")
    while state.epoch < s1:
        run_epoch(state, data)
    rec = _round_record(state, data)
    log.info("basic stage done at epoch %d, val psnr %s", state.epoch, rec.get("val_psnr"))
    _save(state, "stage1_end")
    return state


def sc_replace(state: TrainState) -> TrainState:
    """Freeze a copy of the live restorer into the prompt module."""
    if state.stage not in ("sc", "rebsc"):
        raise RuntimeError("replacement only happens in the sc and rebsc stages")
    old = state.pl.frozen
    pre = old.param_hash if isinstance(old, RestorerSnapshot) else param_hash(old)
    state.pl = PromptExtractor(snapshot(state.restorer), fold_count=state.pl.fold_count)
    state.replacements += 1
    state.record({"event": "replace", "stage": state.stage, "epoch": state.epoch,
                  "count": state.replacements, "pre_hash": pre, "post_hash": state.pl.frozen.param_hash})
    return state


def _run_rounds(state, data, stage, plan, folds_for_round, early_stop_db=None):
    for r, start, end in plan:
        if state.epoch >= end:
            continue
        _set_stage(state, stage)
        if state.round < r:
            state.round = r
            sc_replace(state)
            state.pl.set_folds(folds_for_round(r))
            _save(state, f"{stage}_round{r}")
        while state.epoch < end:
            run_epoch(state, data)
        rec = _round_record(state, data)
        if early_stop_db is not None and data.val:
            prev = [x for x in state.events("round") if x["stage"] == stage and x["round"] == r - 1]
            if prev and rec["val_psnr"] - prev[-1]["val_psnr"] < early_stop_db:
                log.info("%s early stop after round %d", stage, r)
                state.epoch = plan[-1][2]
                break
    return state


def run_sc_stage(state: TrainState, data: TrainData) -> TrainState:
    """``sc_iterations`` replace-then-retrain rounds over epochs ``[s1, s2)``."""
    s = state.config.schedule
    plan = round_plan(s.s1, s.s2, s.sc_iterations)
    _run_rounds(state, data, "sc", plan, lambda r: 1, s.early_stop_db)
    _save(state, "stage2_end")
    return state


def run_rebsc_stage(state: TrainState, data: TrainData) -> TrainState:
    """One round per entry of ``rebsc_folds`` over epochs ``[s2, s3)``."""
    s = state.config.schedule
    plan = round_plan(s.s2, s.s3, len(s.rebsc_folds))
    _run_rounds(state, data, "rebsc", plan, lambda r: s.rebsc_folds[r - 1])
    _save(state, "stage3_end")
    return state


@dataclass
class TrainResult:
    state: TrainState
    final_checkpoint: Path | None

    def round_curve(self) -> list:
        """(label, val_psnr) over the basic stage end and every SC/Reb-SC round."""
        out = []
        for rec in self.state.events("round"):
            if "val_psnr" in rec:
                label = "basic" if rec["stage"] == "basic" else f"{rec['stage']}{rec['round']}"
                out.append((label, rec["val_psnr"]))
        return out


def train(config: ExperimentConfig, data: TrainData | None = None, resume=None,
          allow_config_mismatch: bool = False, stages=STAGES) -> TrainResult:
    """Run basic -> sc -> rebsc, checkpointing at boundaries and replacements."""
    data = data or TrainData.from_config(config)
    out = Path(config.output_dir)
    if resume is not None:
        state = ckpt.load_checkpoint(resume, config, out_dir=out, allow_mismatch=allow_config_mismatch)
    else:
        state = init_state(config, out_dir=out)
    torch.use_deterministic_algorithms(True)
    final = None
    try:
        if state.stage == "basic" and state.epoch < config.schedule.s1:
            run_basic_stage(state, data)
        if "sc" in stages and state.epoch < config.schedule.s2:
            run_sc_stage(state, data)
        if "rebsc" in stages and state.epoch < config.schedule.s3:
            run_rebsc_stage(state, data)
        final = _save(state, "final")
    except Exception:
        _save(state, "failure")
        raise
    return TrainResult(state, final)
