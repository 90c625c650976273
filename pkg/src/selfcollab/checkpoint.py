"""Versioned training checkpoints."""

from __future__ import annotations

import logging
from pathlib import Path

import torch

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(state, path) -> Path:
    from .networks import RestorerSnapshot

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frozen = state.pl.frozen
    payload = {
        "version": FORMAT_VERSION,
        "config": state.config.to_dict(),
        "config_hash": state.config.hash(),
        "generator": state.generator.state_dict(),
        "discriminator": state.discriminator.state_dict(),
        "restorer": state.restorer.state_dict(),
        "stage0": state.stage0.state_dict(),
        "snapshot": frozen.state_dict() if isinstance(frozen, RestorerSnapshot) else None,
        "fold_count": state.pl.fold_count,
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
        "opt_r": state.opt_r.state_dict(),
        "counters": {
            "epoch": state.epoch, "stage": state.stage, "round": state.round, "step": state.step,
            "aborted_steps": state.aborted_steps, "replacements": state.replacements,
        },
        "history": state.history,
    }
    tmp = path.with_suffix(".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format")
    return payload


def load_checkpoint(path, config=None, out_dir=None, allow_mismatch: bool = False, device=None):
    """Rebuild a ``TrainState`` from ``path``.

    If ``config`` is given its hash must match the stored one unless
    ``allow_mismatch`` is set.
    """
    from .config import ExperimentConfig
    from .networks import RestorerSnapshot, build_restorer
    from .prompt import PromptExtractor
    from .trainer import init_state

    payload = read_checkpoint(path)
    stored = ExperimentConfig.from_dict(payload["config"])
    if config is None:
        config = stored
    elif config.hash() != payload["config_hash"]:
        if not allow_mismatch:
            raise CheckpointError(
                f"{path}: config hash {config.hash()} does not match checkpoint {payload['config_hash']}")
        log.warning("loading checkpoint with mismatched config hash")

    state = init_state(config, out_dir=out_dir, device=device)
    state.generator.load_state_dict(payload["generator"])
    state.discriminator.load_state_dict(payload["discriminator"])
    state.restorer.load_state_dict(payload["restorer"])
    state.stage0.load_state_dict(payload["stage0"])
    state.opt_g.load_state_dict(payload["opt_g"])
    state.opt_d.load_state_dict(payload["opt_d"])
    state.opt_r.load_state_dict(payload["opt_r"])
    if payload["snapshot"] is not None:
        src = build_restorer(config.networks.restorer, config.networks.channels).to(state.device)
        src.load_state_dict(payload["snapshot"])
        state.pl = PromptExtractor(RestorerSnapshot(src))
    state.pl.set_folds(payload["fold_count"])
    for k, v in payload["counters"].items():
        setattr(state, k, v)
    state.history = list(payload["history"])
    return state


def load_restorer(path, device=None):
    """Restorer network (eval mode) and config from a checkpoint."""
    from .config import ExperimentConfig
    from .networks import build_restorer

    payload = read_checkpoint(path)
    config = ExperimentConfig.from_dict(payload["config"])
    r = build_restorer(config.networks.restorer, config.networks.channels)
    r.load_state_dict(payload["restorer"])
    if device is not None:
        r = r.to(device)
    r.eval()
    return r, config, payload["config_hash"]


def checkpoint_hash(path) -> str:
    import hashlib

    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
