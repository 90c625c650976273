"""Degradation prompts: the residual left after a frozen restoration."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .imagecore import dihedral_apply, dihedral_inverse, fold_transforms


def fold_average(restorer, y, transforms) -> torch.Tensor:
    """Mean of restorations over transformed copies of ``y``.

    Each restoration is mapped back with the inverse transform before
    averaging, so all folds are spatially aligned.
    """
    outs = []
    for t in transforms:
        r = restorer(dihedral_apply(y, t))
        outs.append(dihedral_apply(r, dihedral_inverse(t)))
    if len(outs) == 1:
        return outs[0]
    return torch.stack(outs).sum(0) / len(outs)


@dataclass
class PromptExtractor:
    """Wraps the frozen restorer of the prompt module.

    ``frozen`` is a ``RestorerSnapshot`` or, before the first replacement,
    the stage-0 Gaussian convolution.
    """

    frozen: object
    fold_count: int = 1
    fold_transforms: tuple = field(init=False)

    def __post_init__(self):
        self.set_folds(self.fold_count)

    def set_folds(self, k: int) -> None:
        self.fold_transforms = fold_transforms(k)
        self.fold_count = k

    def restore(self, y, folds: bool = False):
        if folds:
            return fold_average(self.frozen, y, self.fold_transforms)
        return self.frozen(y)


def extract_prompt(pe: PromptExtractor, y) -> torch.Tensor:
    """``y - frozen(y)`` clamped to [-1, 1]."""
    return (y - pe.frozen(y)).clamp(-1.0, 1.0)


def extract_prompt_ensembled(pe: PromptExtractor, y) -> torch.Tensor:
    """Like ``extract_prompt`` but with the frozen restoration fold-averaged."""
    return (y - fold_average(pe.frozen, y, pe.fold_transforms)).clamp(-1.0, 1.0)


def raw_prompt(y) -> torch.Tensor:
    """Prompt used when the prompt module is disabled: the degraded image itself."""
    return y

