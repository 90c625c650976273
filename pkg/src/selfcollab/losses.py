"""Training objectives: least-squares adversarial terms, BGM, restorer losses."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import torch

from .imagecore import gaussian_blur, ssim, BlurKernel, SSIM_WINDOW

# Synthesis paths in adversarial-term order (adv1..adv4).
PATHS = ("y_s_syn", "x_u_syn", "y_u_syn", "x_s_syn")


@dataclass(frozen=True)
class LossWeights:
    bgm: float = 6.0
    ssim: float = 1.0
    sigma: tuple = ((3, 0.01), (9, 0.1), (15, 1.0))
    ssim_window: int = SSIM_WINDOW

    def __post_init__(self):
        sigma = tuple((int(s), float(lam)) for s, lam in
                      (self.sigma.items() if isinstance(self.sigma, dict) else self.sigma))
        object.__setattr__(self, "sigma", sigma)
        if self.bgm < 0 or self.ssim < 0 or any(lam < 0 for _, lam in sigma):
            raise ValueError("loss weights must be nonnegative")


class NonFiniteLoss(ValueError):
    pass


def _check_finite(name, t):
    if not torch.isfinite(t).all():
        raise NonFiniteLoss(f"non-finite values in {name}")


def adv_loss_discriminator(score_real, score_fake) -> torch.Tensor:
    """``mean((D(y) - 1)^2) + mean(D(fake)^2)``."""
    _check_finite("score_real", score_real)
    _check_finite("score_fake", score_fake)
    return torch.mean((score_real - 1) ** 2) + torch.mean(score_fake**2)


def adv_loss_generator(score_fake) -> torch.Tensor:
    return torch.mean((score_fake - 1) ** 2)


def gan_terms(score_real, fakes: dict, paths=PATHS) -> dict:
    """Per-path discriminator-form terms against the same real scores."""
    missing = [p for p in paths if p not in fakes]
    if missing:
        raise ValueError(f"missing synthesis paths: {missing}")
    return {p: adv_loss_discriminator(score_real, fakes[p]) for p in paths}


def gan_loss(score_real, fakes: dict, paths=PATHS, dedup_real: bool = False) -> torch.Tensor:
    """Sum of the adversarial terms over ``paths``.

    With ``dedup_real`` the real term is counted once instead of once per path.
    """
    terms = gan_terms(score_real, fakes, paths)
    total = sum(terms[p] for p in paths)
    if dedup_real and len(paths) > 1:
        total = total - (len(paths) - 1) * torch.mean((score_real - 1) ** 2)
    return total


def bgm_loss(x, x_syn, w: LossWeights = LossWeights()) -> torch.Tensor:
    """Multi-scale blurred L1 between a clean image and its synthesis."""
    if x.shape != x_syn.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_syn.shape)}")
    total = x.new_zeros(())
    for size, lam in w.sigma:
        k = BlurKernel(size)
        total = total + lam * torch.mean(torch.abs(gaussian_blur(x, k) - gaussian_blur(x_syn, k)))
    return total


def _l1_ssim(a, b, w: LossWeights):
    """Per-image L1 and SSIM-loss terms of batched inputs, shape (N,)."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    l1 = torch.abs(a - b).flatten(1).mean(1)
    s = ssim(a, b, window_size=w.ssim_window, reduce=False)
    return l1, 1 - s


def res_loss(pairs, w: LossWeights = LossWeights()) -> torch.Tensor:
    """``1/(2m) * sum_i [ |x_rec - x|_1 + lambda_ssim * (1 - SSIM) ]``.

    ``pairs`` holds ``(x_rec, x)`` tuples; batched tensors count one pair
    per batch item.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("res_loss needs at least one pair")
    total, m = 0.0, 0
    for x_rec, x in pairs:
        l1, ls = _l1_ssim(x_rec, x, w)
        total = total + (l1 + w.ssim * ls).sum()
        m += l1.shape[0]
    return total / (2 * m)


def consistency_loss(current, frozen_out, w: LossWeights = LossWeights()) -> torch.Tensor:
    """``|current - frozen_out|_1 + lambda_ssim * (1 - SSIM)``, batch-averaged."""
    l1, ls = _l1_ssim(current, frozen_out, w)
    return l1.mean() + w.ssim * ls.mean()


def res_sc_loss(base_pairs, x_r, y_r, r_fake1, r_fake2, w: LossWeights = LossWeights()):
    """Restorer loss plus agreement with the frozen restorer's outputs."""
    return (res_loss(base_pairs, w)
            + consistency_loss(x_r, r_fake1, w)
            + consistency_loss(y_r, r_fake2, w))


def total_objective(gan_total, bgm, res_term, w: LossWeights) -> float:
    return gan_total + w.bgm * bgm + res_term


@dataclass
class LossReport:
    """One optimizer step's loss decomposition. Zero for inactive terms."""

    adv1: float = 0.0
    adv2: float = 0.0
    adv3: float = 0.0
    adv4: float = 0.0
    gan_total: float = 0.0
    bgm: float = 0.0
    res: float = 0.0
    res_sc: float = 0.0
    grand_total: float = 0.0
    g_adv: float = 0.0
    step: int = 0
    epoch: int = 0
    stage: str = "basic"
    round: int = 0
    folds: int = 1
    extra: dict = field(default_factory=dict)

    LOSS_FIELDS = ("adv1", "adv2", "adv3", "adv4", "gan_total", "bgm", "res", "res_sc", "grand_total")

    def losses(self) -> dict:
        return {k: getattr(self, k) for k in self.LOSS_FIELDS}

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.losses().values()) and math.isfinite(self.g_adv)

    def to_record(self) -> dict:
        rec = asdict(self)
        extra = rec.pop("extra")
        rec.update(extra)
        return rec
