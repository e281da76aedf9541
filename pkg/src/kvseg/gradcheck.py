"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .errors import NumericError
from .tensor import Tensor

FD_STEP = 1e-5


def _relative_error(g_ad: np.ndarray, g_fd: np.ndarray) -> np.ndarray:
    denom = np.maximum(1.0, np.maximum(np.abs(g_ad), np.abs(g_fd)))
    return np.abs(g_ad - g_fd) / denom


@dataclass
class GradientReport:
    """Per-parameter max relative error, and how many probed coordinates were
    left out because the +-step evaluations switched a ReLU or max-pool branch."""

    errors: dict[str, float] = field(default_factory=dict)
    kinked: dict[str, int] = field(default_factory=dict)
    probed: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def gradient_report(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = FD_STEP,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradientReport:
    """Compare reverse-mode gradients with central differences.

    ``f`` recomputes a scalar from the current values of ``params``. Each
    entry is perturbed by ``+-step`` and the central difference is compared
    with the reverse-mode gradient using
    ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``.

    A central difference that straddles a ReLU or max-pool switch estimates
    neither one-sided derivative, so such coordinates are excluded and
    counted in ``kinked``. A tensor whose every probed coordinate is kinked
    cannot be verified and gets an infinite error.

    ``max_entries`` caps the number of coordinates probed per tensor (chosen
    by a seeded RNG); ``None`` probes every coordinate.
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise NumericError("gradient checks require double precision", path=name)
        p.grad = None
    with T.record_branches() as base:
        out = f()
    if out.size != 1:
        raise NumericError("gradient check target must be a scalar")
    out.backward()

    def probe() -> tuple[float, bool]:
        with T.record_branches() as seen:
            value = f().item()
        return value, seen == base

    rng = np.random.default_rng(seed)
    report = GradientReport()
    for name, p in params.items():
        g_ad = np.zeros_like(p.data) if p.grad is None else np.asarray(p.grad, dtype=np.float64)
        if not np.all(np.isfinite(g_ad)):
            raise NumericError("non-finite analytic gradient", path=name)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        g_fd = np.empty(idx.size)
        smooth = np.ones(idx.size, dtype=bool)
        for slot, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            up, same_up = probe()
            flat[i] = orig - step
            down, same_down = probe()
            flat[i] = orig
            g_fd[slot] = (up - down) / (2.0 * step)
            smooth[slot] = same_up and same_down
        if not np.all(np.isfinite(g_fd)):
            raise NumericError("non-finite finite-difference estimate", path=name)
        report.probed[name] = int(idx.size)
        report.kinked[name] = int(idx.size - smooth.sum())
        if not idx.size:
            report.errors[name] = 0.0
        elif not smooth.any():
            report.errors[name] = float("inf")
        else:
            err = _relative_error(g_ad.reshape(-1)[idx][smooth], g_fd[smooth])
            report.errors[name] = float(err.max())
    return report


def gradient_errors(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = FD_STEP,
    max_entries: int | None = None,
    seed: int = 0,
) -> dict[str, float]:
    """Max relative error per named parameter (see ``gradient_report``)."""
    return gradient_report(f, params, step, max_entries, seed).errors


def gradient_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor] | list[Tensor],
    step: float = FD_STEP,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients."""
    if not isinstance(params, Mapping):
        params = {str(i): p for i, p in enumerate(params)}
    errs = gradient_errors(f, params, step=step, max_entries=max_entries, seed=seed)
    return max(errs.values(), default=0.0)


def model_gradient_report(
    cfg,
    seed: int = 0,
    batch: int = 2,
    max_entries: int | None = None,
    step: float = FD_STEP,
) -> GradientReport:
    """Gradient report for the full segmentation loss of ``cfg``.

    Builds the model in double precision from ``seed`` and uses a seeded
    random image batch and random target mask. Batch-norm stays in training
    mode so the loss is a pure function of the parameters.
    """
    from .model import build_model

    rng = np.random.default_rng(seed)
    with T.precision("double"):
        model = build_model(cfg, seed=seed)
        model.train()
        size = cfg.image_size
        images = Tensor(rng.standard_normal((batch, 3, size, size)))
        target = rng.integers(0, cfg.num_classes, size=(batch, size, size))
        params = dict(model.named_parameters())
        return gradient_report(lambda: T.cross_entropy(model(images), target), params, step, max_entries, seed)


def model_gradient_errors(cfg, seed: int = 0, batch: int = 2, max_entries: int | None = None,
                          step: float = FD_STEP) -> dict[str, float]:
    return model_gradient_report(cfg, seed, batch, max_entries, step).errors


def group_errors(errors: Mapping[str, float]) -> dict[str, float]:
    """Collapse per-parameter errors to their owning module (max)."""
    groups: dict[str, float] = {}
    for name, err in errors.items():
        module = name.rsplit(".", 1)[0] if "." in name else "<root>"
        groups[module] = max(groups.get(module, 0.0), err)
    return groups
