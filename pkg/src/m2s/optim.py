"""Two-phase optimizer: AdamW first, then SGD with classical momentum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Parameter


@dataclass
class OptimHyper:
    lr: float
    momentum: float = 0.912
    weight_decay: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


def reset_state(params: list[Parameter]) -> None:
    for p in params:
        p.state = {}


def clip_grad_norm(params: list[Parameter], max_norm: float) -> float:
    """Rescale all gradients together so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    params = [p for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float(np.square(p.grad, dtype=np.float64).sum()) for p in params)))
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)
    return norm


def optimizer_step(params: list[Parameter], phase: str, hyper: OptimHyper) -> None:
    """Apply one in-place update to every parameter.

    ``adamw`` decouples weight decay from the adaptive step; ``sgd_momentum``
    folds it into the gradient and then runs ``v <- m*v + g; p <- p - lr*v``.
    Parameters flagged ``decay=False`` (biases, scalars) are never decayed.
    """
    if phase not in ("adamw", "sgd_momentum"):
        raise ValueError(f"unknown optimizer phase {phase!r}")
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {p.name!r} has no gradient")
        g = p.grad.astype(p.data.dtype, copy=False)
        wd = hyper.weight_decay if p.decay else 0.0
        if phase == "adamw":
            b1, b2 = hyper.betas
            st = p.state
            if "m" not in st:
                st["m"] = np.zeros_like(p.data)
                st["v"] = np.zeros_like(p.data)
                st["t"] = 0
            st["t"] += 1
            t = st["t"]
            st["m"] = b1 * st["m"] + (1 - b1) * g
            st["v"] = b2 * st["v"] + (1 - b2) * g * g
            mhat = st["m"] / (1 - b1 ** t)
            vhat = st["v"] / (1 - b2 ** t)
            if wd:
                p.data -= hyper.lr * wd * p.data
            p.data -= (hyper.lr * mhat / (np.sqrt(vhat) + hyper.eps)).astype(p.data.dtype)
        else:
            if wd:
                g = g + wd * p.data
            v = p.state.get("velocity")
            v = g.copy() if v is None else hyper.momentum * v + g
            p.state["velocity"] = v
            p.data -= (hyper.lr * v).astype(p.data.dtype)
