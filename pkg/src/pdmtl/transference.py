"""Pairwise task transference between clients sharing an encoder architecture.

``z[i, j]`` measures how much a step along task ``i``'s encoder gradient
helps task ``j`` (row = source task, column = affected task).  The exact form
takes the step and re-evaluates the loss; the approximate form is its
first-order expansion, a gradient inner product divided by the affected
task's loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nn import ConfigurationError, encoder_head_grads, encoder_head_loss

LOSS_FLOOR = 1e-12


class DegenerateLossError(ValueError):
    """A task's loss is zero or negative, so the loss ratio is undefined."""


@dataclass
class TransferenceMatrix:
    z: np.ndarray
    epoch: int = -1

    @property
    def n(self) -> int:
        return self.z.shape[0]

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "z": self.z.tolist()}


def approx_transference(grads, losses, epoch=-1, scale=1.0, strict=True) -> TransferenceMatrix:
    """``z[i, j] = scale * <g_j, g_i> / loss_j``.

    Parameters
    ----------
    grads : (n, p) array-like
        Flat encoder gradients, one row per client, all on the same batch.
    losses : (n,) array-like
        Each client's own-task loss on that batch.
    strict : bool
        Raise :class:`DegenerateLossError` on a loss ``<= 0``.  Otherwise any
        task with loss below ``LOSS_FLOOR`` gets a zero row and column.
    """
    g = np.asarray(grads, dtype=np.float64)
    losses = np.asarray(losses, dtype=np.float64)
    if g.ndim != 2 or losses.shape != (g.shape[0],):
        raise ConfigurationError(
            f"need one gradient row per loss, got grads {g.shape} and losses {losses.shape}"
        )
    degenerate = losses <= (0.0 if strict else LOSS_FLOOR)
    if strict and degenerate.any():
        raise DegenerateLossError(f"non-positive loss for tasks {np.flatnonzero(degenerate).tolist()}")
    gram = g @ g.T
    safe = np.where(degenerate, 1.0, losses)
    z = scale * gram / safe[None, :]
    z[degenerate, :] = 0.0
    z[:, degenerate] = 0.0
    return TransferenceMatrix(z, epoch)


def exact_transference(clients: Sequence, shared_x, shared_y, lr: float, epoch=-1) -> TransferenceMatrix:
    """Loss-ratio transference from an actual SGD step on each encoder.

    ``clients`` need ``encoder`` and ``head`` attributes holding :class:`Mlp`
    networks; ``shared_y[:, j]`` holds task ``j``'s labels for ``shared_x``.
    For the pair ``(i, j)`` client ``j``'s encoder takes one plain SGD step of
    size ``lr`` on task ``i``'s loss (task ``i``'s head, gradient evaluated at
    client ``j``'s encoder); task ``j``'s loss is then re-evaluated with its
    current head.  Client parameters are never modified.
    """
    n = len(clients)
    shared_y = np.asarray(shared_y)
    base = np.array(
        [encoder_head_loss(c.encoder, c.head, shared_x, shared_y[:, j]) for j, c in enumerate(clients)]
    )
    if (base <= 0).any():
        raise DegenerateLossError(f"non-positive loss for tasks {np.flatnonzero(base <= 0).tolist()}")
    z = np.zeros((n, n))
    for j, cj in enumerate(clients):
        probe = cj.encoder.copy()
        for i, ci in enumerate(clients):
            _, g, _ = encoder_head_grads(probe, ci.head, shared_x, shared_y[:, i], head_grad=False)
            stepped = probe.unflatten(cj.encoder.params - lr * g)
            z[i, j] = 1.0 - encoder_head_loss(stepped, cj.head, shared_x, shared_y[:, j]) / base[j]
    return TransferenceMatrix(z, epoch)
