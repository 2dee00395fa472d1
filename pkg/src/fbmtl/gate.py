"""Gumbel-max gating of feedback infusion positions.

A gate picks one of ``m`` candidate blocks in the target branch for each
example. The forward pass uses the hard one-hot choice; gradients flow
through a tempered softmax built from the same Gumbel draw
(straight-through pairing).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

U_MIN = 1e-12
MODES = ("verbatim", "learned")


class GateStateError(RuntimeError):
    pass


def sample_gumbel(m: int, rng: np.random.Generator, size: tuple[int, ...] = ()) -> np.ndarray:
    """Standard Gumbel draws ``-log(-log U)`` with shape ``size + (m,)``."""
    if m < 1:
        raise ValueError("need at least one candidate")
    u = rng.random(size + (m,))
    u = np.clip(u, U_MIN, 1.0 - U_MIN)
    return -np.log(-np.log(u))


def one_hot(index: np.ndarray, m: int) -> np.ndarray:
    index = np.asarray(index)
    out = np.zeros(index.shape + (m,))
    np.put_along_axis(out, index[..., None], 1.0, -1)
    return out


class GumbelGate:
    """Per-route gate over ``m`` infusion candidates.

    ``mode="verbatim"`` scores each candidate with ``max|y_tilde| + G_t``;
    ``mode="learned"`` scores with a trainable logit vector ``z`` instead of
    the infinity norm, which makes the position choice learnable.
    """

    def __init__(self, m: int, mode: str = "learned", temperature: float = 1.0, init: float | list = 0.0):
        if mode not in MODES:
            raise ValueError(f"unknown gate mode {mode!r}; expected one of {MODES}")
        if temperature <= 0:
            raise ValueError("gate temperature must be positive")
        if m < 1:
            raise ValueError("gate needs at least one candidate position")
        self.m = m
        self.mode = mode
        self.temperature = float(temperature)
        z0 = np.full(m, float(init)) if np.isscalar(init) else np.asarray(init, dtype=float)
        if z0.shape != (m,):
            raise ValueError(f"gate init has shape {z0.shape}, expected ({m},)")
        self.logits = Tensor(z0, requires_grad=(mode == "learned"))
        self.last_G: np.ndarray | None = None
        self.last_index: np.ndarray | None = None
        self.last_soft: np.ndarray | None = None

    def parameters(self) -> list[Tensor]:
        return [self.logits] if self.mode == "learned" else []

    def _scores(self, y_tilde: Tensor, G: np.ndarray) -> Tensor:
        if self.mode == "verbatim":
            batch_shape = G.shape[:-1]
            if batch_shape:
                axes = tuple(range(len(batch_shape), y_tilde.ndim))
                ymax = T.inf_norm(y_tilde, axis=axes)
                ymax = T.reshape(ymax, batch_shape + (1,))
            else:
                ymax = T.inf_norm(y_tilde)
            return T.add(ymax, G)
        return T.add(self.logits, G)

    def select(self, y_tilde: Tensor, rng: np.random.Generator | None = None,
               batch: int | None = None, noise: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``G`` and return ``(t_hat, one_hot)``; ties go to the lowest index."""
        if y_tilde.size == 0:
            raise ValueError("cannot gate an empty feedback signal")
        size = () if batch is None else (batch,)
        if noise:
            if rng is None:
                raise ValueError("noisy gate selection needs an rng")
            G = sample_gumbel(self.m, rng, size)
        else:
            G = np.zeros(size + (self.m,))
        return self.select_with(y_tilde, G)

    def select_with(self, y_tilde: Tensor, G: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        G = np.asarray(G, dtype=float)
        scores = self._scores(y_tilde, G).data
        idx = np.argmax(scores, axis=-1)  # first max wins
        self.last_G = G
        self.last_index = idx
        self.last_soft = None
        return idx, one_hot(idx, self.m)

    def backward_weights(self, y_tilde: Tensor) -> Tensor:
        """Soft surrogate ``softmax(scores / tau)`` reusing the stored draw."""
        if self.last_G is None:
            raise GateStateError("backward_weights called before select")
        soft = T.softmax(T.scale(self._scores(y_tilde, self.last_G), 1.0 / self.temperature), axis=-1)
        self.last_soft = soft.data
        return soft

    def straight_through(self, y_tilde: Tensor, rng: np.random.Generator | None,
                         batch: int | None = None, train: bool = True) -> Tensor:
        """Gate weights whose value is the hard one-hot and whose gradient is the soft surrogate's."""
        _, hard = self.select(y_tilde, rng, batch=batch, noise=train)
        if not train:
            return Tensor(hard)
        soft = self.backward_weights(y_tilde)
        # hard + (soft - soft): value stays exactly one-hot
        return T.add(Tensor(hard), T.sub(soft, soft.detach()))


def infuse_gated(gamma, y_tilde: Tensor, t: int) -> Tensor:
    """Feedback signal for candidate ``t`` (1-based): ``gamma[..., t-1] * y_tilde``.

    ``gamma`` has shape ``batch + (m,)``; the weight is broadcast over the
    trailing feature axes of ``y_tilde``.
    """
    gamma = T.as_tensor(gamma)
    m = gamma.shape[-1]
    if not 1 <= t <= m:
        raise ValueError(f"position {t} outside [1, {m}]")
    w = T.take(gamma, t - 1, axis=gamma.ndim - 1)
    extra = y_tilde.ndim - w.ndim
    if extra > 0:
        w = T.reshape(w, w.shape + (1,) * extra)
    return T.mul(w, y_tilde)
