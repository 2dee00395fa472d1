"""Feedback multi-task model.

A shared stack turns the input into shared features ``y_c``. Each task owns
a branch of blocks ending in a label-space head. Routes carry the previous
iteration's prediction of a source task through an amplifier (affine
projection) into a block of the target branch, where it is concatenated with
that block's regular input. ``iterate`` runs the synchronous K-step update
in which every task at step k reads its siblings' step k-1 outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import tensor as T
from .gate import GumbelGate, infuse_gated
from .tensor import Tensor

BLOCK_KINDS = ("tanh", "relu", "recurrent", "linear")
INIT_MODES = ("zeros", "uniform", "random")
GATED = "gated"

Position = Union[int, str]


@dataclass(frozen=True)
class Task:
    name: str
    n_labels: int
    level: str = "sentence"  # "sentence" or "token"
    output: str = "softmax"  # "softmax" or "linear"

    def __post_init__(self):
        if self.level not in ("sentence", "token"):
            raise ValueError(f"task level must be 'sentence' or 'token', got {self.level!r}")
        if self.output not in ("softmax", "linear"):
            raise ValueError(f"task output must be 'softmax' or 'linear', got {self.output!r}")
        if self.n_labels < 1:
            raise ValueError("task needs at least one label")


class LayerBlock:
    """Affine map plus activation, optionally accepting a feedback slot.

    With ``extra_width > 0`` the block input is ``concat(feedback, h)``, so
    the weight matrix has ``extra_width + in_width`` rows; the first
    ``extra_width`` rows act on the feedback signal.
    """

    def __init__(self, kind: str, in_width: int, out_width: int, rng: np.random.Generator | None = None,
                 extra_width: int = 0):
        if kind not in BLOCK_KINDS:
            raise ValueError(f"unknown block kind {kind!r}")
        if out_width <= 0 or in_width <= 0 or extra_width < 0:
            raise ValueError("block widths must be positive")
        self.kind = kind
        self.in_width = in_width
        self.out_width = out_width
        self.extra_width = extra_width
        rows = in_width + extra_width
        if rng is None:
            w = np.zeros((rows, out_width))
        else:
            w = rng.normal(0.0, 1.0 / np.sqrt(rows), size=(rows, out_width))
        self.W = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(out_width), requires_grad=True)
        self.U = None
        if kind == "recurrent":
            u = np.zeros((out_width, out_width)) if rng is None else \
                rng.normal(0.0, 1.0 / np.sqrt(out_width), size=(out_width, out_width))
            self.U = Tensor(u, requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        out = {"W": self.W, "b": self.b}
        if self.U is not None:
            out["U"] = self.U
        return out

    def _activate(self, z: Tensor) -> Tensor:
        if self.kind == "relu":
            return T.relu(z)
        if self.kind == "linear":
            return z
        return T.tanh(z)

    def __call__(self, h: Tensor, extra: Tensor | None = None) -> Tensor:
        if h.shape[-1] != self.in_width:
            raise ValueError(f"block expects input width {self.in_width}, got {h.shape[-1]}")
        if self.extra_width:
            if extra is None:
                extra = Tensor(np.zeros(h.shape[:-1] + (self.extra_width,)))
            elif extra.shape[-1] != self.extra_width:
                raise ValueError(f"feedback width {extra.shape[-1]} != slot width {self.extra_width}")
            if extra.shape[:-1] != h.shape[:-1]:
                # sentence-level signal into a token-level block: repeat over time
                if extra.ndim < h.ndim:
                    extra = T.reshape(extra, extra.shape[:-1] + (1,) * (h.ndim - extra.ndim) + extra.shape[-1:])
                extra = T.broadcast_to(extra, h.shape[:-1] + (self.extra_width,))
            h = T.concat([extra, h], axis=-1)
        elif extra is not None:
            raise ValueError("block has no feedback slot")
        if self.kind == "recurrent":
            return self._recur(h)
        return self._activate(T.add(T.matmul(h, self.W), self.b))

    def _recur(self, h: Tensor) -> Tensor:
        # Elman cell over axis 1 of a (batch, time, width) input
        if h.ndim != 3:
            raise ValueError("recurrent block needs a (batch, time, width) input")
        proj = T.add(T.matmul(h, self.W), self.b)
        state = None
        outs = []
        for t in range(h.shape[1]):
            z = T.take(proj, t, axis=1)
            if state is not None:
                z = T.add(z, T.matmul(state, self.U))
            state = T.tanh(z)
            outs.append(state)
        return T.stack(outs, axis=1)


class Amplifier:
    """Affine projection of a source task's output to the target feature width.

    Token-level outputs feeding a sentence-level branch are mean-pooled over
    unmasked tokens first; sentence-level outputs feeding a token-level branch
    are broadcast over time by the consuming block.
    """

    def __init__(self, source: Task, target: Task, width: int, rng: np.random.Generator | None = None):
        self.source = source
        self.target = target
        self.width = width
        self.block = LayerBlock("linear", source.n_labels, width, rng)

    @property
    def name(self) -> str:
        return f"{self.source.name}->{self.target.name}"

    def parameters(self) -> dict[str, Tensor]:
        return self.block.parameters()

    def __call__(self, y_source: Tensor, mask: np.ndarray | None = None) -> Tensor:
        if y_source.shape[-1] != self.source.n_labels:
            raise ValueError(f"amplifier {self.name} expects width {self.source.n_labels}, got {y_source.shape[-1]}")
        if self.source.level == "token" and self.target.level == "sentence":
            y_source = masked_mean(y_source, mask)
        return self.block(y_source)


def masked_mean(h: Tensor, mask: np.ndarray | None) -> Tensor:
    """Mean over axis 1 of a (batch, time, width) tensor, ignoring padding."""
    if mask is None:
        return T.mean(h, axis=1)
    m = np.asarray(mask, dtype=float)
    denom = np.maximum(m.sum(axis=1, keepdims=True), 1.0)
    w = (m / denom)[..., None]
    return T.sum_(T.mul(h, w), axis=1)


@dataclass
class Route:
    amp: Amplifier
    position: Position
    gate: GumbelGate | None = None

    @property
    def name(self) -> str:
        return self.amp.name

    @property
    def gated(self) -> bool:
        return self.position == GATED


@dataclass
class Branch:
    task: Task
    blocks: list[LayerBlock]
    pool: bool = False  # mean-pool token features before the first block

    def __len__(self) -> int:
        return len(self.blocks)


@dataclass
class PredictionTrace:
    """Per-task outputs ``y^0 .. y^K`` of one prediction."""

    outputs: dict[str, list[Tensor]]
    logits: dict[str, Tensor]
    K: int
    init: str
    selections: dict[str, list[np.ndarray]] = field(default_factory=dict)

    def final(self, task: str) -> Tensor:
        return self.outputs[task][-1]

    def __getitem__(self, task: str) -> list[Tensor]:
        return self.outputs[task]


class FeedbackModel:
    def __init__(self, tasks: list[Task], shared: list[LayerBlock], branches: dict[str, Branch],
                 routes: list[Route], embedding: Tensor | None = None):
        self.tasks = {t.name: t for t in tasks}
        self.shared = shared
        self.branches = branches
        self.routes = routes
        self.embedding = embedding
        for r in routes:
            if r.gated and r.gate is None:
                raise ValueError(f"gated route {r.name} has no gate attached")
            if not r.gated:
                m = len(branches[r.amp.target.name])
                if not 1 <= int(r.position) <= m:
                    raise ValueError(f"route {r.name} position {r.position} outside [1, {m}]")

    # -- parameters -------------------------------------------------------
    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.embedding is not None:
            out["embedding"] = self.embedding
        for i, blk in enumerate(self.shared):
            for k, v in blk.parameters().items():
                out[f"shared.{i}.{k}"] = v
        for name, br in self.branches.items():
            for i, blk in enumerate(br.blocks):
                for k, v in blk.parameters().items():
                    out[f"branch.{name}.{i}.{k}"] = v
        for r in self.routes:
            for k, v in r.amp.parameters().items():
                out[f"amp.{r.name}.{k}"] = v
            if r.gate is not None:
                for p in r.gate.parameters():
                    out[f"gate.{r.name}.z"] = p
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    # -- forward pieces ---------------------------------------------------
    def forward_shared(self, x) -> Tensor:
        if self.embedding is not None and not isinstance(x, Tensor):
            h = T.embedding(self.embedding, x)
        else:
            h = T.as_tensor(x)
        for blk in self.shared:
            h = blk(h)
        return h

    def amplify(self, route: Route, y_source: Tensor, mask=None) -> Tensor:
        return route.amp(y_source, mask)

    def forward_branch(self, task: str, y_c: Tensor, infusions: dict[int, Tensor] | None = None,
                       mask=None) -> tuple[Tensor, Tensor]:
        """Run one branch; returns ``(head_pre_activation, output)``."""
        br = self.branches[task]
        infusions = infusions or {}
        for pos in infusions:
            if not 1 <= pos <= len(br):
                raise ValueError(f"infusion position {pos} outside [1, {len(br)}]")
        h = masked_mean(y_c, mask) if br.pool else y_c
        for t, blk in enumerate(br.blocks, start=1):
            h = blk(h, infusions.get(t))
        out = T.softmax(h, axis=-1) if br.task.output == "softmax" else h
        return h, out

    def initial_outputs(self, task: str, batch_shape: tuple[int, ...], init: str,
                        rng: np.random.Generator | None) -> Tensor:
        n = self.tasks[task].n_labels
        shape = batch_shape + (n,)
        if init == "zeros":
            return Tensor(np.zeros(shape))
        if init == "uniform":
            return Tensor(np.full(shape, 1.0 / n))
        if init == "random":
            if rng is None:
                raise ValueError("random initial outputs need an rng")
            return Tensor(rng.dirichlet(np.ones(n), size=batch_shape))
        raise ValueError(f"unknown init mode {init!r}; expected one of {INIT_MODES}")

    def _batch_shape(self, task: str, y_c: Tensor) -> tuple[int, ...]:
        return y_c.shape[:1] if self.branches[task].pool else y_c.shape[:-1]

    def iterate(self, x, K: int, init: str = "uniform", rng: np.random.Generator | None = None,
                mask=None, train: bool = False, feedback: bool = True) -> PredictionTrace:
        """Unrolled synchronous feedback iteration for ``K`` steps.

        With ``train`` the gates draw fresh Gumbel noise per step and example;
        otherwise gating is the noise-free argmax. ``feedback=False`` feeds
        nothing into the feedback slots (the static model).
        """
        if K < 1:
            raise ValueError("K must be at least 1")
        y_c = self.forward_shared(x)
        outputs = {name: [self.initial_outputs(name, self._batch_shape(name, y_c), init, rng)]
                   for name in self.branches}
        logits: dict[str, Tensor] = {}
        selections: dict[str, list[np.ndarray]] = {r.name: [] for r in self.routes if r.gated}
        batch = y_c.shape[0]
        for _ in range(K):
            infusions: dict[str, dict[int, Tensor]] = {name: {} for name in self.branches}
            if feedback:
                for r in self.routes:
                    y_tilde = self.amplify(r, outputs[r.amp.source.name][-1], mask)
                    slots = infusions[r.amp.target.name]
                    if r.gated:
                        gamma = r.gate.straight_through(y_tilde, rng, batch=batch, train=train)
                        selections[r.name].append(r.gate.last_index)
                        for t in range(1, r.gate.m + 1):
                            _accumulate(slots, t, infuse_gated(gamma, y_tilde, t))
                    else:
                        _accumulate(slots, int(r.position), y_tilde)
            for name in self.branches:
                h, y = self.forward_branch(name, y_c, infusions[name], mask)
                outputs[name].append(y)
                logits[name] = h
        return PredictionTrace(outputs=outputs, logits=logits, K=K, init=init, selections=selections)

    def static_forward(self, x, mask=None) -> dict[str, Tensor]:
        """One pass with no feedback signal; the TRIV reference model."""
        y_c = self.forward_shared(x)
        return {name: self.forward_branch(name, y_c, None, mask)[1] for name in self.branches}


def _accumulate(slots: dict[int, Tensor], t: int, sig: Tensor) -> None:
    """Sum routes sharing a block; a sentence signal is repeated over time to meet a token one."""
    if t not in slots:
        slots[t] = sig
        return
    a, b = slots[t], sig
    if a.ndim != b.ndim:
        lo, hi = (a, b) if a.ndim < b.ndim else (b, a)
        lo = T.broadcast_to(T.reshape(lo, lo.shape[:-1] + (1,) * (hi.ndim - lo.ndim) + lo.shape[-1:]), hi.shape)
        a, b = lo, hi
    slots[t] = T.add(a, b)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

@dataclass
class RouteSpec:
    source: str
    target: str
    position: Position = 1


@dataclass
class ModelSpec:
    tasks: list[Task]
    input_width: int = 0  # feature width when no embedding is used
    vocab_size: int = 0  # >0 enables an embedding table in front of the shared stack
    embed_dim: int = 32
    shared: list[str] = field(default_factory=lambda: ["recurrent"])
    hidden: int = 64
    branch_depth: dict[str, int] | int = 2
    branch_kind: str = "tanh"
    routes: list[RouteSpec] = field(default_factory=list)
    amp_width: int | None = None
    gated: bool = False
    gate_mode: str = "learned"
    gate_temperature: float = 1.0
    gate_init: float = 0.0

    def depth(self, task: str) -> int:
        d = self.branch_depth if isinstance(self.branch_depth, int) else self.branch_depth[task]
        if d < 1:
            raise ValueError(f"branch {task} needs at least one block")
        return d


def full_routes(task_names: list[str], position: Position = 1) -> list[RouteSpec]:
    """Every ordered pair of distinct tasks: T(T-1) routes."""
    return [RouteSpec(s, t, position) for s in task_names for t in task_names if s != t]


def build_model(spec: ModelSpec, rng: np.random.Generator) -> FeedbackModel:
    tasks = {t.name: t for t in spec.tasks}
    if len(tasks) != len(spec.tasks):
        raise ValueError("duplicate task names")
    for r in spec.routes:
        if r.source not in tasks or r.target not in tasks:
            raise ValueError(f"route {r.source}->{r.target} names an unknown task")
        if r.source == r.target:
            raise ValueError("self-routes are not supported")
    amp_width = spec.amp_width or spec.hidden

    embedding = None
    if spec.vocab_size > 0:
        embedding = Tensor(rng.normal(0.0, 0.1, size=(spec.vocab_size, spec.embed_dim)), requires_grad=True)
        width = spec.embed_dim
    else:
        if spec.input_width <= 0:
            raise ValueError("need either vocab_size or input_width")
        width = spec.input_width
    token_input = spec.vocab_size > 0

    shared = []
    for kind in spec.shared:
        shared.append(LayerBlock(kind, width, spec.hidden, rng))
        width = spec.hidden
    y_c_width = width

    # candidate slots per target branch
    slots: dict[str, set[int]] = {name: set() for name in tasks}
    for r in spec.routes:
        depth = spec.depth(r.target)
        if spec.gated:
            slots[r.target].update(range(1, depth + 1))
        else:
            if r.position == GATED:
                raise ValueError(f"route {r.source}->{r.target} is gated but gating is disabled")
            if not 1 <= int(r.position) <= depth:
                raise ValueError(f"route {r.source}->{r.target} position {r.position} outside [1, {depth}]")
            slots[r.target].add(int(r.position))

    branches = {}
    for name, task in tasks.items():
        depth = spec.depth(name)
        blocks = []
        w_in = y_c_width
        for t in range(1, depth + 1):
            last = t == depth
            kind = "linear" if last else spec.branch_kind
            w_out = task.n_labels if last else spec.hidden
            extra = amp_width if t in slots[name] else 0
            blocks.append(LayerBlock(kind, w_in, w_out, rng, extra_width=extra))
            w_in = w_out
        branches[name] = Branch(task, blocks, pool=token_input and task.level == "sentence")

    routes = []
    for r in spec.routes:
        amp = Amplifier(tasks[r.source], tasks[r.target], amp_width, rng)
        if spec.gated:
            gate = GumbelGate(spec.depth(r.target), spec.gate_mode, spec.gate_temperature, spec.gate_init)
            routes.append(Route(amp, GATED, gate))
        else:
            routes.append(Route(amp, int(r.position)))
    return FeedbackModel(list(tasks.values()), shared, branches, routes, embedding)
