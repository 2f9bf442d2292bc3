"""Force-centric multi-molecule training.

Frames of every molecule are pooled, bucketed by atom count (each bucket is
stacked into dense tensors), shuffled within buckets each epoch, cut into
batches and interleaved round-robin across buckets. The loss of a frame is
the mean squared force error over its atoms x 3 components; a batch loss is
the unweighted mean over frames, so large molecules do not dominate.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
import torch

from .autodiff import DTYPE
from .chem import Conformation, Trajectory
from .dataio import n_val_frames
from .errors import EmptyDataset, MissingLabels, NonFiniteGradient
from .metrics import cosine_distance, force_mae
from .model import EquivariantTransformer, ModelConfig, save_checkpoint

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "lr", "train_loss", "val_force_mae", "val_cosd")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    lr0: float = 1e-4
    decay_factor: float = 0.8
    patience: int = 30
    val_fraction: float = 0.05
    val_every: int = 500
    batch_size: int = 16
    seed: int = 0
    objective: str = "force_only"  # or "joint"
    joint_energy_weight: float = 1.0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 100.0
    max_steps: int | None = None

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must be in (0, 1)")
        if not 0 < self.decay_factor < 1:
            raise ValueError("decay_factor must be in (0, 1)")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if self.objective not in ("force_only", "joint"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.val_every < 1 or self.patience < 1:
            raise ValueError("epochs >= 0, batch_size >= 1, val_every >= 1, patience >= 1")


# --- batches -------------------------------------------------------------------


@dataclass
class Stack:
    """Same-size frames stacked into tensors."""

    positions: torch.Tensor  # (N, n, 3)
    species: torch.Tensor  # (N, n)
    forces: torch.Tensor | None  # (N, n, 3)
    energies: torch.Tensor | None  # (N,)
    molecule: list[str] = field(default_factory=list)

    def __len__(self):
        return self.positions.shape[0]

    def take(self, idx) -> "Stack":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return Stack(
            self.positions[idx],
            self.species[idx],
            None if self.forces is None else self.forces[idx],
            None if self.energies is None else self.energies[idx],
            [self.molecule[i] for i in idx.tolist()],
        )


def stack_frames(frames: Sequence[Conformation], need_energy: bool, molecule=None) -> Stack:
    if any(f.ref_forces is None for f in frames):
        raise MissingLabels("every training frame needs ref_forces")
    energies = None
    if need_energy:
        if any(f.ref_energy is None for f in frames):
            raise MissingLabels("the joint objective needs ref_energy on every frame")
        energies = torch.tensor([f.ref_energy for f in frames], dtype=DTYPE)
    return Stack(
        torch.tensor(np.stack([f.positions for f in frames]), dtype=DTYPE),
        torch.tensor(np.stack([f.species for f in frames]), dtype=torch.long),
        torch.tensor(np.stack([f.ref_forces for f in frames]), dtype=DTYPE),
        energies,
        list(molecule) if molecule is not None else [""] * len(frames),
    )


def group_by_size(frames: Sequence[Conformation]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for k, f in enumerate(frames):
        groups.setdefault(f.n_atoms, []).append(k)
    return groups


# --- losses --------------------------------------------------------------------


def _per_frame_terms(stack: Stack, model: EquivariantTransformer, need_energy: bool):
    pos = stack.positions.clone().requires_grad_(True)
    e, f = model.energy_and_forces(pos, stack.species, create_graph=True)
    force_se = ((f - stack.forces) ** 2).mean(dim=(1, 2))  # (N,)
    energy_se = (e - stack.energies) ** 2 if need_energy else None
    return force_se, energy_se


def loss_tensor(stacks: Sequence[Stack], model, objective: str = "force_only", energy_weight: float = 1.0):
    """Differentiable batch loss over one or more same-size stacks."""
    need_energy = objective == "joint"
    total = 0.0
    count = 0
    for st in stacks:
        fse, ese = _per_frame_terms(st, model, need_energy)
        term = fse if ese is None else fse + energy_weight * ese
        total = total + term.sum()
        count += len(st)
    return total / count


def _loss_and_grad(batch: Sequence[Conformation], model, objective, energy_weight):
    if not batch:
        raise EmptyDataset("empty batch")
    need_energy = objective == "joint"
    stacks = [stack_frames([batch[k] for k in idx], need_energy) for idx in group_by_size(batch).values()]
    model.zero_grad(set_to_none=True)
    loss = loss_tensor(stacks, model, objective, energy_weight)
    grads = torch.autograd.grad(loss, list(model.parameters()), allow_unused=True)
    flat = torch.cat(
        [torch.zeros(p.numel(), dtype=DTYPE) if g is None else g.reshape(-1) for p, g in zip(model.parameters(), grads)]
    )
    return float(loss.detach()), flat.numpy().copy()


def force_loss(batch: Sequence[Conformation], model) -> tuple[float, np.ndarray]:
    """Mean over frames of the per-component squared force error, and its parameter gradient."""
    return _loss_and_grad(batch, model, "force_only", 0.0)


def joint_loss(batch: Sequence[Conformation], model, energy_weight: float = 1.0) -> tuple[float, np.ndarray]:
    """``force_loss + energy_weight * mean (Phi - E_ref)^2``: the energy+force baseline."""
    return _loss_and_grad(batch, model, "joint", energy_weight)


# --- optimizer -----------------------------------------------------------------


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamWState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adamw_step(
    params: np.ndarray,
    grads: np.ndarray,
    opt: AdamWState,
    lr: float,
    weight_decay: float = 0.01,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[np.ndarray, AdamWState]:
    """One AdamW update on flat arrays; returns new params and moments.

    Weight decay is decoupled and applied multiplicatively before the
    bias-corrected adaptive step.
    """
    grads = np.asarray(grads, dtype=np.float64)
    if not np.all(np.isfinite(grads)):
        idx = int(np.flatnonzero(~np.isfinite(grads))[0])
        raise NonFiniteGradient(f"non-finite gradient at flat index {idx}", idx)
    t = opt.t + 1
    m = beta1 * opt.m + (1.0 - beta1) * grads
    v = beta2 * opt.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    p = params
    if weight_decay:
        p = p * (1.0 - lr * weight_decay)
    p = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return p, AdamWState(m, v, t)


def clip_global_norm(grads: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.sqrt(np.dot(grads, grads)))
    if norm > max_norm:
        return grads * (max_norm / norm)
    return grads


# --- training loop -------------------------------------------------------------


@dataclass
class TrainState:
    model: EquivariantTransformer
    opt: AdamWState
    step: int = 0
    n_decays: int = 0
    lr: float = 1e-4
    best_val: float = math.inf
    bad_count: int = 0
    best_params: np.ndarray | None = None
    skipped_batches: int = 0
    rng_state: dict | None = None

    def best_model(self) -> EquivariantTransformer:
        m = self.model.clone()
        if self.best_params is not None:
            m.load_flat_params(self.best_params)
        return m


@dataclass
class MetricsRow:
    step: int
    lr: float
    train_loss: float
    val_force_mae: float
    val_cosd: float


def metrics_csv(rows: Sequence[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow([r.step, repr(r.lr), repr(r.train_loss), repr(r.val_force_mae), repr(r.val_cosd)])
    return buf.getvalue()


Dataset = Mapping[str, Sequence[Trajectory]]


def _as_dataset(data) -> dict[str, list[Trajectory]]:
    if isinstance(data, Trajectory):
        data = {"molecule": [data]}
    elif not isinstance(data, Mapping):
        data = {f"mol{k}": [t] for k, t in enumerate(data)}
    out = {}
    for name, trajs in data.items():
        trajs = [trajs] if isinstance(trajs, Trajectory) else list(trajs)
        if trajs:
            out[name] = trajs
    return out


def tail_split(data: Dataset, val_fraction: float):
    """Per-trajectory temporal split: the last ceil(fraction * n) frames validate."""
    train, val = [], []
    for name, trajs in data.items():
        for t in trajs:
            k = n_val_frames(len(t), val_fraction)
            train += [(name, f) for f in t.frames[: len(t) - k]]
            val += [(name, f) for f in t.frames[len(t) - k :]]
    return train, val


def _stacks(items, need_energy) -> list[Stack]:
    frames = [f for _, f in items]
    names = [n for n, _ in items]
    return [
        stack_frames([frames[k] for k in idx], need_energy, [names[k] for k in idx])
        for _, idx in sorted(group_by_size(frames).items())
    ]


def evaluate_stacks(model, stacks: Sequence[Stack], chunk: int = 256) -> dict[str, tuple[float, float]]:
    """Per-molecule ``(force MAE, cosine distance)`` plus an ``"all"`` entry."""
    preds: dict[str, list] = {}
    refs: dict[str, list] = {}
    for st in stacks:
        for lo in range(0, len(st), chunk):
            pos = st.positions[lo : lo + chunk].clone().requires_grad_(True)
            _, f = model.energy_and_forces(pos, st.species[lo : lo + chunk])
            f = f.detach().numpy()
            ref = st.forces[lo : lo + chunk].numpy()
            for k, name in enumerate(st.molecule[lo : lo + chunk]):
                preds.setdefault(name, []).append(f[k])
                refs.setdefault(name, []).append(ref[k])
    out = {}
    allp, allr = [], []
    for name in preds:
        p = np.concatenate(preds[name])
        r = np.concatenate(refs[name])
        out[name] = (force_mae(p, r), cosine_distance(p, r))
        allp.append(p)
        allr.append(r)
    if allp:
        p, r = np.concatenate(allp), np.concatenate(allr)
        out["all"] = (force_mae(p, r), cosine_distance(p, r))
    return out


def _epoch_batches(stacks: Sequence[Stack], batch_size: int, rng: np.random.Generator):
    queues = []
    for st in stacks:
        order = rng.permutation(len(st))
        queues.append([order[k : k + batch_size] for k in range(0, len(order), batch_size)])
    k = 0
    while any(queues):
        q = queues[k % len(queues)]
        if q:
            yield stacks[k % len(queues)].take(q.pop(0))
        k += 1


def train(
    data,
    cfg: TrainConfig,
    model_cfg: ModelConfig | None = None,
    model: EquivariantTransformer | None = None,
    checkpoint_path=None,
    val_data=None,
) -> tuple[TrainState, list[MetricsRow]]:
    """Train on a ``{molecule: [Trajectory, ...]}`` dataset.

    Every ``val_every`` steps (and once at the end) the validation force MAE
    is logged; ``patience`` validations without improvement multiply the
    learning rate by ``decay_factor``. The best-by-validation parameters are
    kept in the returned state and written to ``checkpoint_path`` if given.
    Validation frames are the tail of each trajectory unless ``val_data`` is
    supplied, in which case every frame of ``data`` is trained on.
    """
    data = _as_dataset(data)
    if not data:
        raise EmptyDataset("no trajectories to train on")
    if model is None:
        model = EquivariantTransformer(model_cfg or ModelConfig(), seed=cfg.seed)
    need_energy = cfg.objective == "joint"
    if val_data is None:
        train_items, val_items = tail_split(data, cfg.val_fraction)
    else:
        train_items = [(name, f) for name, trajs in data.items() for t in trajs for f in t.frames]
        val_items = [(name, f) for name, trajs in _as_dataset(val_data).items() for t in trajs for f in t.frames]
    if not train_items:
        raise EmptyDataset("no training frames after the validation split")
    train_stacks = _stacks(train_items, need_energy)
    val_stacks = _stacks(val_items, False) if val_items else []

    flat = model.flat_params()
    state = TrainState(model, AdamWState.zeros(len(flat)), lr=cfg.lr0, best_params=flat.copy())
    rows: list[MetricsRow] = []
    if cfg.epochs == 0 or cfg.max_steps == 0:
        return state, rows

    rng = np.random.default_rng(cfg.seed)
    params = list(model.parameters())
    running, n_running = 0.0, 0

    def validate():
        nonlocal running, n_running
        res = evaluate_stacks(model, val_stacks) if val_stacks else {}
        mae, cosd = res.get("all", (math.nan, math.nan))
        train_loss = running / n_running if n_running else math.nan
        rows.append(MetricsRow(state.step, state.lr, train_loss, mae, cosd))
        running, n_running = 0.0, 0
        log.info("step %d lr %.3g train %.5g val_mae %.5g", state.step, state.lr, train_loss, mae)
        if not val_stacks:
            state.best_params = model.flat_params()
            return
        if mae < state.best_val:
            state.best_val = mae
            state.bad_count = 0
            state.best_params = model.flat_params()
            if checkpoint_path is not None:
                save_checkpoint(model, checkpoint_path, {"step": state.step, "val_force_mae": mae})
        else:
            state.bad_count += 1
            if state.bad_count >= cfg.patience:
                state.n_decays += 1
                state.lr = cfg.lr0 * cfg.decay_factor**state.n_decays
                state.bad_count = 0

    done = False
    for _epoch in range(cfg.epochs):
        for batch in _epoch_batches(train_stacks, cfg.batch_size, rng):
            loss = loss_tensor([batch], model, cfg.objective, cfg.joint_energy_weight)
            grads = torch.autograd.grad(loss, params, allow_unused=True)
            g = torch.cat(
                [torch.zeros(p.numel(), dtype=DTYPE) if gi is None else gi.reshape(-1) for p, gi in zip(params, grads)]
            ).numpy()
            try:
                g = clip_global_norm(g, cfg.grad_clip)
                new, state.opt = adamw_step(
                    model.flat_params(), g, state.opt, state.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps
                )
            except NonFiniteGradient:
                state.skipped_batches += 1
                log.warning("skipping batch with non-finite gradient at step %d", state.step)
                continue
            model.load_flat_params(new)
            state.step += 1
            running += float(loss.detach())
            n_running += 1
            if state.step % cfg.val_every == 0:
                validate()
            if cfg.max_steps is not None and state.step >= cfg.max_steps:
                done = True
                break
        if done:
            break
    if not rows or rows[-1].step != state.step:
        validate()
    state.rng_state = rng.bit_generator.state
    return state, rows


# --- single vs joint -----------------------------------------------------------


@dataclass(frozen=True)
class ComparisonRow:
    molecule: str
    arm: str  # "separate" | "joint" | "joint-unseen"
    force_mae: float
    cosd: float


def run_single_vs_joint(
    data,
    cfg: TrainConfig,
    model_cfg: ModelConfig | None = None,
    holdout=None,
) -> tuple[list[ComparisonRow], dict[str, EquivariantTransformer]]:
    """Train one model per molecule and one joint model with equal total budget.

    The joint arm gets ``cfg.max_steps`` optimizer steps (or ``cfg.epochs``
    epochs over all molecules); each separate arm gets an equal share of
    that budget. Models are evaluated on each molecule's validation tail;
    molecules in ``holdout`` are never trained on and are scored with the
    joint model only.
    """
    data = _as_dataset(data)
    if not data:
        raise EmptyDataset("no trajectories")
    n_mol = len(data)
    models = {}
    joint_state, _ = train(data, cfg, model_cfg)
    models["joint"] = joint_state.best_model()
    total_steps = cfg.max_steps if cfg.max_steps is not None else joint_state.step
    share = max(total_steps // n_mol, 1)
    rows: list[ComparisonRow] = []
    for name, trajs in data.items():
        sub = {name: trajs}
        st, _ = train(sub, replace(cfg, max_steps=share, epochs=max(cfg.epochs, 1) * n_mol), model_cfg)
        models[f"separate:{name}"] = st.best_model()
        _, val_items = tail_split(sub, cfg.val_fraction)
        stacks = _stacks(val_items, False)
        for arm, m in (("separate", models[f"separate:{name}"]), ("joint", models["joint"])):
            mae, cosd = evaluate_stacks(m, stacks)[name]
            rows.append(ComparisonRow(name, arm, mae, cosd))
    if holdout:
        for name, trajs in _as_dataset(holdout).items():
            items = [(name, f) for t in trajs for f in t.frames]
            mae, cosd = evaluate_stacks(models["joint"], _stacks(items, False))[name]
            rows.append(ComparisonRow(name, "joint-unseen", mae, cosd))
    return rows, models


def comparison_csv(rows: Sequence[ComparisonRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["molecule", "arm", "force_mae", "cosd"])
    for r in rows:
        w.writerow([r.molecule, r.arm, repr(r.force_mae), repr(r.cosd)])
    return buf.getvalue()
