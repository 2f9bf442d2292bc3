"""Equivariant Transformer forcefield.

The network maps positions and element ids to one invariant scalar per
molecule (the uncalibrated pseudo-energy); forces are its negative position
gradient. Three stages:

* embedding: per-element intrinsic vectors plus a continuous-filter
  convolution over radial basis features of neighbour distances; vector
  channels start at zero.
* update layers: multi-head attention whose weights are a three-way dot
  product of query, key and a distance filter, gated by a cosine cutoff.
  Scalar messages update ``x``; the same value projection, split in two,
  also gates unit-vector messages that update ``v``.
* output: two gated equivariant blocks reduce ``(x, v)`` to one scalar per
  atom using only ``x`` and channel norms of ``v``; the molecule scalar is
  the atom sum.

All tensors are batched: positions ``(B, n, 3)``, species ``(B, n)``,
scalar features ``(B, n, D)``, vector features ``(B, n, 3, D)``.
Neighbour sums run over the dense ``n x n`` pair grid; pairs at or beyond
the cutoff are multiplied by an exact zero.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .autodiff import DTYPE, DiffScalar, as_leaf, grad_tensors, norm_eps
from .chem import ELEMENTS, Conformation
from .errors import NonFiniteGradient

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 6
    embed_dim: int = 128
    n_heads: int = 8
    n_rbf: int = 32
    cutoff: float = 5.0
    element_count: int = len(ELEMENTS)

    def __post_init__(self):
        for name in ("n_layers", "embed_dim", "n_heads", "n_rbf", "element_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")
        if self.embed_dim % 2:
            raise ValueError("embed_dim must be even")
        if not self.cutoff > 0:
            raise ValueError("cutoff must be positive")

    @property
    def rbf_gamma(self) -> float:
        return (self.n_rbf - 1) ** 2 / self.cutoff**2


def rbf_centers(cfg: ModelConfig) -> torch.Tensor:
    if cfg.n_rbf == 1:
        return torch.zeros(1, dtype=DTYPE)
    return torch.linspace(0.0, cfg.cutoff, cfg.n_rbf, dtype=DTYPE)


def rbf_expand(d, cfg: ModelConfig) -> torch.Tensor:
    """Gaussian features ``exp(-gamma (d - mu_k)^2)`` on a trailing K axis."""
    d = torch.as_tensor(d, dtype=DTYPE)
    return torch.exp(-cfg.rbf_gamma * (d[..., None] - rbf_centers(cfg)) ** 2)


def cutoff(d, r_cut: float) -> torch.Tensor:
    d = torch.as_tensor(d, dtype=DTYPE)
    inside = 0.5 * (torch.cos(math.pi * d / r_cut) + 1.0)
    return torch.where(d < r_cut, inside, torch.zeros_like(d))


@dataclass
class Geometry:
    """Pair quantities shared by every layer."""

    unit: torch.Tensor  # (B, n, n, 3) unit vector from i to j
    rbf: torch.Tensor  # (B, n, n, K)
    cut: torch.Tensor  # (B, n, n), zero on the diagonal and beyond r_cut
    dist: torch.Tensor  # (B, n, n)


def geometry(pos: torch.Tensor, cfg: ModelConfig) -> Geometry:
    n = pos.shape[1]
    rij = pos[:, None, :, :] - pos[:, :, None, :]  # r_j - r_i at [b, i, j]
    d = norm_eps(rij)
    off = 1.0 - torch.eye(n, dtype=DTYPE)
    return Geometry(rij / d[..., None], rbf_expand(d, cfg), cutoff(d, cfg.cutoff) * off, d)


@dataclass
class AtomState:
    x: torch.Tensor  # (B, n, D)
    v: torch.Tensor  # (B, n, 3, D)


def _init_linear(lin: nn.Linear, zero: bool = False):
    bound = 1.0 / math.sqrt(lin.in_features)
    with torch.no_grad():
        if zero:
            lin.weight.zero_()
        else:
            lin.weight.uniform_(-bound, bound)
        if lin.bias is not None:
            if zero:
                lin.bias.zero_()
            else:
                lin.bias.uniform_(-bound, bound)


def _linear(n_in, n_out, bias=True, zero=False) -> nn.Linear:
    lin = nn.Linear(n_in, n_out, bias=bias, dtype=DTYPE)
    _init_linear(lin, zero)
    return lin


class EmbeddingBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.intrinsic = nn.Embedding(cfg.element_count, d, dtype=DTYPE)
        self.filter = _linear(cfg.n_rbf, d)
        self.mix1 = _linear(2 * d, d)
        self.mix2 = _linear(d, d)

    def forward(self, species: torch.Tensor, geo: Geometry) -> AtomState:
        xi = self.intrinsic(species)  # (B, n, D)
        w = self.filter(geo.rbf) * geo.cut[..., None]  # (B, n, n, D)
        nbr = (w * xi[:, None, :, :]).sum(dim=2)
        x = self.mix2(F.silu(self.mix1(torch.cat([xi, nbr], dim=-1))))
        b, n, d = x.shape
        return AtomState(x, x.new_zeros(b, n, 3, d))


class UpdateLayer(nn.Module):
    """One attention update; returns the residual-updated state."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, k = cfg.embed_dim, cfg.n_rbf
        self.n_heads = cfg.n_heads
        self.query = _linear(d, d)
        self.key = _linear(d, d)
        self.value = _linear(d, 2 * d)  # [scalar message | vector gate]
        self.dist_key = _linear(k, d)
        self.dist_value = _linear(k, 2 * d)
        self.f_x = _linear(d, d)
        self.f_v = _linear(d, d, bias=False)
        self.u1 = _linear(d, d, bias=False)
        self.u2 = _linear(d, d, bias=False)
        self.gate1 = _linear(d, d)
        self.gate2 = _linear(d, 3 * d)

    def forward(self, s: AtomState, geo: Geometry) -> AtomState:
        x, v = s.x, s.v
        b, n, d = x.shape
        h = self.n_heads
        dh = d // h
        xn = F.layer_norm(x, (d,))

        q = self.query(xn).view(b, n, 1, h, dh)
        k = self.key(xn).view(b, 1, n, h, dh)
        dk = F.silu(self.dist_key(geo.rbf)).view(b, n, n, h, dh)
        attn = F.silu((q * k * dk).sum(-1)) * geo.cut[..., None]  # (B, n, n, H)

        vals = self.value(xn)[:, None, :, :] * F.silu(self.dist_value(geo.rbf))  # (B, n, n, 2D)
        msg = vals.view(b, n, n, 2, h, dh) * attn[:, :, :, None, :, None]
        msg_x = msg[:, :, :, 0].sum(dim=2).reshape(b, n, d)
        gate_v = msg[:, :, :, 1].reshape(b, n, n, d)
        msg_v = torch.einsum("bijk,bijc->bikc", geo.unit, gate_v)  # (B, n, 3, D)

        v1 = self.u1(v)
        v2 = self.u2(v)
        g1, g2, g3 = self.gate2(F.silu(self.gate1(xn))).split(d, dim=-1)

        dx = F.silu(self.f_x(xn)) + msg_x + g2 * (v1 * v2).sum(dim=2) + g3
        dv = self.f_v(v) + msg_v + g1[:, :, None, :] * v2
        return AtomState(x + dx, v + dv)


class GatedEquivariantBlock(nn.Module):
    """Scalar path sees ``x`` and ``||W v||``; vector output is gated ``W' v``."""

    def __init__(self, d_in: int, d_out: int, final: bool = False):
        super().__init__()
        self.final = final
        self.vec_norm = _linear(d_in, d_in, bias=False)
        self.vec_out = None if final else _linear(d_in, d_out, bias=False)
        self.mlp1 = _linear(2 * d_in, d_in)
        self.mlp2 = _linear(d_in, d_out if final else 2 * d_out, zero=final)
        self.d_out = d_out

    def forward(self, x, v):
        vn = norm_eps(self.vec_norm(v), dim=2)
        h = self.mlp2(F.silu(self.mlp1(torch.cat([x, vn], dim=-1))))
        if self.final:
            return h, None
        xo, gate = h.split(self.d_out, dim=-1)
        return F.silu(xo), gate[:, :, None, :] * self.vec_out(v)


class EquivariantTransformer(nn.Module):
    """Parameters plus config. Flat parameter order is ``named_parameters()`` order."""

    def __init__(self, cfg: ModelConfig, seed: int | None = 0):
        super().__init__()
        self.cfg = cfg
        gen_state = torch.random.get_rng_state()
        if seed is not None:
            torch.manual_seed(seed)
        try:
            self.embedding = EmbeddingBlock(cfg)
            self.layers = nn.ModuleList(UpdateLayer(cfg) for _ in range(cfg.n_layers))
            d = cfg.embed_dim
            self.out1 = GatedEquivariantBlock(d, d // 2)
            self.out2 = GatedEquivariantBlock(d // 2, 1, final=True)
        finally:
            if seed is not None:
                torch.random.set_rng_state(gen_state)

    def atom_energies(self, pos: torch.Tensor, species: torch.Tensor) -> torch.Tensor:
        geo = geometry(pos, self.cfg)
        s = self.embedding(species, geo)
        for layer in self.layers:
            s = layer(s, geo)
        return self.readout(s)

    def readout(self, s: AtomState) -> torch.Tensor:
        x, v = self.out1(s.x, s.v)
        e, _ = self.out2(x, v)
        return e[..., 0]  # (B, n)

    def forward(self, pos: torch.Tensor, species: torch.Tensor) -> torch.Tensor:
        """Pseudo-energy per molecule, shape (B,)."""
        return self.atom_energies(pos, species).sum(dim=1)

    def energy_and_forces(self, pos: torch.Tensor, species: torch.Tensor, create_graph: bool = False):
        """Batched ``(B,)`` energies and ``(B, n, 3)`` forces; ``pos`` must require grad."""
        e = self(pos, species)
        scalar = DiffScalar(e, pos, ())
        (g,) = grad_tensors(scalar, [pos], create_graph=create_graph)
        return e, -g

    # --- flat parameter view ---------------------------------------------

    def param_layout(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(name, tuple(p.shape)) for name, p in self.named_parameters()]

    def flat_params(self) -> np.ndarray:
        return torch.cat([p.detach().reshape(-1) for p in self.parameters()]).numpy().copy()

    def load_flat_params(self, flat) -> None:
        flat = torch.tensor(np.asarray(flat, dtype=np.float64))
        total = sum(p.numel() for p in self.parameters())
        if flat.numel() != total:
            raise ValueError(f"expected {total} parameters, got {flat.numel()}")
        off = 0
        with torch.no_grad():
            for p in self.parameters():
                p.copy_(flat[off : off + p.numel()].view_as(p))
                off += p.numel()

    def clone(self) -> "EquivariantTransformer":
        m = EquivariantTransformer(self.cfg, seed=None)
        m.load_flat_params(self.flat_params())
        return m


# --- single-conformation helpers ---------------------------------------------


def _batch(c: Conformation):
    pos = as_leaf(c.positions[None])
    species = torch.tensor(c.species[None], dtype=torch.long)
    return pos, species


def embed(c: Conformation, model: EquivariantTransformer) -> AtomState:
    pos, species = _batch(c)
    return model.embedding(species, geometry(pos, model.cfg))


def update_layer(s: AtomState, c: Conformation, layer: UpdateLayer, cfg: ModelConfig) -> AtomState:
    pos, _ = _batch(c)
    return layer(s, geometry(pos, cfg))


def output_energy(s: AtomState, model: EquivariantTransformer, positions=None) -> DiffScalar:
    e = model.readout(s).sum(dim=1)
    return DiffScalar(e, positions, tuple(model.parameters()))


def record_energy(c: Conformation, model: EquivariantTransformer) -> DiffScalar:
    """Full forward pass recorded against (n, 3) positions and the parameters."""
    pos = as_leaf(c.positions)
    species = torch.tensor(c.species[None], dtype=torch.long)
    e = model(pos[None], species)
    return DiffScalar(e, pos, tuple(model.parameters()))


def predict(c: Conformation, model: EquivariantTransformer) -> tuple[float, np.ndarray]:
    """Pseudo-energy (eV, uncalibrated) and forces (n, 3) in eV/A."""
    pos, species = _batch(c)
    e, f = model.energy_and_forces(pos, species)
    forces = f[0].detach().numpy().copy()
    if not np.all(np.isfinite(forces)):
        idx = int(np.flatnonzero(~np.isfinite(forces.reshape(-1)))[0])
        raise NonFiniteGradient(f"non-finite force at flat index {idx}", idx)
    return float(e.detach()[0]), forces


def predict_energy(c: Conformation, model: EquivariantTransformer) -> float:
    with torch.no_grad():
        pos = torch.tensor(c.positions[None], dtype=DTYPE)
        species = torch.tensor(c.species[None], dtype=torch.long)
        return float(model(pos, species)[0])


class ModelForces:
    """Force provider for MD backed by a trained model."""

    source_tag = "model"

    def __init__(self, model: EquivariantTransformer, species):
        self.model = model
        self.species = torch.tensor(np.asarray(species)[None], dtype=torch.long)

    def __call__(self, positions: np.ndarray) -> tuple[float, np.ndarray]:
        pos = torch.tensor(positions[None], dtype=DTYPE, requires_grad=True)
        e = self.model(pos, self.species)
        (g,) = torch.autograd.grad(e.sum(), pos)
        return float(e.detach()[0]), -g[0].numpy()


# --- checkpoints ---------------------------------------------------------------
#
# Layout: one line of compact JSON (ends with "\n"), then the parameters as
# raw little-endian float64 in ``named_parameters()`` order. The header holds
# {"format": "forcekit-checkpoint", "version", "config", "layout", "n_params",
# "extra"} where layout lists (name, shape) pairs.


def checkpoint_bytes(model: EquivariantTransformer, extra: dict | None = None) -> bytes:
    header = {
        "format": "forcekit-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "layout": [[name, list(shape)] for name, shape in model.param_layout()],
        "n_params": int(sum(p.numel() for p in model.parameters())),
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"
    return head + model.flat_params().astype("<f8").tobytes()


def save_checkpoint(model: EquivariantTransformer, path, extra: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, extra))


def load_checkpoint_bytes(data: bytes) -> tuple[EquivariantTransformer, dict]:
    nl = data.index(b"\n")
    header = json.loads(data[:nl].decode("utf-8"))
    if header.get("format") != "forcekit-checkpoint":
        raise ValueError("not a forcekit checkpoint")
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['version']}")
    model = EquivariantTransformer(ModelConfig(**header["config"]), seed=None)
    layout = [[name, list(shape)] for name, shape in model.param_layout()]
    if layout != header["layout"]:
        raise ValueError("checkpoint parameter layout does not match this model version")
    flat = np.frombuffer(data[nl + 1 :], dtype="<f8")
    model.load_flat_params(flat.astype(np.float64))
    return model, header.get("extra", {})


def load_checkpoint(path) -> tuple[EquivariantTransformer, dict]:
    with open(path, "rb") as fh:
        return load_checkpoint_bytes(fh.read())
