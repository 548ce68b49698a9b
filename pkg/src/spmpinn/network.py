"""Per-electrode PINN: DeepONet branch/trunk, dense head and hard initial condition.

The branch encodes the sampled current profile, the trunk sees the
normalised ``(t, r, i_t)`` coordinates, their features are multiplied
elementwise and passed through a dense head. The head output ``c_nn`` is
wrapped as ``c = (1 - exp(beta t)) c_nn + c0`` so that ``c(t=0) = c0``
holds exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .autodiff import DTYPE, Jet2, ParamVector, stack_columns
from .params import ElectrodeParams
from .spm_solver import CurrentProfile

CHECKPOINT_FORMAT = "spmpinn-checkpoint"
CHECKPOINT_VERSION = 1

PHYSICAL_NAMES = ("eps", "D", "theta_0", "theta_100")
_LOG_SPACE = {"eps", "D"}


@dataclass(frozen=True)
class Architecture:
    branch: tuple[int, ...] = (32, 64, 64)
    trunk: tuple[int, ...] = (3, 64, 64)
    head: tuple[int, ...] = (64, 64, 1)
    activation: str = "tanh"

    def __post_init__(self):
        if self.branch[-1] != self.trunk[-1]:
            raise ValueError("branch and trunk output widths must match")
        if self.head[0] != self.trunk[-1]:
            raise ValueError("head input width must equal the branch/trunk width")
        if self.head[-1] != 1:
            raise ValueError("head output must be scalar")
        if self.trunk[0] != 3:
            raise ValueError("trunk input is (t, r, i_t)")
        if self.activation != "tanh":
            raise ValueError("only tanh activation is supported")

    @property
    def m(self) -> int:
        return self.branch[0]

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(tuple(d["branch"]), tuple(d["trunk"]), tuple(d["head"]), d.get("activation", "tanh"))


@dataclass
class ProfileEncoding:
    samples: np.ndarray
    i_norm: float

    @property
    def m(self) -> int:
        return self.samples.size

    def tensor(self) -> torch.Tensor:
        return torch.as_tensor(self.samples, dtype=DTYPE)


@dataclass
class PinnModel:
    side: str
    arch: Architecture
    params: ParamVector
    i_norm: float
    q_ref: float
    ic_decay: float = math.log(100.0)
    metadata: dict = field(default_factory=dict)

    def copy(self) -> "PinnModel":
        return PinnModel(self.side, self.arch, self.params.copy(), self.i_norm, self.q_ref, self.ic_decay, json.loads(json.dumps(self.metadata)))

    def time_scale(self, current: float) -> float:
        """Normalisation horizon: full (dis)charge duration at ``|current|``."""
        if current == 0:
            raise ValueError("time scale undefined at zero current")
        return self.q_ref / abs(current)

    def beta(self, t_scale: float) -> float:
        return -self.ic_decay / t_scale

    def physical_names(self) -> list[str]:
        return [n[len("phys.") :] for n in self.params.segments if n.startswith("phys.")]

    def physical(self, values: torch.Tensor | None = None) -> dict[str, torch.Tensor]:
        """Trainable physical scalars keyed by base name (``eps``, ``D``, ...)."""
        out = {}
        for full in self.physical_names():
            base = full.rsplit("_", 1)[0]
            raw = self.params.view(f"phys.{full}", values).reshape(())
            out[base] = torch.exp(raw) if base in _LOG_SPACE else raw
        return out


def encode_profile(profile: CurrentProfile, m: int, i_norm: float, horizon: float | None = None) -> ProfileEncoding:
    """Sample the current at ``m`` uniform times over ``[0, horizon]`` and normalise."""
    horizon = profile.duration if horizon is None else horizon
    if horizon > profile.duration * (1 + 1e-12):
        raise ValueError(f"profile ({profile.duration} s) is shorter than the horizon ({horizon} s)")
    ts = np.linspace(0.0, horizon, m)
    return ProfileEncoding(profile.current_at(ts) / i_norm, i_norm)


def init_params(arch: Architecture, seed: int) -> ParamVector:
    """Glorot-uniform weights and zero biases for branch, trunk and head."""
    rng = np.random.default_rng(seed)
    pv = ParamVector()
    for net in ("branch", "trunk", "head"):
        sizes = getattr(arch, net)
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            pv.add(f"{net}.{i}.W", rng.uniform(-limit, limit, size=(fan_out, fan_in)))
            pv.add(f"{net}.{i}.b", np.zeros(fan_out))
    return pv


def new_model(side: str, arch: Architecture, seed: int, i_norm: float, q_ref: float) -> PinnModel:
    return PinnModel(side, arch, init_params(arch, seed), i_norm, q_ref, metadata={"seed": seed, "epoch": 0})


def _layers(model: PinnModel, net: str, values: torch.Tensor):
    sizes = getattr(model.arch, net)
    return [
        (model.params.view(f"{net}.{i}.W", values), model.params.view(f"{net}.{i}.b", values))
        for i in range(len(sizes) - 1)
    ]


def _mlp(x: torch.Tensor, layers, final_activation: bool) -> torch.Tensor:
    for i, (W, b) in enumerate(layers):
        x = x @ W.T + b
        if final_activation or i < len(layers) - 1:
            x = torch.tanh(x)
    return x


def _mlp_jet(x: Jet2, layers, final_activation: bool) -> Jet2:
    for i, (W, b) in enumerate(layers):
        x = x.linear(W, b)
        if final_activation or i < len(layers) - 1:
            x = x.tanh()
    return x


def _branch(model: PinnModel, enc, values: torch.Tensor) -> torch.Tensor:
    e = torch.as_tensor(enc.samples if isinstance(enc, ProfileEncoding) else enc, dtype=DTYPE)
    return _mlp(e, _layers(model, "branch", values), final_activation=True)


def _as_t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.tensor(np.array(x, dtype=float), dtype=DTYPE)


def _values(model: PinnModel, values):
    return model.params.values if values is None else values


def _features(model: PinnModel, enc, t, r, i_t, t_scale, values) -> torch.Tensor:
    x = torch.stack(torch.broadcast_tensors(2.0 * t / t_scale - 1.0, 2.0 * r - 1.0, i_t / model.i_norm), dim=-1)
    return _mlp(x, _layers(model, "trunk", values), final_activation=True) * _branch(model, enc, values)


def _features_jet(model: PinnModel, t, r, i_t, t_scale, di_dt, enc, values) -> Jet2:
    zero = torch.zeros_like(t)
    x = stack_columns(
        [
            Jet2(2.0 * t / t_scale - 1.0, 2.0 / t_scale, zero, zero),
            Jet2(2.0 * r - 1.0, zero, zero + 2.0, zero),
            Jet2(i_t / model.i_norm, di_dt / model.i_norm, zero, zero),
        ]
    )
    return _mlp_jet(x, _layers(model, "trunk", values), final_activation=True) * _branch(model, enc, values)


def forward(model: PinnModel, enc, t, r, i_t, t_scale, c0, values=None, feats=None) -> torch.Tensor:
    """Stoichiometry at ``(t [s], r [-], i_t [A])``.

    ``enc`` is a :class:`ProfileEncoding` (or an (m,) / (N, m) array of
    normalised samples); ``t_scale`` the time-normalisation horizon in
    seconds; ``c0`` the initial stoichiometry (scalar, array or tensor).
    ``feats`` replaces the branch-trunk product, see :func:`merged_features`.
    """
    values = _values(model, values)
    t, r, i_t, t_scale = _as_t(t), _as_t(r), _as_t(i_t), _as_t(t_scale)
    if feats is None:
        feats = _features(model, enc, t, r, i_t, t_scale, values)
    c_nn = _mlp(feats, _layers(model, "head", values), final_activation=False)[..., 0]
    beta = -model.ic_decay / t_scale
    return (1.0 - torch.exp(beta * t)) * c_nn + _as_t(c0)


def eval_with_jets(model: PinnModel, t, r, extras: dict, values=None) -> Jet2:
    """Network output with d/dt (physical seconds), d/dr and d2/dr2.

    ``extras`` carries ``enc``, ``i_t`` (A), ``t_scale`` (s), ``c0`` and
    optionally ``di_dt`` (A/s) for time-varying currents and ``feats``, a
    cached branch-trunk product from :func:`merged_features`.
    """
    values = _values(model, values)
    t, r = _as_t(t), _as_t(r)
    i_t = _as_t(extras["i_t"])
    t_scale = _as_t(extras["t_scale"])
    t, r, i_t, t_scale = torch.broadcast_tensors(t, r, i_t, t_scale)
    di_dt = _as_t(extras.get("di_dt", 0.0)).expand_as(t)
    zero = torch.zeros_like(t)
    feats = extras.get("feats")
    if feats is None:
        feats = _features_jet(model, t, r, i_t, t_scale, di_dt, extras["enc"], values)
    c_nn = _mlp_jet(feats, _layers(model, "head", values), final_activation=False).columns(0)
    beta = -model.ic_decay / t_scale
    decay = torch.exp(beta * t)
    envelope = Jet2(1.0 - decay, -beta * decay, zero, zero)
    return envelope * c_nn + extras["c0"]


def merged_features(model: PinnModel, t, r, extras: dict, jets: bool = True):
    """Branch-trunk product at fixed points, detached from the parameters.

    Pass the result as ``feats`` to :func:`forward` (``jets=False``) or in
    the ``extras`` of :func:`eval_with_jets`. Valid only while branch and
    trunk stay frozen.
    """
    with torch.no_grad():
        if jets:
            t, r = _as_t(t), _as_t(r)
            i_t, t_scale = _as_t(extras["i_t"]), _as_t(extras["t_scale"])
            t, r, i_t, t_scale = torch.broadcast_tensors(t, r, i_t, t_scale)
            di_dt = _as_t(extras.get("di_dt", 0.0)).expand_as(t)
            return _features_jet(model, t, r, i_t, t_scale, di_dt, extras["enc"], model.params.values)
        return _features(model, extras["enc"], _as_t(t), _as_t(r), _as_t(extras["i_t"]), _as_t(extras["t_scale"]), model.params.values)


def set_phase2_mask(model: PinnModel, trainable_physical, electrode: ElectrodeParams) -> PinnModel:
    """Freeze branch and trunk, keep the head trainable, append physical scalars.

    Names are ``<param>_<side>`` with param in eps, D, theta_0, theta_100;
    names belonging to the other electrode are accepted and skipped.
    ``eps`` and ``D`` are stored as logarithms.
    """
    allowed = {f"{p}_{s}" for p in PHYSICAL_NAMES for s in ("pos", "neg")}
    unknown = [n for n in trainable_physical if n not in allowed]
    if unknown:
        raise ValueError(f"unknown physical parameter(s): {unknown}; allowed: {sorted(allowed)}")
    out = model.copy()
    for name, seg in out.params.segments.items():
        if name.startswith(("branch.", "trunk.")):
            seg.trainable = False
        elif name.startswith("head."):
            seg.trainable = True
    for full in trainable_physical:
        base, side = full.rsplit("_", 1)
        if side != model.side:
            continue
        seg_name = f"phys.{full}"
        value = getattr(electrode, base)
        init = math.log(value) if base in _LOG_SPACE else value
        if seg_name in out.params.segments:
            out.params.set_trainable([seg_name], True)
        else:
            out.params.add(seg_name, torch.tensor([init], dtype=DTYPE))
    return out


def save_checkpoint(model: PinnModel, path: str | Path, extra: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "side": model.side,
        "arch": asdict(model.arch),
        "i_norm": model.i_norm,
        "q_ref": model.q_ref,
        "ic_decay": model.ic_decay,
        "c0_policy": "linear-soc-between-stoichiometric-limits",
        "time_scale_policy": "q_ref / |mean current|",
        "layout": model.params.layout(),
        "values": model.params.values.tolist(),
        "metadata": model.metadata,
    }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc, indent=1))


class CheckpointError(ValueError):
    pass


def load_checkpoint(path: str | Path) -> PinnModel:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path} is not a version-{CHECKPOINT_VERSION} {CHECKPOINT_FORMAT}")
    arch = Architecture.from_dict(doc["arch"])
    pv = ParamVector.from_layout(doc["values"], doc["layout"])
    return PinnModel(doc["side"], arch, pv, float(doc["i_norm"]), float(doc["q_ref"]), float(doc["ic_decay"]), doc.get("metadata", {}))
