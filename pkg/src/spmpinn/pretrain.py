"""Data-free pretraining of the per-electrode PINNs.

Each electrode network is trained on its own weighted residual loss
(PDE, centre and surface boundary conditions) with self-adaptive weights
that equalise the gradient norms of the weighted terms. The initial
condition is imposed by the network's output transform, so it needs no
loss term.

Residuals are evaluated in scaled form: the PDE residual is multiplied by
the profile's time scale and the surface-flux residual divided by the
electrode's reference diffusivity. Both factors are positive constants per
term, which the adaptive weights absorb.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .autodiff import DTYPE, Adam, Jet2, LossSpec, NonFiniteLoss, loss_gradient
from .network import Architecture, PinnModel, encode_profile, eval_with_jets, forward, merged_features, new_model, save_checkpoint
from .params import SIDES, CellParams, ElectrodeParams, cell_capacity, soc_to_initial_stoichiometry
from .sampling import build_batch, random_cc_profile
from .spm_solver import CurrentProfile, SimulationResult, flux_from_current, simulate_profile, terminal_voltage

log = logging.getLogger(__name__)

TERMS = ("pde", "bcc", "bcs")
LOSS_COLUMNS = {"pde": "L_PDE", "bcc": "L_BCc", "bcs": "L_BCs"}


class TrainingDiverged(RuntimeError):
    def __init__(self, side: str, epoch: int, loss: float, checkpoint: Path | None):
        super().__init__(f"{side} training diverged at epoch {epoch} (loss {loss:.3g})")
        self.side, self.epoch, self.loss, self.checkpoint = side, epoch, loss, checkpoint


@dataclass
class LossWeights:
    lambda_pde: float = 1.0
    lambda_bcc: float = 1.0
    lambda_bcs: float = 1.0
    alpha: float = 0.9
    update_every: int = 10

    def __post_init__(self):
        if min(self.lambda_pde, self.lambda_bcc, self.lambda_bcs) <= 0:
            raise ValueError("loss weights must be positive")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must be in [0, 1]")
        if self.update_every < 1:
            raise ValueError("update_every must be >= 1")

    def as_dict(self) -> dict[str, float]:
        return {t: getattr(self, f"lambda_{t}") for t in TERMS}


def target_weights(norms: Sequence[float]) -> list[float]:
    """Weights making every ``lambda_i * |grad L_i|`` equal to ``sum_j |grad L_j|``."""
    total = float(sum(norms))
    return [total / n for n in norms]


def update_weights(w: LossWeights, grad_norms: dict[str, float], k: int) -> LossWeights:
    """Running-average weight update, applied only every ``w.update_every`` iterations."""
    if k % w.update_every != 0:
        return w
    total = sum(grad_norms[t] for t in TERMS)
    new = {}
    for t in TERMS:
        old = getattr(w, f"lambda_{t}")
        if grad_norms[t] <= 0 or not math.isfinite(grad_norms[t]):
            warnings.warn(f"zero gradient norm for loss term {t!r}; weight not updated", RuntimeWarning, stacklevel=2)
            new[f"lambda_{t}"] = old
            continue
        target = total / grad_norms[t]
        new[f"lambda_{t}"] = w.alpha * old + (1.0 - w.alpha) * target
    return dataclasses.replace(w, **new)


@dataclass
class TrainConfig:
    epochs: int = 5000
    lr: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    n_pde: int = 2048
    n_bcc: int = 256
    n_bcs: int = 256
    c_rate_range: tuple[float, float] = (0.5, 2.0)
    profiles_per_epoch: int = 4
    eval_every: int = 500
    checkpoint_every: int = 0
    alpha: float = 0.9
    update_every: int = 10
    norm: str = "abs"
    ema_decay: float = 0.998
    # fraction of the horizon at which the initial-condition envelope reaches 0.99
    ic_reach_pos: float = 1.0
    ic_reach_neg: float = 0.1
    divergence_threshold: float = 1e6
    arch: Architecture = field(default_factory=Architecture)

    def __post_init__(self):
        if self.epochs < 0 or self.lr <= 0 or self.profiles_per_epoch < 1 or min(self.n_pde, self.n_bcc, self.n_bcs) < 1:
            raise ValueError("epochs, lr and point counts must be positive")
        if self.norm not in ("sq", "abs"):
            raise ValueError("norm must be 'sq' or 'abs'")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must be in [0, 1)")
        if not (0.0 < self.ic_reach_pos <= 1.0 and 0.0 < self.ic_reach_neg <= 1.0):
            raise ValueError("ic_reach_pos and ic_reach_neg must be in (0, 1]")

    @property
    def counts(self) -> tuple[int, int, int]:
        return self.n_pde, self.n_bcc, self.n_bcs

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "arch" in d and isinstance(d["arch"], dict):
            d["arch"] = Architecture.from_dict(d["arch"])
        for key in ("adam_betas", "c_rate_range"):
            if key in d:
                d[key] = tuple(d[key])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["arch"] = dataclasses.asdict(self.arch)
        return d


@dataclass
class PhysicsSample:
    """Collocation tensors for one electrode, possibly pooled over several profiles.

    Each point set maps ``t, r, i, di_dt, t_scale, soc0`` to 1-D tensors
    and ``enc`` to the (N, m) branch inputs of the point's profile.
    """

    pde: dict[str, torch.Tensor]
    bcc: dict[str, torch.Tensor]
    bcs: dict[str, torch.Tensor]


def mean_current(profile: CurrentProfile) -> float:
    t, i = profile.times, profile.currents
    return float(np.sum(0.5 * (i[1:] + i[:-1]) * np.diff(t)) / profile.duration)


def _split(n: int, parts: int) -> list[int]:
    return [n // parts + (1 if k < n % parts else 0) for k in range(parts)]


def make_sample(
    model: PinnModel,
    profiles: Sequence[tuple[CurrentProfile, float]],
    counts: tuple[int, int, int],
    horizon: float | None = None,
) -> PhysicsSample:
    """Collocation points for ``(profile, soc0)`` pairs, the counts split evenly.

    Points for each profile cover ``[0, horizon]`` (default: its length).
    """
    if len(profiles) > min(counts):
        raise ValueError("more profiles than points in the smallest point set")
    shares = list(zip(*(_split(n, len(profiles)) for n in counts)))
    sets: dict[str, list] = {"pde": [], "bcc": [], "bcs": []}
    for (profile, soc0), share in zip(profiles, shares):
        batch = build_batch(profile, profile.duration if horizon is None else horizon, share)
        t_scale = model.time_scale(mean_current(profile))
        enc = encode_profile(profile, model.arch.m, model.i_norm).samples
        for key, pts in zip(sets, (batch.pde_pts, batch.bc_centre_pts, batch.bc_surface_pts)):
            n = len(pts)
            sets[key].append(
                {
                    "t": pts[:, 0],
                    "r": pts[:, 1],
                    "i": pts[:, 2],
                    "di_dt": profile.slope_at(pts[:, 0]),
                    "t_scale": np.full(n, t_scale),
                    "soc0": np.full(n, float(soc0)),
                    "enc": np.broadcast_to(enc, (n, enc.size)),
                }
            )

    def merge(parts):
        return {k: torch.as_tensor(np.concatenate([p[k] for p in parts]), dtype=DTYPE) for k in parts[0]}

    return PhysicsSample(**{k: merge(v) for k, v in sets.items()})


def laplacian(jet: Jet2, r: torch.Tensor) -> torch.Tensor:
    """Spherical Laplacian ``c_rr + 2 c_r / r`` with its ``3 c_rr`` limit at r = 0."""
    safe_r = torch.where(r > 0, r, torch.ones_like(r))
    return torch.where(r > 0, jet.d_rr + 2.0 * jet.d_r / safe_r, 3.0 * jet.d_rr)


def reduce(res: torch.Tensor, norm: str) -> torch.Tensor:
    return res.abs().mean() if norm == "abs" else (res * res).mean()


class NonFiniteResidual(FloatingPointError):
    def __init__(self, term: str, point: tuple[float, ...]):
        super().__init__(f"non-finite {term} residual at (t, r, i_t) = {point}")
        self.term, self.point = term, point


def _check_finite(term: str, res: torch.Tensor, pts: dict) -> None:
    bad = ~torch.isfinite(res.detach())
    if bool(bad.any()):
        k = int(torch.nonzero(bad)[0])
        raise NonFiniteResidual(term, tuple(float(pts[c][k]) for c in ("t", "r", "i")))


def losses_from_jets(
    jets: dict[str, Jet2],
    sample: PhysicsSample,
    e: ElectrodeParams,
    flux: torch.Tensor,
    D=None,
    norm: str = "abs",
) -> dict[str, torch.Tensor]:
    """Residual losses for precomputed jets at the sample's three point sets.

    ``flux`` is the pore-wall flux at the surface points and ``D`` the
    diffusivity to use (``e.D`` when omitted). ``e.D`` always serves as the
    scale of the surface-flux residual.
    """
    D = e.D if D is None else D
    r = sample.pde["r"]
    res = {
        "pde": sample.pde["t_scale"] * (jets["pde"].d_t - D / e.R_p**2 * laplacian(jets["pde"], r)),
        "bcc": jets["bcc"].d_r,
        "bcs": (D * jets["bcs"].d_r + e.R_p * flux / e.c_max) / e.D,
    }
    for term, pts in zip(TERMS, (sample.pde, sample.bcc, sample.bcs)):
        _check_finite(term, res[term], pts)
    return {t: reduce(res[t], norm) for t in TERMS}


def initial_stoichiometry(e: ElectrodeParams, soc0, phys: dict):
    """Linear map from cell SOC to particle stoichiometry; ``phys`` may override the limits."""
    th0 = phys.get("theta_0", e.theta_0)
    th100 = phys.get("theta_100", e.theta_100)
    return th0 + soc0 * (th100 - th0)


def residual_losses(
    model: PinnModel,
    sample: PhysicsSample,
    e: ElectrodeParams,
    cell: CellParams,
    values: torch.Tensor | None = None,
    norm: str = "abs",
    feats: dict | None = None,
) -> dict[str, torch.Tensor]:
    """Scaled PDE, centre-BC and surface-BC losses for one electrode.

    Trainable physical scalars stored in the model (``eps``, ``D``, ...)
    replace the values in ``e``. ``feats`` holds cached branch-trunk jets per
    term (see :func:`sample_features`) for runs with a frozen DeepONet.
    """
    phys = model.physical(values)

    def jets(term, pts):
        c0 = initial_stoichiometry(e, pts["soc0"], phys)
        extras = {"enc": pts["enc"], "i_t": pts["i"], "t_scale": pts["t_scale"], "c0": c0, "di_dt": pts["di_dt"]}
        if feats is not None:
            extras["feats"] = feats[term]
        return eval_with_jets(model, pts["t"], pts["r"], extras, values=values)

    flux = flux_from_current(sample.bcs["i"], e, cell, model.side, eps=phys.get("eps"))
    all_jets = {term: jets(term, getattr(sample, term)) for term in TERMS}
    return losses_from_jets(all_jets, sample, e, flux, D=phys.get("D"), norm=norm)


def sample_features(model: PinnModel, sample: PhysicsSample) -> dict:
    """Branch-trunk jets at every point of ``sample``, for reuse while frozen."""
    out = {}
    for term in TERMS:
        pts = getattr(sample, term)
        extras = {"enc": pts["enc"], "i_t": pts["i"], "t_scale": pts["t_scale"], "di_dt": pts["di_dt"]}
        out[term] = merged_features(model, pts["t"], pts["r"], extras)
    return out


def profile_schedule(cell: CellParams, cfg: TrainConfig, start: int = 0) -> list[list[tuple[CurrentProfile, float]]]:
    """Per-epoch training profiles, shared by both electrodes."""
    out = []
    for k in range(start, cfg.epochs):
        rng = np.random.default_rng([cfg.seed, k])
        out.append([random_cc_profile(rng, cfg.c_rate_range, cell) for _ in range(cfg.profiles_per_epoch)])
    return out


def validation_profile(cell: CellParams) -> tuple[CurrentProfile, float]:
    """Held-out 1C charge from SOC 0."""
    I = -cell.one_c_current
    return CurrentProfile.constant(I, cell_capacity(cell) / abs(I)), 0.0


def train_electrode(
    model: PinnModel,
    e: ElectrodeParams,
    cell: CellParams,
    cfg: TrainConfig,
    profiles: Sequence[Sequence[tuple[CurrentProfile, float]]],
    weights: LossWeights | None = None,
    evaluate: Callable[[PinnModel], dict] | None = None,
    checkpoint_dir: Path | None = None,
) -> tuple[PinnModel, LossWeights, list[dict]]:
    """Adam on the weighted residual loss of one electrode.

    The ``(profile, soc0)`` pairs in ``profiles[i]`` are used at epoch ``model.metadata['epoch'] + i``. Only
    ``e`` and the cell-level constants (area, Faraday constant) are read.

    With ``cfg.ema_decay > 0`` the returned parameters are the exponential
    moving average of the Adam iterates; the raw iterate is kept in the
    metadata so a resumed run continues bitwise.
    """
    model = model.copy()
    start = int(model.metadata.get("epoch", 0))
    ema = None
    if cfg.ema_decay:
        ema = model.params.values.clone()
        if "raw_values" in model.metadata:
            model.params.values = torch.tensor(model.metadata["raw_values"], dtype=DTYPE)
    if weights is None:
        saved = model.metadata.get("weights")
        weights = LossWeights(**saved) if saved else LossWeights(alpha=cfg.alpha, update_every=cfg.update_every)
    opt = Adam(len(model.params), cfg.lr, cfg.adam_betas)
    if "adam" in model.metadata:
        opt.load_state_dict(model.metadata["adam"])
    history = []
    for i, batch in enumerate(profiles):
        k = start + i
        sample = make_sample(model, batch, cfg.counts)
        per_term = k % weights.update_every == 0
        spec = LossSpec(
            lambda v: residual_losses(model, sample, e, cell, values=v, norm=cfg.norm),
            weights=weights.as_dict(),
            per_term=per_term,
        )
        try:
            res = loss_gradient(model.params, spec)
            total = res.total
        except NonFiniteLoss:
            total = float("nan")
        if not total < cfg.divergence_threshold:
            ckpt = None
            if checkpoint_dir is not None:
                ckpt = Path(checkpoint_dir) / f"diverged_{model.side}.json"
                save_checkpoint(model, ckpt)
            raise TrainingDiverged(model.side, k, total, ckpt)
        row = {"electrode": model.side, "epoch": k}
        row.update({LOSS_COLUMNS[t]: res.terms[t] for t in TERMS})
        row.update({f"lambda_{t}": getattr(weights, f"lambda_{t}") for t in TERMS})
        row["total"] = res.total
        if per_term:
            row.update({f"gradnorm_{t}": res.term_grad_norms[t] for t in TERMS})
            weights = update_weights(weights, res.term_grad_norms, k)
        opt.step(model.params, res.grad)
        if ema is not None:
            # frozen entries are copied, not averaged, so they stay bitwise fixed
            avg = cfg.ema_decay * ema + (1.0 - cfg.ema_decay) * model.params.values
            ema = torch.where(model.params.mask(), avg, model.params.values)
        model.metadata["epoch"] = k + 1
        if evaluate is not None and cfg.eval_every and (k + 1) % cfg.eval_every == 0:
            row.update(evaluate(_snapshot(model, weights, opt, ema)))
        if checkpoint_dir is not None and cfg.checkpoint_every and (k + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(_snapshot(model, weights, opt, ema), Path(checkpoint_dir) / f"pinn_{model.side}.json")
        history.append(row)
    return _snapshot(model, weights, opt, ema), weights, history


def _snapshot(model: PinnModel, weights: LossWeights, opt: Adam, ema: torch.Tensor | None) -> PinnModel:
    """The model as exported: averaged parameters plus the state needed to resume."""
    out = model.copy()
    out.metadata["weights"] = dataclasses.asdict(weights)
    out.metadata["adam"] = opt.state_dict()
    if ema is not None:
        out.metadata["raw_values"] = model.params.values.tolist()
        out.params.values = ema.clone()
    else:
        out.metadata.pop("raw_values", None)
    return out


def init_models(cell: CellParams, cfg: TrainConfig) -> tuple[PinnModel, PinnModel]:
    q_ref = cell_capacity(cell)
    i_norm = cell.one_c_current
    mp = new_model("pos", cfg.arch, cfg.seed, i_norm, q_ref)
    mn = new_model("neg", cfg.arch, cfg.seed + 1, i_norm, q_ref)
    mp.ic_decay = math.log(100.0) / cfg.ic_reach_pos
    mn.ic_decay = math.log(100.0) / cfg.ic_reach_neg
    return mp, mn


def train(
    model_pos: PinnModel,
    model_neg: PinnModel,
    cell: CellParams,
    cfg: TrainConfig,
    checkpoint_dir: Path | None = None,
    reference: SimulationResult | None = None,
) -> tuple[tuple[PinnModel, PinnModel], list[dict]]:
    """Train both electrodes independently on the same profile schedule."""
    start = int(model_pos.metadata.get("epoch", 0))
    if int(model_neg.metadata.get("epoch", 0)) != start:
        raise ValueError("electrode checkpoints are at different epochs")
    profiles = profile_schedule(cell, cfg, start)
    if reference is None and cfg.eval_every:
        prof, soc0 = validation_profile(cell)
        reference = simulate_profile(cell, prof, soc0, store_fields=True)
    history = []
    trained = {}
    for model in (model_pos, model_neg):
        side = model.side
        evaluate = None
        if reference is not None:
            val_profile, val_soc0 = validation_profile(cell)
            evaluate = lambda m, s=side: {
                "eval_conc_rmse": concentration_rmse(model_predictor(m, cell, val_profile, val_soc0), reference, s)
            }
        t0 = time.perf_counter()
        trained[side], _, rows = train_electrode(
            model, cell.electrode(side), cell, cfg, profiles, evaluate=evaluate, checkpoint_dir=checkpoint_dir
        )
        trained[side].metadata["train_seconds"] = trained[side].metadata.get("train_seconds", 0.0) + time.perf_counter() - t0
        trained[side].metadata["config"] = cfg.to_dict()
        history.extend(rows)
        log.info("%s electrode trained to epoch %d", side, trained[side].metadata["epoch"])
    return (trained["pos"], trained["neg"]), history


def predict_field(model: PinnModel, cell: CellParams, times, radii, current_fn, soc0: float, t_scale: float | None = None, horizon: float | None = None) -> np.ndarray:
    """PINN stoichiometry on a ``times x radii`` grid (rows are times).

    The branch input samples ``current_fn`` over ``[0, horizon]`` (default:
    the last requested time).
    """
    times = np.asarray(times, dtype=float)
    radii = np.asarray(radii, dtype=float)
    currents = np.asarray(current_fn(times), dtype=float)
    if t_scale is None:
        t_scale = model.time_scale(float(np.mean(currents)))
    horizon = times[-1] if horizon is None else horizon
    enc = np.asarray(current_fn(np.linspace(0.0, horizon, model.arch.m)), dtype=float) / model.i_norm
    c0 = soc_to_initial_stoichiometry(soc0, cell.electrode(model.side), model.side)
    T, R = np.meshgrid(times, radii, indexing="ij")
    I = np.broadcast_to(currents[:, None], T.shape)
    with torch.no_grad():
        out = forward(model, enc, T.ravel(), R.ravel(), I.ravel(), t_scale, c0)
    return out.numpy().reshape(T.shape)


Predictor = Callable[[np.ndarray, np.ndarray], np.ndarray]


def model_predictor(model: PinnModel, cell: CellParams, profile: CurrentProfile, soc0: float) -> Predictor:
    """``(times, radii) -> field`` for a model driven by ``profile``."""
    t_scale = model.time_scale(mean_current(profile))
    return lambda times, radii: predict_field(
        model, cell, times, radii, profile.current_at, soc0, t_scale=t_scale, horizon=profile.duration
    )


def _predictor(m, cell, profile, soc0) -> Predictor:
    return model_predictor(m, cell, profile, soc0) if isinstance(m, PinnModel) else m


def concentration_rmse(predict: Predictor, ref: SimulationResult, side: str) -> float:
    fields = ref.fields(side)
    if fields is None:
        raise ValueError("reference simulation must store fields")
    times = np.array([f.t for f in fields])
    truth = np.stack([f.values for f in fields])
    pred = predict(times, fields[0].grid)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def evaluate_against_solver(
    model_pos: PinnModel | Predictor,
    model_neg: PinnModel | Predictor,
    cell: CellParams,
    profile: CurrentProfile,
    soc0: float,
    reference: SimulationResult | None = None,
) -> dict:
    """Concentration and voltage RMSE of a PINN pair against the finite-volume solution.

    Either model may be replaced by a ``(times, radii) -> field`` callable.
    The solver run stops at the voltage cutoffs; the comparison covers the
    simulated span only.
    """
    ref = reference if reference is not None else simulate_profile(cell, profile, soc0, store_fields=True)
    pred = {"pos": _predictor(model_pos, cell, profile, soc0), "neg": _predictor(model_neg, cell, profile, soc0)}
    out = {f"conc_rmse_{s}": concentration_rmse(pred[s], ref, s) for s in SIDES}
    surf = {s: pred[s](ref.times, np.array([1.0]))[:, 0] for s in SIDES}
    try:
        v = np.asarray(terminal_voltage(surf["pos"], surf["neg"], ref.currents, cell))
        out["voltage_rmse"] = float(np.sqrt(np.mean((v - ref.voltage) ** 2)))
        out["voltage_pinn"] = v
    except (RuntimeError, ValueError) as exc:
        out["voltage_rmse"] = float("inf")
        out["voltage_error"] = str(exc)
    out["reference"] = ref
    return out


HISTORY_COLUMNS = (
    "electrode", "epoch", "L_PDE", "L_BCc", "L_BCs", "total",
    "lambda_pde", "lambda_bcc", "lambda_bcs", "gradnorm_pde", "gradnorm_bcc", "gradnorm_bcs", "eval_conc_rmse",
)


def write_history(rows: list[dict], path: str | Path) -> None:
    """History CSV with a fixed column set; missing values are left empty."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
