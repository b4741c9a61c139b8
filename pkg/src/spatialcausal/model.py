"""The additive spatial outcome model, its training loop, and prediction.

A prediction decomposes into four additive components:

    yhat(i) = sum_m alpha_m * t_m(i)          direct
            + sum_m f_m(patch_m(i))           interference
            + g(x(i))                         observed confounders
            + w^T z(s(i))                     spatial adjustment (optional)

Each component is separately retrievable, which the effect estimators rely on.
Interference nets consume neighborhood patches whose center entry is zero, so
the unit's own treatment enters only through the direct term.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import engine as E
from . import gp as G
from . import nets as N
from .engine import Tensor
from .errors import (ConfigError, ContractError, DataError, DimensionError,
                     FormatError, NumericError)


@dataclass
class SpatialDataset:
    """Point-referenced units: coordinates, treatments, patches, confounders, outcomes.

    ``patches`` has shape (N, M, d_S) for 1-d line data or (N, M, d_S, d_S)
    for grids, with the center entry zeroed.  Missing outcomes are NaN.
    """

    coords: np.ndarray
    treatments: np.ndarray
    patches: np.ndarray
    confounders: np.ndarray
    outcomes: np.ndarray
    d_s: int
    treatment_names: tuple = ()

    def __post_init__(self):
        self.coords = np.atleast_2d(np.asarray(self.coords, dtype=np.float64))
        self.treatments = np.asarray(self.treatments, dtype=np.float64)
        self.patches = np.asarray(self.patches, dtype=np.float64)
        self.confounders = np.asarray(self.confounders, dtype=np.float64)
        self.outcomes = np.asarray(self.outcomes, dtype=np.float64)
        n = self.coords.shape[0]
        if self.treatments.ndim != 2 or self.treatments.shape[0] != n:
            raise DimensionError(f"treatments must be (N, M), got {self.treatments.shape}")
        m = self.treatments.shape[1]
        if self.patches.shape[:2] != (n, m) or self.patches.ndim not in (3, 4):
            raise DimensionError(f"patches must be (N, M, ...) matching N={n} M={m}, "
                                 f"got {self.patches.shape}")
        if self.confounders.ndim != 2 or self.confounders.shape[0] != n:
            raise DimensionError(f"confounders must be (N, dx), got {self.confounders.shape}")
        if self.outcomes.shape != (n,):
            raise DimensionError(f"outcomes must be (N,), got {self.outcomes.shape}")
        if self.d_s < 1 or self.d_s % 2 == 0:
            raise ContractError(f"d_s must be odd and positive, got {self.d_s}")
        if self.patches.shape[2] != self.d_s or (self.patches.ndim == 4
                                                 and self.patches.shape[3] != self.d_s):
            raise DimensionError(f"patch side {self.patches.shape[2:]} != d_s {self.d_s}")
        center = (slice(None), slice(None)) + ((self.d_s // 2,) * (self.patches.ndim - 2))
        if np.any(self.patches[center] != 0.0):
            raise DataError("patch centers must be zero (own treatment excluded)")
        if not self.treatment_names:
            self.treatment_names = tuple(f"t{i + 1}" for i in range(m))
        self.treatment_names = tuple(self.treatment_names)
        if len(self.treatment_names) != m:
            raise DimensionError(f"{len(self.treatment_names)} names for {m} treatments")

    @property
    def n_units(self) -> int:
        return self.coords.shape[0]

    @property
    def n_treatments(self) -> int:
        return self.treatments.shape[1]

    @property
    def patch_shape(self) -> tuple:
        return self.patches.shape[2:]

    def observed_mask(self) -> np.ndarray:
        return np.isfinite(self.outcomes)

    def subset(self, indices) -> "SpatialDataset":
        idx = np.asarray(indices)
        return SpatialDataset(self.coords[idx], self.treatments[idx], self.patches[idx],
                              self.confounders[idx], self.outcomes[idx], self.d_s,
                              self.treatment_names)


@dataclass
class ModelConfig:
    """Names each component kind plus the hyperparameters to build it."""

    m: int
    patch_shape: tuple
    x_dim: int
    interference: str = "linear"        # linear | mlp | cnn | unet | none
    confounder: str = "linear"          # linear | mlp
    mlp_width: int = 256
    mlp_depth: int = 3
    cnn_channels: int = 64
    cnn_depth: int = 9
    unet_base: int = 16
    unet_depth: int = 3
    gp: bool = False
    kernel: G.KernelSpec | None = None
    q: int = 100
    inducing_strategy: str = "grid"
    train_lengthscale: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.m < 1 or self.x_dim < 1:
            raise ConfigError(f"need m >= 1 and x_dim >= 1, got m={self.m} x_dim={self.x_dim}")
        if self.interference not in ("linear", "mlp", "cnn", "unet", "none"):
            raise ConfigError(f"unknown interference kind {self.interference!r}")
        if self.confounder not in ("linear", "mlp"):
            raise ConfigError(f"unknown confounder kind {self.confounder!r}")
        if self.interference in ("cnn", "unet") and len(self.patch_shape) != 2:
            raise ConfigError(f"{self.interference} interference needs 2-d patches, "
                              f"got shape {self.patch_shape}")
        if self.gp and self.kernel is None:
            raise ConfigError("gp enabled but no kernel given")


class SpatialModel:
    """Additive outcome model; see the module docstring for the decomposition."""

    def __init__(self, config: ModelConfig, alphas: Tensor,
                 interference_nets: list, confounder_net, gp_term: G.GpTerm | None):
        self.config = config
        self.alphas = alphas                    # (M, 1)
        self.interference_nets = interference_nets
        self.confounder_net = confounder_net
        self.gp_term = gp_term
        self.noise_sigma = 0.0

    @property
    def m(self) -> int:
        return self.config.m

    def parameters(self) -> list:
        params = [self.alphas]
        for net in self.interference_nets:
            params.extend(net.params)
        params.extend(self.confounder_net.params)
        if self.gp_term is not None:
            params.extend(self.gp_term.parameters())
        return params

    # -- engine-path forward (training) ------------------------------------

    def _patch_input(self, net, patches_m: np.ndarray) -> np.ndarray:
        if net.kind in ("cnn", "unet"):
            return patches_m[:, None, :, :]
        return patches_m.reshape(patches_m.shape[0], -1)

    def forward_batch(self, treatments: np.ndarray, patches: np.ndarray,
                      confounders: np.ndarray, coords: np.ndarray) -> Tensor:
        pred = E.matmul(Tensor(treatments), self.alphas)
        for m, net in enumerate(self.interference_nets):
            out = net.forward(Tensor(self._patch_input(net, patches[:, m])))
            if net.kind == "unet":
                out = N.unet_reduce(out)
            pred = E.add(pred, out)
        pred = E.add(pred, self.confounder_net.forward(Tensor(confounders)))
        if self.gp_term is not None:
            pred = E.add(pred, self.gp_term.values_op(coords))
        return pred

    # -- numpy-path components (estimation; no tape is active) -------------

    def direct_component(self, treatments: np.ndarray) -> np.ndarray:
        return (np.asarray(treatments, dtype=np.float64) @ self.alphas.data).reshape(-1)

    def interference_component(self, m: int, patches_m: np.ndarray) -> np.ndarray:
        if not self.interference_nets:
            return np.zeros(patches_m.shape[0])
        net = self.interference_nets[m]
        out = net.forward(Tensor(self._patch_input(net, patches_m)))
        if net.kind == "unet":
            out = N.unet_reduce(out)
        return out.data.reshape(-1)

    def interference_total(self, patches: np.ndarray) -> np.ndarray:
        total = np.zeros(patches.shape[0])
        for m in range(len(self.interference_nets)):
            total += self.interference_component(m, patches[:, m])
        return total

    def confounder_component(self, confounders: np.ndarray) -> np.ndarray:
        return self.confounder_net.forward(Tensor(confounders)).data.reshape(-1)

    def spatial_component(self, coords: np.ndarray) -> np.ndarray:
        if self.gp_term is None:
            return np.zeros(np.atleast_2d(coords).shape[0])
        return self.gp_term.values_np(coords)

    def predict_dataset(self, dataset: SpatialDataset) -> np.ndarray:
        """Predicted outcomes for every unit at observed assignments."""
        return (self.direct_component(dataset.treatments)
                + self.interference_total(dataset.patches)
                + self.confounder_component(dataset.confounders)
                + self.spatial_component(dataset.coords))


@dataclass
class PredictionBreakdown:
    yhat: float
    direct: float
    interference: float
    confounder: float
    spatial: float


def build_model(config: ModelConfig, coords: np.ndarray | None = None) -> SpatialModel:
    """Construct the model named by the config.

    ``coords`` supplies inducing-point candidates and is required when the
    spatial term is enabled.
    """
    config.validate()
    alphas = Tensor(np.zeros((config.m, 1)), requires_grad=True)
    patch_size = int(np.prod(config.patch_shape))
    nets = []
    if config.interference != "none":
        for m in range(config.m):
            seed = config.seed + 101 * (m + 1)
            if config.interference == "linear":
                nets.append(N.build_linear_interference(config.patch_shape, seed))
            elif config.interference == "mlp":
                nets.append(N.build_mlp(
                    N.MlpSpec(patch_size, config.mlp_width, config.mlp_depth), seed))
            elif config.interference == "cnn":
                nets.append(N.build_cnn(
                    N.CnnSpec(1, config.cnn_channels, config.cnn_depth,
                              config.patch_shape[0]), seed))
            else:
                nets.append(N.build_unet(
                    N.UnetSpec(1, config.unet_base, config.patch_shape[0],
                               depth=config.unet_depth), seed))
    if config.confounder == "linear":
        conf_net = N.build_affine(config.x_dim, config.seed + 7)
    else:
        conf_net = N.build_mlp(
            N.MlpSpec(config.x_dim, config.mlp_width, config.mlp_depth), config.seed + 7)
    gp_term = None
    if config.gp:
        if coords is None:
            raise ConfigError("gp-enabled model needs coordinates for inducing points")
        inducing = G.select_inducing(coords, config.q, config.inducing_strategy,
                                    seed=config.seed + 13)
        gp_term = G.GpTerm(G.build_nystrom(inducing, config.kernel),
                           train_lengthscale=config.train_lengthscale)
    return SpatialModel(config, alphas, nets, conf_net, gp_term)


def predict(model: SpatialModel, dataset: SpatialDataset, index: int,
            overrides: dict | None = None) -> PredictionBreakdown:
    """Predict one unit, optionally replacing t_m and/or patch_m values.

    ``overrides`` = {"t": {m: value}, "patch": {m: array-or-scalar}}; a scalar
    patch override fills the whole patch (0 gives the all-zero neighborhood).
    The dataset is never modified.
    """
    if not 0 <= index < dataset.n_units:
        raise ContractError(f"unit index {index} outside 0..{dataset.n_units - 1}")
    if dataset.n_treatments != model.m:
        raise DimensionError(f"dataset has M={dataset.n_treatments}, model has M={model.m}")
    overrides = overrides or {}
    t = dataset.treatments[index:index + 1].copy()
    for m, val in overrides.get("t", {}).items():
        t[0, m] = float(val)
    patches = dataset.patches[index:index + 1].copy()
    for m, val in overrides.get("patch", {}).items():
        val = np.asarray(val, dtype=np.float64)
        if val.ndim == 0:
            patches[0, m] = val
        else:
            if val.shape != dataset.patch_shape:
                raise DimensionError(
                    f"patch override shape {val.shape} != {dataset.patch_shape}")
            patches[0, m] = val
    direct = float(model.direct_component(t)[0])
    interference = float(model.interference_total(patches)[0])
    confounder = float(model.confounder_component(dataset.confounders[index:index + 1])[0])
    spatial = float(model.spatial_component(dataset.coords[index:index + 1])[0])
    return PredictionBreakdown(direct + interference + confounder + spatial,
                               direct, interference, confounder, spatial)


@dataclass
class TrainConfig:
    epochs: int
    lr: float = 0.001
    batch_size: int | None = None       # None = full batch
    optimizer: str = "auto"             # auto | sgd | adam
    momentum: float = 0.99
    seed: int = 0
    patience: int | None = None         # early stopping on validation MSE

    def validate(self) -> None:
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("auto", "sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


def _make_optimizer(model: SpatialModel, cfg: TrainConfig):
    kind = cfg.optimizer
    if kind == "auto":
        kind = "adam" if model.gp_term is not None else "sgd"
    if kind == "sgd":
        return E.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    return E.Adam(model.parameters(), lr=cfg.lr)


def _snapshot(model: SpatialModel) -> list:
    return [p.data.copy() for p in model.parameters()]


def _restore(model: SpatialModel, snap: list) -> None:
    for p, d in zip(model.parameters(), snap):
        p.data = d.copy()


def train(model: SpatialModel, dataset: SpatialDataset, cfg: TrainConfig,
          val_dataset: SpatialDataset | None = None) -> list:
    """Minimize MSE on observed-outcome units; returns the per-epoch loss trace.

    Trace rows are (epoch, train_mse, val_mse) with val_mse NaN when no
    validation set is given.  With a validation set and ``patience`` set,
    training stops after that many non-improving epochs and the best
    parameters (by validation MSE) are restored.
    """
    cfg.validate()
    mask = dataset.observed_mask()
    if not mask.any():
        raise DataError("no units with observed outcomes")
    obs = dataset.subset(np.nonzero(mask)[0])
    n = obs.n_units
    y = obs.outcomes.reshape(-1, 1)
    batch = n if cfg.batch_size is None else min(cfg.batch_size, n)
    opt = _make_optimizer(model, cfg)
    rng = np.random.default_rng(cfg.seed)
    val_obs = None
    if val_dataset is not None:
        vmask = val_dataset.observed_mask()
        if vmask.any():
            val_obs = val_dataset.subset(np.nonzero(vmask)[0])

    trace = []
    best_val = np.inf
    best_snap = None
    stale = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        sq_sum = 0.0
        for start in range(0, n, batch):
            idx = perm[start:start + batch]
            opt.zero_grad()
            try:
                with E.Tape() as tape:
                    pred = model.forward_batch(obs.treatments[idx], obs.patches[idx],
                                               obs.confounders[idx], obs.coords[idx])
                    loss = E.mse(pred, Tensor(y[idx]))
                lv = loss.item()
                if not np.isfinite(lv):
                    raise NumericError("loss is not finite")
                tape.backward(loss)
            except NumericError as exc:
                raise NumericError(f"training diverged at epoch {epoch}: {exc}") from exc
            opt.step()
            sq_sum += lv * idx.size
        train_mse = sq_sum / n
        val_mse = np.nan
        if val_obs is not None:
            resid = model.predict_dataset(val_obs) - val_obs.outcomes
            val_mse = float(np.mean(resid * resid))
            if val_mse < best_val - 1e-12:
                best_val = val_mse
                best_snap = _snapshot(model)
                stale = 0
            else:
                stale += 1
        trace.append((epoch, train_mse, val_mse))
        if (cfg.patience is not None and val_obs is not None and stale > cfg.patience):
            break
    if best_snap is not None and cfg.patience is not None:
        _restore(model, best_snap)
    resid = model.predict_dataset(obs) - obs.outcomes
    model.noise_sigma = float(np.std(resid))
    return trace


def evaluate(model: SpatialModel, dataset: SpatialDataset,
             percentiles: tuple = (30.0, 70.0)) -> dict:
    """R-squared and MAE overall and per treatment-percentile stratum.

    Strata split on treatment 1: below the first percentile, between, above
    the second.  Empty strata are omitted from the result.
    """
    mask = dataset.observed_mask()
    if not mask.any():
        raise DataError("no observed outcomes to evaluate")
    obs = dataset.subset(np.nonzero(mask)[0])
    y = obs.outcomes
    pred = model.predict_dataset(obs)
    t1 = obs.treatments[:, 0]
    lo, hi = np.percentile(t1, list(percentiles))

    def metrics(sel: np.ndarray) -> dict | None:
        if not sel.any():
            return None
        yy, pp = y[sel], pred[sel]
        ss_res = float(np.sum((yy - pp) ** 2))
        ss_tot = float(np.sum((yy - yy.mean()) ** 2))
        if ss_tot == 0.0:
            r2 = 1.0 if ss_res == 0.0 else 0.0
        else:
            r2 = 1.0 - ss_res / ss_tot
        return {"r2": r2, "mae": float(np.mean(np.abs(yy - pp)))}

    out = {"all": metrics(np.ones(y.size, dtype=bool))}
    for name, sel in (("low", t1 < lo), ("mid", (t1 >= lo) & (t1 <= hi)), ("high", t1 > hi)):
        m = metrics(sel)
        if m is not None:
            out[name] = m
    return out


# ---------------------------------------------------------------------------
# checkpoints: JSON header + flat little-endian float64 parameter stream
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"SCKP"


def _model_header(model: SpatialModel) -> dict:
    cfg = model.config
    head = {
        "m": cfg.m,
        "patch_shape": list(cfg.patch_shape),
        "x_dim": cfg.x_dim,
        "interference": [N.spec_header(net) for net in model.interference_nets],
        "interference_kind": cfg.interference,
        "confounder": N.spec_header(model.confounder_net),
        "noise_sigma": model.noise_sigma,
        "param_order": "alphas, interference nets by treatment, confounder net, "
                       "gp weights, gp lengthscale",
    }
    if model.gp_term is not None:
        k = model.gp_term.map.kernel
        head["gp"] = {
            "kernel": {"family": k.family, "sigma": k.sigma,
                       "lengthscale": k.lengthscale, "noise": k.noise},
            "inducing": model.gp_term.map.inducing.points.tolist(),
            "train_lengthscale": model.gp_term.train_lengthscale,
        }
    else:
        head["gp"] = None
    return head


def save_model(model: SpatialModel, path: str) -> None:
    head = json.dumps(_model_header(model), sort_keys=True).encode("utf-8")
    flat = [model.alphas.data.reshape(-1)]
    for net in model.interference_nets:
        flat.append(N.flatten_params(net))
    flat.append(N.flatten_params(model.confounder_net))
    if model.gp_term is not None:
        flat.append(model.gp_term.weights.data.reshape(-1))
        if model.gp_term.train_lengthscale:
            flat.append(model.gp_term.lengthscale.data.reshape(1))
    payload = np.concatenate(flat).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(payload.tobytes())


def load_model(path: str) -> SpatialModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:4]!r} at byte 0")
    (hlen,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + hlen:
        raise FormatError(f"checkpoint header truncated at byte {len(blob)}")
    head = json.loads(blob[8:8 + hlen].decode("utf-8"))
    stream = np.frombuffer(blob[8 + hlen:], dtype="<f8")

    cfg = ModelConfig(m=head["m"], patch_shape=tuple(head["patch_shape"]),
                      x_dim=head["x_dim"], interference=head["interference_kind"],
                      confounder=head["confounder"]["kind"])
    if head["gp"] is not None:
        cfg.gp = True
        cfg.kernel = G.KernelSpec(**head["gp"]["kernel"])
        cfg.train_lengthscale = head["gp"]["train_lengthscale"]
    nets = [N.build_from_header(h) for h in head["interference"]]
    conf_net = N.build_from_header(head["confounder"])
    gp_term = None
    if head["gp"] is not None:
        kern = G.KernelSpec(**head["gp"]["kernel"])
        inducing = G.InducingSet(np.asarray(head["gp"]["inducing"], dtype=np.float64))
        gp_term = G.GpTerm(G.build_nystrom(inducing, kern),
                           train_lengthscale=head["gp"]["train_lengthscale"])
    alphas = Tensor(np.zeros((head["m"], 1)), requires_grad=True)
    model = SpatialModel(cfg, alphas, nets, conf_net, gp_term)
    model.noise_sigma = float(head.get("noise_sigma", 0.0))

    off = 0

    def take(count: int) -> np.ndarray:
        nonlocal off
        if off + count > stream.size:
            raise FormatError(f"parameter stream truncated: need {count} values "
                              f"at offset {off}, have {stream.size - off}")
        out = stream[off:off + count]
        off += count
        return out

    model.alphas.data = take(head["m"]).reshape(head["m"], 1).copy()
    for net in nets:
        N.set_flat_params(net, take(net.param_count()))
    N.set_flat_params(conf_net, take(conf_net.param_count()))
    if gp_term is not None:
        q = gp_term.map.q
        gp_term.weights.data = take(q).reshape(q, 1).copy()
        if gp_term.train_lengthscale:
            gp_term.lengthscale.data = np.asarray(take(1)[0])
    if off != stream.size:
        raise FormatError(f"parameter stream has {stream.size - off} trailing values")
    return model
