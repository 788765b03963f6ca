"""Reconstruction network: edge-aware K-hop GAT, PEK-GCN stack and the GRU-R recurrent gate.

Two ST-blocks are applied in sequence.  Each block maps per-step node
features through graph layers, then runs a GRU-R cell along time whose
update gate blends in an embedding of the low-rank prior.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .grid import EdgeFeatureMatrix, KHopOperatorSet
from .lowrank import (Normalizer, add_linear, glorot, init_khop_gat, init_pek_gcn, khop_gat_forward,
                      linear, pek_gcn_forward)
from .numcore import ParamStore, Tensor

log = logging.getLogger(__name__)

GATE_PARAMS = ("w_r", "b_r", "w_z", "b_z", "u_q", "w_q", "b_q", "w_c", "u_c")


@dataclass(frozen=True)
class STNetConfig:
    gat_hidden: int = 16
    gcn_widths: tuple = (32, 16, 2)
    alpha: float = 0.3
    hidden: int = 16
    n_blocks: int = 2
    block_in: int = 4
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    slope: float = 0.2
    lr: float = 0.01
    batch_size: int = 300
    epochs: int = 20
    anchor_weight: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if not 0.0 < self.bn_momentum < 1.0:
            raise ValueError("bn_momentum must lie in (0, 1)")


def _finite(t: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise nc.NumericError(f"non-finite activation after {where}")
    return t


# --------------------------------------------------------------------------
# edge features and missing-rate features
# --------------------------------------------------------------------------


def standardized_edges(E: EdgeFeatureMatrix, ops: KHopOperatorSet) -> np.ndarray:
    """Edge features aligned to ``ops.order`` and z-scored over the attended pairs.

    Raw impedance magnitudes on a meshed grid are nearly constant, so only
    their deviations carry information for the attention scores.
    """
    if tuple(E.order) != tuple(ops.order):
        pos = {b: i for i, b in enumerate(E.order)}
        try:
            idx = [pos[b] for b in ops.order]
        except KeyError as exc:
            raise ValueError(f"edge features lack PMU bus {exc}") from exc
        vals = E.values[np.ix_(idx, idx)]
    else:
        vals = E.values
    sel = ops.any_hop_mask()
    if not sel.any():
        return np.zeros_like(vals)
    mu, sd = vals[sel].mean(), vals[sel].std()
    if sd <= 1e-12 * max(abs(mu), 1.0):
        return np.zeros_like(vals)
    return (vals - mu) / sd


def missing_rate_features(mask: np.ndarray, ops: KHopOperatorSet) -> tuple[np.ndarray, np.ndarray]:
    """(l_r, l_z) for every step and node of mask windows shaped (..., T, N).

    l_r: fraction of the node's earlier steps in the window that are missing.
    l_z: fraction of its K-hop PMU neighbors missing at the same step.
    """
    miss = 1.0 - np.asarray(mask, dtype=np.float64)
    T = miss.shape[-2]
    before = np.cumsum(miss, axis=-2) - miss
    l_r = before / np.maximum(np.arange(T), 1)[:, None]
    nb = ops.any_hop_mask().astype(np.float64)
    l_z = (miss @ nb.T) / np.maximum(nb.sum(axis=1), 1.0)
    return l_r, l_z


# --------------------------------------------------------------------------
# GRU-R
# --------------------------------------------------------------------------


def init_gru_r(store: ParamStore, rng, name: str, n_spatial: int, hidden: int, n_prior: int = 2) -> None:
    store.add(f"{name}.w_r", np.array([1.0]))
    store.add(f"{name}.b_r", np.array([0.0]))
    store.add(f"{name}.w_z", np.array([1.0]))
    store.add(f"{name}.b_z", np.array([0.0]))
    store.add(f"{name}.u_q", np.array([0.5]))
    store.add(f"{name}.w_q", np.array([0.5]))
    store.add(f"{name}.b_q", np.array([0.1]))
    store.add(f"{name}.w_c", glorot(rng, n_spatial, hidden))
    store.add(f"{name}.u_c", glorot(rng, hidden, hidden))
    store.add(f"{name}.W_p", glorot(rng, n_prior, hidden))


# exp(-36) is still above half an ulp of 1, so capped gates stay strictly inside their ranges
GATE_CAP = 36.0


def _gate_act(a: Tensor) -> Tensor:
    """min(relu(a), GATE_CAP); exact below the cap."""
    a = nc.relu(a)
    return a - nc.relu(a - GATE_CAP)


def gates(l_r, l_z, store: ParamStore, name: str):
    """(r, z, q) for missing-rate features of any shape; returned as tensors."""
    l_r, l_z = nc.as_tensor(l_r), nc.as_tensor(l_z)
    r = nc.exp(-_gate_act(l_r * store.tensor(f"{name}.w_r") + store.tensor(f"{name}.b_r")))
    z = nc.exp(-_gate_act(l_z * store.tensor(f"{name}.w_z") + store.tensor(f"{name}.b_z")))
    q = 1.0 - nc.exp(-_gate_act(l_r * store.tensor(f"{name}.u_q") + l_z * store.tensor(f"{name}.w_q")
                                + store.tensor(f"{name}.b_q")))
    return r, z, q


def gru_r_step(h_spatial, h_prev, prior, l_r, l_z, store: ParamStore, name: str,
               return_gates: bool = False):
    """One GRU-R update.

    ``h_spatial`` (..., F), ``h_prev`` (..., H), ``prior`` (..., 2) raw prior
    values, ``l_r``/``l_z`` (..., 1).  The output is ``q p + (1 - q) h_cand``
    with ``p = prior W_p``.
    """
    h_spatial, h_prev, prior = nc.as_tensor(h_spatial), nc.as_tensor(h_prev), nc.as_tensor(prior)
    r, z, q = gates(l_r, l_z, store, name)
    cand = nc.tanh((z * h_spatial) @ store.tensor(f"{name}.w_c")
                   + (r * h_prev) @ store.tensor(f"{name}.u_c"))
    p = prior @ store.tensor(f"{name}.W_p")
    h = q * p + (1.0 - q) * cand
    return (h, (r, z, q)) if return_gates else h


# --------------------------------------------------------------------------
# batch norm
# --------------------------------------------------------------------------


def init_batch_norm(store: ParamStore, name: str, width: int) -> None:
    store.add(f"{name}.gamma", np.ones(width))
    store.add(f"{name}.beta", np.zeros(width))
    store.add(f"{name}.mean", np.zeros(width), trainable=False)
    store.add(f"{name}.var", np.ones(width), trainable=False)


def batch_norm(x: Tensor, store: ParamStore, name: str, train: bool, momentum: float = 0.9,
               eps: float = 1e-5) -> Tensor:
    """Normalize the last axis; batch statistics in training, running averages otherwise.

    In training mode the running averages are updated in place as
    ``run = momentum * run + (1 - momentum) * batch``.
    """
    axes = tuple(range(x.data.ndim - 1))
    if train:
        mu = x.mean(axis=axes, keepdims=True)
        xc = x - mu
        var = nc.square(xc).mean(axis=axes, keepdims=True)
        xhat = xc / nc.sqrt(var + eps)
        p_mean, p_var = store.params[f"{name}.mean"], store.params[f"{name}.var"]
        p_mean.value = momentum * p_mean.value + (1 - momentum) * mu.data.reshape(-1)
        p_var.value = momentum * p_var.value + (1 - momentum) * var.data.reshape(-1)
    else:
        xhat = (x - store[f"{name}.mean"]) * (1.0 / np.sqrt(store[f"{name}.var"] + eps))
    return xhat * store.tensor(f"{name}.gamma") + store.tensor(f"{name}.beta")


# --------------------------------------------------------------------------
# the network
# --------------------------------------------------------------------------


@dataclass
class STNetModel:
    store: ParamStore
    ops: KHopOperatorSet
    edge: np.ndarray  # standardized, aligned to ops.order
    cfg: STNetConfig
    history: list = field(default_factory=list)

    @property
    def normalizer(self) -> Normalizer:
        return Normalizer.from_store(self.store)


def init_block(store: ParamStore, rng, name: str, K: int, cfg: STNetConfig) -> None:
    init_khop_gat(store, rng, f"{name}.gat", K, cfg.block_in, cfg.gat_hidden, edge_features=True)
    widths = (cfg.gat_hidden,) + tuple(cfg.gcn_widths)
    for i, (a, b) in enumerate(zip(widths, widths[1:])):
        init_pek_gcn(store, rng, f"{name}.gcn{i + 1}", K, a, b, b)
    add_linear(store, rng, f"{name}.res", cfg.gat_hidden, cfg.gcn_widths[-1], bias=False)
    init_batch_norm(store, f"{name}.bn", cfg.gcn_widths[-1])
    init_gru_r(store, rng, f"{name}.gru", cfg.gcn_widths[-1], cfg.hidden)


def init_stnet(ops: KHopOperatorSet, E: EdgeFeatureMatrix | None, cfg: STNetConfig, seed: int,
               normalizer: Normalizer) -> STNetModel:
    rng = np.random.default_rng([seed, 303])
    store = ParamStore()
    for b in range(1, cfg.n_blocks + 1):
        init_block(store, rng, f"b{b}", ops.K, cfg)
        if b < cfg.n_blocks:
            add_linear(store, rng, f"proj{b}", cfg.hidden, cfg.block_in)
    add_linear(store, rng, "head", cfg.hidden, 2)
    normalizer.to_store(store)
    edge = np.zeros((ops.n, ops.n)) if E is None else standardized_edges(E, ops)
    return STNetModel(store, ops, edge, cfg)


def block_forward(x: Tensor, prior: Tensor, l_r: np.ndarray, l_z: np.ndarray, model: STNetModel,
                  name: str, train: bool) -> Tensor:
    """x (B, T, N, F_in) -> hidden sequence (B, T, N, H)."""
    cfg, store, ops = model.cfg, model.store, model.ops
    gat = _finite(khop_gat_forward(x, ops, store, f"{name}.gat", edge=model.edge, slope=cfg.slope),
                  f"{name}.gat")
    h = gat
    n_gcn = len(cfg.gcn_widths)
    for i in range(n_gcn):
        h = pek_gcn_forward(h, ops, store, f"{name}.gcn{i + 1}")
        if i < n_gcn - 1:
            h = nc.relu(h)
    h = _finite(h, f"{name}.gcn")
    h = h * (1.0 - cfg.alpha) + linear(store, f"{name}.res", gat) * cfg.alpha
    s = _finite(batch_norm(h, store, f"{name}.bn", train, cfg.bn_momentum, cfg.bn_eps), f"{name}.bn")

    B, T, N, _ = s.shape
    hid = Tensor(np.zeros((B, N, cfg.hidden)))
    outs = []
    for t in range(T):
        hid = gru_r_step(s[:, t], hid, prior[:, t], l_r[:, t, :, None], l_z[:, t, :, None],
                         store, f"{name}.gru")
        outs.append(nc.reshape(hid, (B, 1, N, cfg.hidden)))
    return _finite(nc.concat(outs, axis=1), f"{name}.gru")


def stnet_graph(model: STNetModel, x_obs: np.ndarray, mask: np.ndarray, prior: np.ndarray | None,
                train: bool = False) -> Tensor:
    """Forward graph returning the normalized reconstruction (B, T, N, 2).

    ``prior`` is the low-rank estimate in physical units, or ``None`` to feed
    zeros to the prior slot.
    """
    norm = model.normalizer
    mask = np.asarray(mask, dtype=np.float64)
    z = norm.forward(x_obs) * mask[..., None]
    m = mask[..., None]
    x = Tensor(np.concatenate([z[..., :1], m, z[..., 1:], m], axis=-1))
    p = Tensor(np.zeros(z.shape) if prior is None else norm.forward(prior))
    l_r, l_z = missing_rate_features(mask, model.ops)
    for b in range(1, model.cfg.n_blocks + 1):
        h = block_forward(x, p, l_r, l_z, model, f"b{b}", train)
        if b < model.cfg.n_blocks:
            x = linear(model.store, f"proj{b}", h)
    return _finite(linear(model.store, "head", h), "head")


def stnet_forward(model: STNetModel, x_obs: np.ndarray, mask: np.ndarray, prior: np.ndarray | None,
                  train: bool = False, chunk: int = 64) -> np.ndarray:
    """Reconstruction in physical units, same shape as ``x_obs``.

    Evaluation mode (the default) is deterministic and leaves the
    batch-norm running statistics untouched.  Windows are then independent,
    so they are processed ``chunk`` at a time to bound memory.
    """
    squeeze = x_obs.ndim == 3
    if squeeze:
        x_obs, mask = x_obs[None], mask[None]
        prior = None if prior is None else prior[None]
    if not train and len(x_obs) > chunk:
        return np.concatenate([stnet_forward(model, x_obs[i:i + chunk], mask[i:i + chunk],
                                             None if prior is None else prior[i:i + chunk], chunk=chunk)
                               for i in range(0, len(x_obs), chunk)])
    y = stnet_graph(model, x_obs, mask, prior, train)
    model.store.discard_graph()
    out = model.normalizer.inverse(y.data)
    return out[0] if squeeze else out


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


def stnet_loss(model: STNetModel, x_obs, mask, prior, x_target, train: bool = True):
    """MSE at missing entries plus ``anchor_weight`` times MSE at observed ones (normalized units)."""
    y = stnet_graph(model, x_obs, mask, prior, train)
    tgt = model.normalizer.forward(x_target)
    m = np.repeat(np.asarray(mask, dtype=np.float64)[..., None], 2, axis=-1)
    sq = nc.square(y - tgt)
    n_miss, n_obs = (1 - m).sum(), m.sum()
    loss = None
    if n_miss > 0:
        loss = (sq * (1 - m)).sum() * (1.0 / n_miss)
    if n_obs > 0:
        anchor = (sq * m).sum() * (model.cfg.anchor_weight / n_obs)
        loss = anchor if loss is None else loss + anchor
    return loss


def stnet_step(model: STNetModel, x_obs, mask, prior, x_target, lr: float | None = None) -> float:
    model.store.zero_grad()
    loss = stnet_loss(model, x_obs, mask, prior, x_target, train=True)
    if not np.isfinite(loss.data):
        model.store.discard_graph()
        raise nc.NumericError("ST-Net loss diverged")
    loss.backward()
    model.store.collect_grads()
    nc.adam_step(model.store, model.cfg.lr if lr is None else lr)
    if not model.store.all_finite():
        raise nc.NumericError("ST-Net parameters became non-finite")
    return float(loss.data)


def train_stnet(x_obs: np.ndarray, mask: np.ndarray, x_true: np.ndarray, prior: np.ndarray | None,
                ops: KHopOperatorSet, E: EdgeFeatureMatrix | None, cfg: STNetConfig, seed: int,
                max_steps: int | None = None) -> STNetModel:
    """Supervised training on stacked windows (B, T, N, 2); ``prior=None`` trains without a prior."""
    model = init_stnet(ops, E, cfg, seed, Normalizer.fit(x_obs, mask))
    rng = np.random.default_rng([seed, 404])
    n = x_obs.shape[0]
    bs = min(cfg.batch_size, n)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = np.sort(order[start:start + bs])
            pr = None if prior is None else prior[idx]
            loss = stnet_step(model, x_obs[idx], mask[idx], pr, x_true[idx])
            model.history.append({"step": step, "epoch": epoch, "loss": loss})
            step += 1
            if max_steps is not None and step >= max_steps:
                return model
    return model


def model_card(model: STNetModel, seed: int) -> dict:
    return {"config": asdict(model.cfg), "K": model.ops.K, "pmu_order": list(model.ops.order),
            "seed": seed, "n_params": model.store.n_values()}
