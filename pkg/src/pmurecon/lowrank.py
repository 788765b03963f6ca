"""Low-rank imputation network: self-attention over time, K-hop GAT and PEK-GCN over PMU nodes.

Trained without ground truth: the loss is a (log-)nuclear norm of each
output channel matrix plus a fidelity term on observed entries.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .grid import KHopOperatorSet
from .numcore import ParamStore, Tensor

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# parameter helpers
# --------------------------------------------------------------------------


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def add_linear(store: ParamStore, rng, name: str, n_in: int, n_out: int, bias: bool = True) -> None:
    store.add(f"{name}.W", glorot(rng, n_in, n_out))
    if bias:
        store.add(f"{name}.b", np.zeros(n_out))


def linear(store: ParamStore, name: str, x: Tensor) -> Tensor:
    y = x @ store.tensor(f"{name}.W")
    if f"{name}.b" in store:
        y = y + store.tensor(f"{name}.b")
    return y


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------


def init_self_attention(store: ParamStore, rng, name: str, width: int, hidden: int = 64) -> None:
    for part in ("Wq", "Wk", "Wv"):
        store.add(f"{name}.{part}", glorot(rng, width, hidden))
    store.add(f"{name}.Wo", glorot(rng, hidden, width))


def self_attention_forward(X: Tensor, store: ParamStore, name: str, dropout: float = 0.0,
                           rng: np.random.Generator | None = None, return_weights: bool = False):
    """Scaled dot-product attention between the rows (time steps) of ``X``.

    ``X`` has shape (..., T, N).  Dropout on the attention weights is active
    only when ``rng`` is given (training mode).
    """
    X = nc.as_tensor(X)
    Wq = store.tensor(f"{name}.Wq")
    d_k = Wq.shape[1]
    Q = X @ Wq
    K = X @ store.tensor(f"{name}.Wk")
    V = X @ store.tensor(f"{name}.Wv")
    scores = (Q @ nc.swapaxes(K, -1, -2)) * (1.0 / math.sqrt(d_k))
    A = nc.softmax(scores, axis=-1)
    out = nc.dropout(A, dropout, rng) @ V @ store.tensor(f"{name}.Wo")
    return (out, A) if return_weights else out


def init_khop_gat(store: ParamStore, rng, name: str, K: int, n_in: int, n_out: int,
                  edge_features: bool = False) -> None:
    for k in range(1, K + 1):
        store.add(f"{name}.hop{k}.W1", glorot(rng, n_in, n_out))
        store.add(f"{name}.hop{k}.W2", glorot(rng, n_in, n_out))
        n_att = 2 * n_out + (1 if edge_features else 0)
        store.add(f"{name}.hop{k}.a", glorot(rng, n_att, 1, shape=(n_att,)))
    store.add(f"{name}.Wroot", glorot(rng, n_in, n_out))


def attention_masks(ops: KHopOperatorSet) -> np.ndarray:
    """Per-hop attention domains; an empty neighbor row falls back to the node itself."""
    masks = ops.hop_mask.copy()
    eye = np.eye(ops.n, dtype=bool)
    empty = ~masks.any(axis=2)
    masks |= empty[:, :, None] & eye[None]
    return masks


def khop_gat_forward(H: Tensor, ops: KHopOperatorSet, store: ParamStore, name: str,
                     edge: np.ndarray | None = None, slope: float = 0.2,
                     return_weights: bool = False):
    """Graph attention over the hop-k PMU neighbor sets, averaged over hops.

    ``H`` has shape (..., N, F).  Scores for hop k are
    ``leaky(a^T [W1 h_i || W2 h_j || e_ij])`` normalized by a softmax over
    ``N_i^k``; the hop aggregates ``sum_j alpha_ij W1 h_j`` are averaged and
    added to a root transform of ``h_i`` before the ReLU.
    """
    H = nc.as_tensor(H)
    masks = attention_masks(ops)
    agg = None
    weights = []
    for k in range(1, ops.K + 1):
        W1 = store.tensor(f"{name}.hop{k}.W1")
        a = store.tensor(f"{name}.hop{k}.a")
        f_out = W1.shape[1]
        P = H @ W1
        Q = H @ store.tensor(f"{name}.hop{k}.W2")
        src = P @ nc.reshape(a[:f_out], (f_out, 1))  # (..., N, 1)
        dst = Q @ nc.reshape(a[f_out:2 * f_out], (f_out, 1))  # (..., N, 1)
        scores = src + nc.swapaxes(dst, -1, -2)  # (..., N, N)
        if edge is not None:
            scores = scores + a[2 * f_out] * edge
        alpha = nc.softmax(nc.leaky_relu(scores, slope), axis=-1, mask=masks[k - 1])
        weights.append(alpha)
        hop = alpha @ P
        agg = hop if agg is None else agg + hop
    out = nc.relu(H @ store.tensor(f"{name}.Wroot") + agg * (1.0 / ops.K))
    return (out, weights) if return_weights else out


def init_pek_gcn(store: ParamStore, rng, name: str, K: int, n_in: int, n_hidden: int, n_out: int) -> None:
    for k in range(1, K + 1):
        store.add(f"{name}.hop{k}.W", glorot(rng, n_in, n_hidden))
    store.add(f"{name}.W", glorot(rng, K * n_hidden, n_out))
    store.add(f"{name}.B", np.zeros(n_out))


def pek_gcn_forward(H: Tensor, ops: KHopOperatorSet, store: ParamStore, name: str) -> Tensor:
    """``[ReLU(S_1 H W_1) || ... || ReLU(S_K H W_K)] W + B`` over the PMU nodes."""
    H = nc.as_tensor(H)
    branches = [nc.relu(Tensor(ops.S[k - 1]) @ H @ store.tensor(f"{name}.hop{k}.W"))
                for k in range(1, ops.K + 1)]
    Z = nc.concat(branches, axis=-1) if len(branches) > 1 else branches[0]
    return Z @ store.tensor(f"{name}.W") + store.tensor(f"{name}.B")


def regularized_nuclear_norm(A, eps: float = 1e-6):
    """``sum_i log(sigma_i(A) + eps)``; accepts arrays or tensors, batched over leading axes."""
    if isinstance(A, Tensor):
        return nc.log_nuclear_norm_t(A, eps)
    return np.log(nc.svd(A).S + eps).sum(axis=-1)


def nuclear_norm(A):
    if isinstance(A, Tensor):
        return nc.nuclear_norm_t(A)
    return nc.svd(A).S.sum(axis=-1)


# --------------------------------------------------------------------------
# the auxiliary model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LowRankConfig:
    attn_hidden: int = 64
    dropout: float = 0.1
    gcn_hidden: int = 2
    eps: float = 1e-6
    lam_fid: float = 100.0
    norm: str = "log"  # "log" (regularized) or "nuclear"
    lr: float = 0.005
    batch_size: int = 64
    epochs: int = 40
    warmup_epochs: int = 15  # fidelity-only epochs before the norm term is switched on
    slope: float = 0.2

    def __post_init__(self):
        if not 0 < self.eps <= 1e-2:
            raise ValueError("eps must lie in (0, 1e-2]")
        if self.norm not in ("log", "nuclear"):
            raise ValueError("norm must be 'log' or 'nuclear'")


@dataclass
class Normalizer:
    """Per-channel affine scaling estimated from observed entries only."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x_obs: np.ndarray, mask: np.ndarray) -> "Normalizer":
        m = mask[..., None].astype(bool)
        mean = np.array([x_obs[..., c][m[..., 0]].mean() for c in range(x_obs.shape[-1])])
        std = np.array([x_obs[..., c][m[..., 0]].std() for c in range(x_obs.shape[-1])])
        return cls(mean, np.maximum(std, 1e-6))

    def to_store(self, store: ParamStore) -> None:
        store.add("norm.mean", self.mean, trainable=False)
        store.add("norm.std", self.std, trainable=False)

    @classmethod
    def from_store(cls, store: ParamStore) -> "Normalizer":
        return cls(store["norm.mean"].copy(), store["norm.std"].copy())

    def forward(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean


def mean_fill(z: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Replace missing entries of (B, T, N, C) by the node's observed mean in the window.

    Nodes with no observation in the window take the window's observed mean;
    an entirely unobserved window falls back to 0 (the normalized global mean).
    """
    m = mask[..., None]
    cnt_node = m.sum(axis=1, keepdims=True)
    node_mean = (z * m).sum(axis=1, keepdims=True) / np.maximum(cnt_node, 1)
    cnt_win = m.sum(axis=(1, 2), keepdims=True)
    win_mean = (z * m).sum(axis=(1, 2), keepdims=True) / np.maximum(cnt_win, 1)
    fill = np.where(cnt_node > 0, node_mean, win_mean)
    return np.where(m > 0, z, fill)


@dataclass
class LowRankModel:
    store: ParamStore
    ops: KHopOperatorSet
    cfg: LowRankConfig
    history: list = field(default_factory=list)

    @property
    def normalizer(self) -> Normalizer:
        return Normalizer.from_store(self.store)


@dataclass
class LowRankOutput:
    L: np.ndarray  # (B, T, N, 2) physical units
    norm_term: float
    fid_term: float


def init_lowrank(ops: KHopOperatorSet, T: int, cfg: LowRankConfig, seed: int,
                 normalizer: Normalizer) -> LowRankModel:
    rng = np.random.default_rng([seed, 101])
    store = ParamStore()
    N = ops.n
    init_self_attention(store, rng, "sa", N, cfg.attn_hidden)
    init_khop_gat(store, rng, "gat", ops.K, T, T)
    init_pek_gcn(store, rng, "gcn1", ops.K, T, cfg.gcn_hidden, cfg.gcn_hidden)
    init_pek_gcn(store, rng, "gcn2", ops.K, cfg.gcn_hidden, cfg.gcn_hidden, cfg.gcn_hidden)
    add_linear(store, rng, "out", cfg.gcn_hidden, T)
    normalizer.to_store(store)
    return LowRankModel(store, ops, cfg)


def lowrank_graph(model: LowRankModel, x_obs: np.ndarray, mask: np.ndarray,
                  rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """Build the forward graph; returns (L normalized (B,2,T,N), norm term, fidelity term).

    Both loss terms are averages over the B*2 channel matrices.
    """
    cfg, store, ops = model.cfg, model.store, model.ops
    norm = model.normalizer
    z = norm.forward(x_obs)
    z_in = mean_fill(z, mask)
    B, T, N, C = z.shape
    X = Tensor(np.ascontiguousarray(np.moveaxis(z_in, 3, 1)).reshape(B * C, T, N))
    h = self_attention_forward(X, store, "sa", cfg.dropout, rng)
    h = nc.swapaxes(h, -1, -2)  # (B*C, N, T)
    h = khop_gat_forward(h, ops, store, "gat", slope=cfg.slope)
    h = pek_gcn_forward(h, ops, store, "gcn1")
    h = pek_gcn_forward(nc.relu(h), ops, store, "gcn2")
    h = linear(store, "out", nc.relu(h))  # (B*C, N, T)
    L = nc.swapaxes(h, -1, -2)  # (B*C, T, N)

    if cfg.norm == "log":
        nterm = regularized_nuclear_norm(L, cfg.eps).mean()
    else:
        nterm = nuclear_norm(L).mean()
    target = np.moveaxis(z, 3, 1).reshape(B * C, T, N)
    m = np.repeat(mask[:, None], C, axis=1).reshape(B * C, T, N)
    n_obs = np.maximum(m.sum(axis=(1, 2)), 1.0)
    sq = nc.square((L - target) * m)
    fid = (sq.sum(axis=(1, 2)) * (1.0 / n_obs)).mean()
    return L, nterm, fid


def lowrank_forward(model: LowRankModel, x_obs: np.ndarray, mask: np.ndarray,
                    rng: np.random.Generator | None = None, chunk: int = 64) -> LowRankOutput:
    """Inference: the low-rank estimate ``L`` in physical units, shape (B, T, N, 2).

    Without dropout, windows are processed ``chunk`` at a time; the loss terms
    are then the size-weighted means of the per-chunk values.
    """
    squeeze = x_obs.ndim == 3
    if squeeze:
        x_obs, mask = x_obs[None], mask[None]
    if rng is None and len(x_obs) > chunk:
        parts = [lowrank_forward(model, x_obs[i:i + chunk], mask[i:i + chunk], chunk=chunk)
                 for i in range(0, len(x_obs), chunk)]
        w = np.array([len(p.L) for p in parts], float) / len(x_obs)
        return LowRankOutput(np.concatenate([p.L for p in parts]), float(w @ [p.norm_term for p in parts]),
                             float(w @ [p.fid_term for p in parts]))
    L, nterm, fid = lowrank_graph(model, x_obs, mask, rng)
    model.store.discard_graph()
    B, T, N, C = x_obs.shape
    Ln = np.moveaxis(L.data.reshape(B, C, T, N), 1, 3)
    out = model.normalizer.inverse(Ln)
    if not np.all(np.isfinite(out)):
        raise nc.NumericError("low-rank model produced non-finite output")
    return LowRankOutput(out[0] if squeeze else out, float(nterm.data), float(fid.data))


def lowrank_loss(model: LowRankModel, x_obs, mask, rng=None,
                 norm_weight: float = 1.0) -> tuple[Tensor, float, float]:
    _, nterm, fid = lowrank_graph(model, x_obs, mask, rng)
    total = nterm * norm_weight + fid * model.cfg.lam_fid
    return total, float(nterm.data), float(fid.data)


def lowrank_step(model: LowRankModel, x_obs: np.ndarray, mask: np.ndarray,
                 rng: np.random.Generator | None,
                 norm_weight: float = 1.0) -> tuple[float, float, float]:
    """One Adam step on a batch; returns (norm term, fidelity term, total)."""
    model.store.zero_grad()
    total, nterm, fid = lowrank_loss(model, x_obs, mask, rng, norm_weight)
    if not np.isfinite(total.data):
        model.store.discard_graph()
        raise nc.NumericError(f"low-rank loss diverged (norm={nterm}, fidelity={fid})")
    total.backward()
    model.store.collect_grads()
    nc.adam_step(model.store, model.cfg.lr)
    if not model.store.all_finite():
        raise nc.NumericError("low-rank parameters became non-finite")
    return nterm, fid, float(total.data)


def stack_inputs(windows) -> tuple[np.ndarray, np.ndarray]:
    """(x_obs, mask) stacked over windows.  Never touches ground truth."""
    return (np.stack([w.x_obs for w in windows]), np.stack([w.mask for w in windows]))


def train_lowrank(windows, ops: KHopOperatorSet, cfg: LowRankConfig, seed: int,
                  max_steps: int | None = None) -> LowRankModel:
    """Unsupervised training on observed entries; deterministic in ``seed``."""
    x_obs, mask = stack_inputs(windows)
    model = init_lowrank(ops, x_obs.shape[1], cfg, seed, Normalizer.fit(x_obs, mask))
    rng = np.random.default_rng([seed, 202])
    n = len(windows)
    bs = min(cfg.batch_size, n)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = np.sort(order[start:start + bs])
            w = 0.0 if epoch < cfg.warmup_epochs else 1.0
            nterm, fid, total = lowrank_step(model, x_obs[idx], mask[idx], rng, w)
            model.history.append({"step": step, "norm": nterm, "fidelity": fid, "total": total})
            step += 1
            if max_steps is not None and step >= max_steps:
                return model
    return model


def history_csv(history: list[dict]) -> str:
    lines = ["step,norm,fidelity,total"]
    lines += [f"{h['step']},{h['norm']!r},{h['fidelity']!r},{h['total']!r}" for h in history]
    return "\n".join(lines) + "\n"


def config_dict(cfg: LowRankConfig) -> dict:
    return asdict(cfg)
