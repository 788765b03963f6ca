"""Experiment orchestration: composition, metrics, ablation variants and the classical baselines."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .datagen import PATTERN_NAMES, OBSERVED, MeasurementWindow, ModalConfig, expand_mask_to_buses, generate_windows
from .grid import GridGraph, build_khop_operators, impedance_edge_features
from .lowrank import LowRankConfig, LowRankModel, lowrank_forward, stack_inputs, train_lowrank
from .stnet import STNetConfig, STNetModel, stnet_forward, train_stnet

log = logging.getLogger(__name__)

VARIANTS = ("full", "v1", "v2")
BASELINES = ("svt", "linear_interp")
MSPE_GUARD = 1e-3


class PrerequisiteError(RuntimeError):
    """A required artifact (dataset, checkpoint, generation record) is missing or inconsistent."""


# --------------------------------------------------------------------------
# composition and metrics
# --------------------------------------------------------------------------


def compose_reconstruction(x_obs: np.ndarray, mask: np.ndarray, x_tilde: np.ndarray) -> np.ndarray:
    """Observed entries from ``x_obs``, the rest from ``x_tilde``.

    ``mask`` is (..., T, N) or the full shape of ``x_obs``.  Selection rather
    than arithmetic keeps observed values bit-exact even when ``x_tilde``
    holds non-finite numbers.
    """
    x_obs, x_tilde = np.asarray(x_obs), np.asarray(x_tilde)
    if x_obs.shape != x_tilde.shape:
        raise ValueError(f"shape mismatch: x_obs {x_obs.shape} vs x_tilde {x_tilde.shape}")
    m = np.asarray(mask)
    if m.shape != x_obs.shape:
        if m.shape != x_obs.shape[:-1]:
            raise ValueError(f"mask shape {m.shape} does not fit {x_obs.shape}")
        m = m[..., None]
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask must be binary")
    return np.where(m == 1, x_obs, x_tilde)


@dataclass
class ReconstructionReport:
    method: str
    seed: int
    rmse: float
    mspe: float
    n_missing: int
    n_mspe_excluded: int
    breakdown: dict = field(default_factory=dict)  # pattern -> {n, rmse, mspe}
    variant: str = ""
    empty: bool = False
    wall_time: float = 0.0

    def row(self) -> dict:
        """Flat record for CSV output; wall time is kept out so reports replay byte-identically."""
        out = {"method": self.method, "variant": self.variant, "seed": self.seed,
               "rmse": _fmt(self.rmse), "mspe": _fmt(self.mspe), "n_missing": self.n_missing,
               "n_mspe_excluded": self.n_mspe_excluded, "empty": int(self.empty)}
        for name in PATTERN_ORDER:
            b = self.breakdown.get(name, {"n": 0, "rmse": float("nan"), "mspe": float("nan")})
            out[f"{name}_n"] = b["n"]
            out[f"{name}_rmse"] = _fmt(b["rmse"])
            out[f"{name}_mspe"] = _fmt(b["mspe"])
        return out

    def to_dict(self, timing: bool = False) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("wall_time")
        return d


PATTERN_ORDER = tuple(PATTERN_NAMES[c] for c in sorted(PATTERN_NAMES) if c != OBSERVED)


def _fmt(v: float) -> str:
    return "nan" if not np.isfinite(v) else repr(float(v))


def _errors(xp, xt, sel):
    d = (xp - xt)[sel]
    x = xt[sel]
    ok = np.abs(x) > MSPE_GUARD
    rmse = float(np.sqrt(np.mean(d**2))) if d.size else float("nan")
    mspe = float(100.0 * np.mean((d[ok] / x[ok]) ** 2)) if ok.any() else float("nan")
    return rmse, mspe, int(d.size), int((~ok).sum())


def compute_metrics(x_prime: np.ndarray, x_true: np.ndarray, mask: np.ndarray, labels: np.ndarray,
                    method: str = "", seed: int = 0, variant: str = "") -> ReconstructionReport:
    """RMSE and MSPE over the missing entries (both channels), with a per-pattern breakdown.

    MSPE is ``100 * mean(((x' - x) / x)^2)`` over entries with ``|x| > 1e-3``;
    the remaining entries are counted in ``n_mspe_excluded``.
    """
    if x_prime.shape != x_true.shape:
        raise ValueError("x_prime and x_true shapes differ")
    miss = np.repeat((np.asarray(mask) == 0)[..., None], x_true.shape[-1], axis=-1)
    lab = np.repeat(np.asarray(labels)[..., None], x_true.shape[-1], axis=-1)
    if not miss.any():
        return ReconstructionReport(method, seed, float("nan"), float("nan"), 0, 0, {}, variant, empty=True)
    rmse, mspe, n, excl = _errors(x_prime, x_true, miss)
    breakdown = {}
    for code, name in PATTERN_NAMES.items():
        if code == OBSERVED:
            continue
        sel = miss & (lab == code)
        r, m, k, _ = _errors(x_prime, x_true, sel)
        breakdown[name] = {"n": k, "rmse": r, "mspe": m}
    unlabeled = n - sum(b["n"] for b in breakdown.values())
    if unlabeled:
        breakdown["unlabeled"] = {"n": unlabeled, "rmse": float("nan"), "mspe": float("nan")}
    return ReconstructionReport(method, seed, rmse, mspe, n, excl, breakdown, variant)


# --------------------------------------------------------------------------
# baselines
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SVTConfig:
    tau_frac: float = 0.1  # threshold as a fraction of the largest singular value of the zero-filled input
    max_iters: int = 500
    tol: float = 1e-6
    debias: bool = True
    als_iters: int = 200
    fit_tol: float = 1e-6


def _shrink(Z: np.ndarray, tau: np.ndarray):
    U, S, Vt = np.linalg.svd(Z, full_matrices=False)
    Sh = np.maximum(S - tau[..., None], 0.0)
    return (U * Sh[..., None, :]) @ Vt, S


def als_fit(X: np.ndarray, M: np.ndarray, U: np.ndarray, V: np.ndarray, iters: int) -> tuple:
    """Alternating least squares for ``X ~ U V^T`` on the observed entries, batched over axis 0."""
    r = U.shape[-1]
    scale = np.maximum((M * X**2).sum(axis=(1, 2)) / np.maximum(M.sum(axis=(1, 2)), 1), 1e-300)
    ridge = (1e-12 * scale)[:, None, None, None] * np.eye(r)
    MX = M * X
    for _ in range(iters):
        G = np.einsum("bnr,btn,bns->btrs", V, M, V) + ridge
        U = np.linalg.solve(G, np.einsum("bnr,btn->btr", V, MX)[..., None])[..., 0]
        G = np.einsum("btr,btn,bts->bnrs", U, M, U) + ridge
        V = np.linalg.solve(G, np.einsum("btr,btn->bnr", U, MX)[..., None])[..., 0]
    return U, V


def svt_complete(X: np.ndarray, M: np.ndarray, cfg: SVTConfig = SVTConfig()) -> tuple[np.ndarray, dict]:
    """Nuclear-norm completion of matrices (B, T, N) or (T, N).

    Stage one iterates ``Y = shrink_tau(Z)``, ``Z = M X + (1 - M) Y``.  The
    fixed point is biased toward zero by the threshold, so stage two refits
    the observed entries at the smallest rank that explains them exactly,
    searching up to the rank of the largest spectral gap.  Matrices with no
    exact low-rank fit (noisy data) keep the stage-one estimate, as do rows
    and columns with too few observations to pin the refit.  ``info["rank"]``
    is the refit rank, 0 where none was applied.
    """
    squeeze = X.ndim == 2
    X = np.asarray(X, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    if squeeze:
        X, M = X[None], M[None]
    B, T, N = X.shape
    Z = M * X
    tau = cfg.tau_frac * np.linalg.svd(Z, compute_uv=False)[:, 0]
    converged = np.zeros(B, dtype=bool)
    Y = Z
    it = 0
    for it in range(1, cfg.max_iters + 1):
        Y, _ = _shrink(Z, tau)
        Zn = M * X + (1 - M) * Y
        change = np.linalg.norm(Zn - Z, axis=(1, 2)) / np.maximum(np.linalg.norm(Z, axis=(1, 2)), 1e-300)
        Z = Zn
        converged = change < cfg.tol
        if converged.all():
            break
    info = {"iters": it, "converged": converged.copy(), "rank": np.zeros(B, dtype=int)}
    if not converged.all():
        log.warning("svt: %d of %d matrices did not converge in %d iterations",
                    int((~converged).sum()), B, cfg.max_iters)
    out = Y.copy()
    if cfg.debias:
        out, info["rank"] = _debias(X, M, Z, Y, tau, cfg)
    return (out[0] if squeeze else out), info


def _debias(X, M, Z, Y, tau, cfg: SVTConfig):
    B, T, N = X.shape
    U, S, Vt = np.linalg.svd(Z, full_matrices=False)
    kmax = min(T, N)
    support = np.clip((S > tau[:, None]).sum(axis=1), 1, kmax - 1)
    logS = np.log(np.maximum(S, 1e-300))
    gaps = logS[:, :-1] - logS[:, 1:]
    r_gap = np.array([int(np.argmax(gaps[b, :support[b]])) + 1 for b in range(B)])
    norm_obs = np.maximum(np.linalg.norm(M * X, axis=(1, 2)), 1e-300)
    chosen = np.zeros(B, dtype=int)
    fits = {}
    pending = np.ones(B, dtype=bool)
    for r in range(1, int(r_gap.max()) + 1):
        idx = np.flatnonzero(pending & (r_gap >= r))
        if idx.size == 0:
            break
        sq = np.sqrt(S[idx, :r])
        U0 = U[idx, :, :r] * sq[:, None, :]
        V0 = np.swapaxes(Vt[idx, :r, :], 1, 2) * sq[:, None, :]
        Uf, Vf = als_fit(X[idx], M[idx], U0, V0, cfg.als_iters)
        fit = Uf @ np.swapaxes(Vf, 1, 2)
        res = np.linalg.norm(M[idx] * (fit - X[idx]), axis=(1, 2)) / norm_obs[idx]
        for j, b in enumerate(idx):
            fits[(b, r)] = fit[j]
            if res[j] <= cfg.fit_tol:
                chosen[b] = r
                pending[b] = False
    out = Y.copy()
    for b in range(B):
        r = int(chosen[b])
        if r == 0:
            continue
        fit = fits[(b, r)]
        rows_ok = M[b].sum(axis=1) >= r
        cols_ok = M[b].sum(axis=0) >= r
        ok = rows_ok[:, None] & cols_ok[None, :]
        out[b] = np.where(ok, fit, Y[b])
    return out, chosen


def linear_interp(x_obs: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-node linear interpolation in time with nearest-value extrapolation.

    A node with no observation in the window takes the mean of the observed
    nodes at each step (or the window mean when a step has none).
    """
    x_obs = np.asarray(x_obs, dtype=np.float64)
    m = np.asarray(mask) == 1
    T, N, C = x_obs.shape
    t = np.arange(T)
    out = x_obs.copy()
    empty = []
    for i in range(N):
        ti = t[m[:, i]]
        if ti.size == 0:
            empty.append(i)
            continue
        for c in range(C):
            out[:, i, c] = np.interp(t, ti, x_obs[m[:, i], i, c])
    if empty:
        cnt = m.sum(axis=1)
        win = np.array([x_obs[..., c][m].mean() if m.any() else 0.0 for c in range(C)])
        step_mean = np.where(cnt[:, None] > 0,
                             (x_obs * m[..., None]).sum(axis=1) / np.maximum(cnt, 1)[:, None], win)
        for i in empty:
            out[:, i, :] = step_mean
    return out


def baseline_reconstruct(x_obs: np.ndarray, mask: np.ndarray, method: str,
                         cfg: SVTConfig = SVTConfig()) -> np.ndarray:
    """X_tilde for stacked windows (B, T, N, C) or a single window (T, N, C)."""
    squeeze = x_obs.ndim == 3
    if squeeze:
        x_obs, mask = x_obs[None], mask[None]
    if method == "svt":
        out = np.empty_like(x_obs, dtype=np.float64)
        for c in range(x_obs.shape[-1]):
            out[..., c], _ = svt_complete(x_obs[..., c], mask, cfg)
    elif method == "linear_interp":
        out = np.stack([linear_interp(x, m) for x, m in zip(x_obs, mask)])
    else:
        raise ValueError(f"unknown baseline {method!r}; expected one of {BASELINES}")
    return out[0] if squeeze else out


# --------------------------------------------------------------------------
# experiments
# --------------------------------------------------------------------------


@dataclass
class ExperimentData:
    """PMU-level train/test windows plus what is needed to rebuild all-bus windows."""

    g: GridGraph
    train: list
    test: list
    modal: ModalConfig | None = None
    n_windows: int | None = None
    data_seed: int | None = None


@dataclass
class TrainedModels:
    variant: str
    aux: LowRankModel | None
    stnet: STNetModel


@dataclass
class ExperimentResult:
    report: ReconstructionReport
    models: TrainedModels | None = None
    x_tilde: np.ndarray | None = None


def stack_truth(windows) -> np.ndarray:
    return np.stack([w.x_true for w in windows])


def stack_labels(windows) -> np.ndarray:
    return np.stack([w.labels for w in windows])


def full_bus_windows(data: ExperimentData, windows: list) -> list:
    """All-bus counterparts of PMU windows; non-PMU buses are always observed."""
    if data.modal is None or data.n_windows is None or data.data_seed is None:
        raise PrerequisiteError("variant v1 needs the generation record (modal config, n_windows, seed)")
    full = generate_windows(data.g, data.modal, data.n_windows, data.data_seed, all_buses=True)
    by_id = {w.window_id: w for w in full}
    try:
        matched = [by_id[w.window_id] for w in windows]
    except KeyError as exc:
        raise PrerequisiteError(f"window {exc} is not reproducible from the generation record") from exc
    pmu = list(data.g.pmu_nodes)
    for fw, pw in zip(matched, windows):
        if not np.array_equal(fw.x_true[:, pmu], pw.x_true):
            raise PrerequisiteError(f"regenerated window {pw.window_id} differs from the stored one")
    return expand_mask_to_buses(matched, windows, pmu)


def _prepare(data: ExperimentData, variant: str, K: int):
    if variant == "v1":
        g = data.g.with_full_observability()
        ops = build_khop_operators(g, 1)
        train, test = full_bus_windows(data, data.train), full_bus_windows(data, data.test)
        cols = list(data.g.pmu_nodes)
    else:
        g = data.g
        ops = build_khop_operators(g, K)
        train, test = data.train, data.test
        cols = None
    return g, ops, train, test, cols


def train_variant(data: ExperimentData, variant: str, aux_cfg: LowRankConfig, st_cfg: STNetConfig,
                  K: int, seed: int) -> TrainedModels:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    g, ops, train, _, _ = _prepare(data, variant, K)
    E = impedance_edge_features(g)
    x, m = stack_inputs(train)
    xt = stack_truth(train)
    aux = None
    prior = None
    if variant != "v2":
        aux = train_lowrank(train, ops, aux_cfg, seed)
        prior = lowrank_forward(aux, x, m).L
    st = train_stnet(x, m, xt, prior, ops, E, st_cfg, seed)
    return TrainedModels(variant, aux, st)


def predict(models: TrainedModels, x_obs: np.ndarray, mask: np.ndarray) -> np.ndarray:
    prior = None if models.aux is None else lowrank_forward(models.aux, x_obs, mask).L
    return stnet_forward(models.stnet, x_obs, mask, prior)


def evaluate_models(models: TrainedModels, data: ExperimentData, seed: int = 0,
                    split: str = "test") -> ExperimentResult:
    t0 = time.perf_counter()
    _, _, train, test, cols = _prepare(data, models.variant, models.stnet.ops.K)
    windows = test if split == "test" else train
    x, m = stack_inputs(windows)
    xt_ = predict(models, x, m)
    if cols is not None:
        x, m, xt_ = x[:, :, cols], m[:, :, cols], xt_[:, :, cols]
        truth = stack_truth(windows)[:, :, cols]
        labels = stack_labels(windows)[:, :, cols]
    else:
        truth, labels = stack_truth(windows), stack_labels(windows)
    xp = compose_reconstruction(x, m, xt_)
    rep = compute_metrics(xp, truth, m, labels, method="stnet", seed=seed, variant=models.variant)
    rep.wall_time = time.perf_counter() - t0
    return ExperimentResult(rep, models, xt_)


def run_experiment(data: ExperimentData, variant: str, aux_cfg: LowRankConfig = LowRankConfig(),
                   st_cfg: STNetConfig = STNetConfig(), K: int = 3, seed: int = 0) -> ExperimentResult:
    """Train and evaluate one variant: ``full``, ``v1`` (1-hop GNN on all buses) or ``v2`` (no prior)."""
    t0 = time.perf_counter()
    models = train_variant(data, variant, aux_cfg, st_cfg, K, seed)
    res = evaluate_models(models, data, seed)
    res.report.wall_time = time.perf_counter() - t0
    return res


def run_baseline(data: ExperimentData, method: str, cfg: SVTConfig = SVTConfig(), seed: int = 0) -> ExperimentResult:
    t0 = time.perf_counter()
    x, m = stack_inputs(data.test)
    xt_ = baseline_reconstruct(x, m, method, cfg)
    xp = compose_reconstruction(x, m, xt_)
    rep = compute_metrics(xp, stack_truth(data.test), m, stack_labels(data.test), method=method, seed=seed,
                          variant="baseline")
    rep.wall_time = time.perf_counter() - t0
    return ExperimentResult(rep, None, xt_)


# --------------------------------------------------------------------------
# report files
# --------------------------------------------------------------------------


def reports_csv(reports: list[ReconstructionReport], extra: dict | None = None) -> str:
    rows = [dict(extra or {}, **r.row()) for r in reports]
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def reports_json(reports: list[ReconstructionReport]) -> str:
    def clean(v):
        if isinstance(v, float) and not np.isfinite(v):
            return None
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        return v
    return json.dumps([clean(r.to_dict()) for r in reports], indent=2, sort_keys=True) + "\n"


def model_checksum(models: TrainedModels) -> str:
    """Short digest of all parameters, for manifests."""
    h = hashlib.sha256()
    for store in ([models.aux.store] if models.aux else []) + [models.stnet.store]:
        h.update(json.dumps(store.to_json(), sort_keys=True).encode())
    return h.hexdigest()[:16]

