"""Streaming deployment: self-supervised updates of the auxiliary model, an EWMA drift
monitor on the reconstruction network, and pseudo-label fine-tuning once drift is confirmed.

Adaptation code paths receive only ``(x_obs, mask)`` arrays.  Ground truth is
read exclusively by :func:`stage_metrics`, which runs under the ``"metrics"``
phase so that tests can audit every access.
"""
from __future__ import annotations

import contextlib
import contextvars
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import numcore as nc
from .datagen import ModalConfig, default_schedule, generate_windows, inject_missing
from .grid import GridGraph
from .lowrank import LowRankModel, lowrank_forward, lowrank_step, stack_inputs
from .numcore import Tensor
from .pipeline import (ReconstructionReport, TrainedModels, compose_reconstruction, compute_metrics,
                       reports_csv)
from .stnet import STNetModel, stnet_forward, stnet_graph

log = logging.getLogger(__name__)

STAGES = ("initial", "self_supervised", "pseudo_label")

_phase: contextvars.ContextVar[str] = contextvars.ContextVar("pmurecon_online_phase", default="adapt")


def current_phase() -> str:
    """``"metrics"`` while ground truth may legitimately be read, ``"adapt"`` otherwise."""
    return _phase.get()


@contextlib.contextmanager
def _metrics_phase():
    token = _phase.set("metrics")
    try:
        yield
    finally:
        _phase.reset(token)


@dataclass(frozen=True)
class StreamConfig:
    adapt_steps: int = 800
    eval_steps: int = 200
    drift_delay: int = 0  # stream steps generated before the drift sets in
    ewma_alpha: float = 0.1
    drift_threshold: float | None = None  # absolute; None -> threshold_factor * offline observed MSE
    threshold_factor: float = 4.0
    patience: int = 3
    pseudo_label_lr: float = 0.005
    pseudo_hide_rate: float = 0.3  # observed entries hidden from ST-Net during fine-tuning
    aux_lr: float | None = 0.02  # None -> the offline aux learning rate
    batch_windows: int = 1
    # drift applied to the generator
    mode_offset: int = 5
    freq_shift: float = 0.5
    level_shift: float = 0.0
    angle_factor: float = 2.0  # scales the angle spread (heavier loading)

    def __post_init__(self):
        for name in ("adapt_steps", "eval_steps", "patience", "batch_windows"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.drift_delay < 0:
            raise ValueError("drift_delay must be >= 0")
        if not 0.0 < self.ewma_alpha < 1.0:
            raise ValueError("ewma_alpha must lie in (0, 1)")
        if self.drift_threshold is not None and self.drift_threshold <= 0:
            raise ValueError("drift_threshold must be > 0")
        if not 0.0 <= self.pseudo_hide_rate < 1.0:
            raise ValueError("pseudo_hide_rate must lie in [0, 1)")
        if self.angle_factor <= 0:
            raise ValueError("angle_factor must be > 0")
        if self.threshold_factor <= 0 or self.pseudo_label_lr <= 0:
            raise ValueError("threshold_factor and pseudo_label_lr must be > 0")

    def drifted(self, modal: ModalConfig) -> ModalConfig:
        return replace(modal, mode_offset=modal.mode_offset + self.mode_offset,
                       freq_shift=modal.freq_shift + self.freq_shift,
                       level_shift=modal.level_shift + self.level_shift,
                       angle_scale=modal.angle_scale * self.angle_factor)


@dataclass(frozen=True)
class DriftMonitorState:
    ewma: float = 0.0
    consecutive: int = 0
    triggered: bool = False
    stage: str = "initial"
    n_batches: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.ewma < 0:
            raise ValueError("ewma must be >= 0")


def advance_stage(state: DriftMonitorState, stage: str) -> DriftMonitorState:
    """Move forward to ``stage``; requests to move backward are ignored."""
    if STAGES.index(stage) <= STAGES.index(state.stage):
        return state
    return replace(state, stage=stage)


def observed_mse(x_hat: np.ndarray, x_obs: np.ndarray, mask: np.ndarray) -> float:
    m = np.repeat(np.asarray(mask)[..., None], x_obs.shape[-1], axis=-1) == 1
    if not m.any():
        return 0.0
    return float(np.mean((x_hat - x_obs)[m] ** 2))


def drift_monitor(state: DriftMonitorState, x_hat: np.ndarray, x_obs: np.ndarray, mask: np.ndarray,
                  alpha: float, threshold: float, patience: int = 3) -> DriftMonitorState:
    """EWMA update on the observed-entry MSE of the reconstruction; latches after
    ``patience`` consecutive batches above ``threshold``."""
    err = observed_mse(x_hat, x_obs, mask)
    ewma = alpha * err + (1.0 - alpha) * state.ewma
    consecutive = state.consecutive + 1 if ewma > threshold else 0
    triggered = state.triggered or consecutive >= patience
    new = replace(state, ewma=ewma, consecutive=consecutive, triggered=triggered, n_batches=state.n_batches + 1)
    return advance_stage(new, "pseudo_label") if triggered else new


def self_supervised_update(aux: LowRankModel, x_obs: np.ndarray, mask: np.ndarray,
                           lr: float | None = None) -> bool:
    """One unsupervised step on a streaming batch; returns False (and leaves ``aux``
    untouched) when the step diverges."""
    backup = aux.store.copy()
    cfg = aux.cfg
    try:
        if lr is not None and lr != cfg.lr:
            aux.cfg = replace(cfg, lr=lr)
        lowrank_step(aux, x_obs, mask, None)
    except nc.NumericError as exc:
        log.warning("self-supervised update skipped: %s", exc)
        aux.store = backup
        return False
    finally:
        aux.cfg = cfg
    return True


def pseudo_targets(x_obs: np.ndarray, mask: np.ndarray, L: np.ndarray) -> np.ndarray:
    return compose_reconstruction(x_obs, mask, L)


def pseudo_label_loss(stnet: STNetModel, x_obs, mask, prior, target) -> Tensor:
    y = stnet_graph(stnet, x_obs, mask, prior, train=False)
    return nc.square(y - stnet.normalizer.forward(target)).mean()


def pseudo_label_finetune(stnet: STNetModel, aux: LowRankModel, x_obs: np.ndarray, mask: np.ndarray,
                          lr: float, hide_rate: float = 0.0, rng: np.random.Generator | None = None) -> bool:
    """One Adam step pulling the reconstruction toward observed values and the aux output.

    Targets are built from the full batch.  With ``hide_rate`` > 0 that share
    of the observed entries is also hidden from ST-Net's input (and from the
    prior it receives), so the observed part of the target supervises real
    reconstructions rather than passthrough.  Batch-norm statistics stay
    frozen.  Returns False when the step diverges, leaving ``stnet`` unchanged.
    """
    L = lowrank_forward(aux, x_obs, mask).L
    target = pseudo_targets(x_obs, mask, L)
    m_in, prior = mask, L
    if hide_rate > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        m_in = mask * (rng.random(mask.shape) >= hide_rate)
        prior = lowrank_forward(aux, x_obs, m_in).L
    backup = stnet.store.copy()
    try:
        stnet.store.zero_grad()
        loss = pseudo_label_loss(stnet, x_obs, m_in, prior, target)
        if not np.isfinite(loss.data):
            stnet.store.discard_graph()
            raise nc.NumericError("pseudo-label loss is not finite")
        loss.backward()
        stnet.store.collect_grads()
        nc.adam_step(stnet.store, lr)
        if not stnet.store.all_finite():
            raise nc.NumericError("parameters became non-finite")
    except nc.NumericError as exc:
        log.warning("pseudo-label step skipped: %s", exc)
        stnet.store = backup
        return False
    return True


# --------------------------------------------------------------------------
# stream and staged evaluation
# --------------------------------------------------------------------------


@dataclass
class Stream:
    adapt: list
    eval: list


def make_stream(g: GridGraph, modal: ModalConfig, cfg: StreamConfig, seed: int, drift: bool = True,
                random_rate: float = 0.3, target_rate: float = 0.6, pool_seed: int | None = None) -> Stream:
    """Adaptation and held-out evaluation windows with a monotone step index.

    ``pool_seed`` should be the data seed, so the stream's outages hit the same
    node pool as the training data and only the modal drift differs.
    """
    T = modal.window_len
    n_adapt = max(1, cfg.adapt_steps // T)
    n_eval = max(1, cfg.eval_steps // T)
    n = n_adapt + n_eval
    target = cfg.drifted(modal) if drift else modal
    base = generate_windows(g, modal, n, seed)
    shifted = generate_windows(g, target, n, seed + 1)
    n_pre = min(n, cfg.drift_delay // T)
    windows = base[:n_pre] + shifted[n_pre:]
    windows = [replace(w, window_id=i, step=i * T) for i, w in enumerate(windows)]
    schedule = default_schedule(n, g.n_pmu, T, seed, random_rate=random_rate, target_rate=target_rate,
                                pool_seed=pool_seed)
    windows = inject_missing(windows, schedule)
    return Stream(windows[:n_adapt], windows[n_adapt:])


def stage_metrics(stage: str, aux: LowRankModel, stnet: STNetModel, windows: list, seed: int) -> ReconstructionReport:
    x, m = stack_inputs(windows)
    L = lowrank_forward(aux, x, m).L
    xp = compose_reconstruction(x, m, stnet_forward(stnet, x, m, L))
    with _metrics_phase():
        truth = np.stack([w.x_true for w in windows])
        labels = np.stack([w.labels for w in windows])
        return compute_metrics(xp, truth, m, labels, method=stage, seed=seed, variant="online")


@dataclass
class OnlineResult:
    reports: dict  # stage -> ReconstructionReport
    trigger_batch: int | None
    history: list = field(default_factory=list)
    threshold: float = 0.0
    aux: LowRankModel | None = None
    stnet: STNetModel | None = None

    @property
    def pseudo_label_reached(self) -> bool:
        return self.trigger_batch is not None

    def staged_csv(self) -> str:
        rows = [self.reports[s] for s in STAGES if s in self.reports]
        text = reports_csv(rows, extra=None)
        lines = text.splitlines()
        if not lines:
            return ""
        out = ["stage,reached," + lines[0]]
        for s, line in zip([s for s in STAGES if s in self.reports], lines[1:]):
            reached = int(s != "pseudo_label" or self.pseudo_label_reached)
            out.append(f"{s},{reached},{line}")
        return "\n".join(out) + "\n"

    def history_csv(self) -> str:
        keys = ["batch", "step", "stage", "obs_mse", "ewma", "triggered", "aux_ok", "finetune_ok"]
        lines = [",".join(keys)]
        for h in self.history:
            lines.append(",".join(str(h[k]) if not isinstance(h[k], float) else repr(h[k]) for k in keys))
        return "\n".join(lines) + "\n"


def offline_observed_mse(models: TrainedModels, x_obs: np.ndarray, mask: np.ndarray) -> float:
    L = None if models.aux is None else lowrank_forward(models.aux, x_obs, mask).L
    return observed_mse(stnet_forward(models.stnet, x_obs, mask, L), x_obs, mask)


def run_online(models: TrainedModels, stream: Stream, cfg: StreamConfig, seed: int = 0,
               offline_obs_mse: float | None = None) -> OnlineResult:
    """Sequential pass over the adaptation windows, then staged evaluation on the held-out ones.

    Each batch: monitor drift on the deployed output, update the aux model
    without supervision, and once drift is confirmed fine-tune a copy of the
    reconstruction network on pseudo-labels.
    """
    if models.aux is None:
        raise ValueError("online adaptation needs an auxiliary model")
    aux0, st0 = models.aux, models.stnet
    aux = LowRankModel(aux0.store.copy(), aux0.ops, aux0.cfg)
    st_ft = STNetModel(st0.store.copy(), st0.ops, st0.edge, st0.cfg)
    # adaptation is a new optimization phase: start Adam afresh whatever the checkpoint carried
    aux.store.reset_optimizer()
    st_ft.store.reset_optimizer()

    xs, ms = stack_inputs(stream.adapt)
    if cfg.drift_threshold is not None:
        threshold = cfg.drift_threshold
    else:
        base = offline_obs_mse if offline_obs_mse is not None else offline_observed_mse(models, xs[:1], ms[:1])
        threshold = cfg.threshold_factor * max(base, 1e-12)

    state = DriftMonitorState()
    history = []
    trigger_batch = None
    bw = cfg.batch_windows
    for b, start in enumerate(range(0, len(stream.adapt), bw)):
        x, m = xs[start:start + bw], ms[start:start + bw]
        L = lowrank_forward(aux, x, m).L
        x_hat = stnet_forward(st_ft, x, m, L)
        state = drift_monitor(state, x_hat, x, m, cfg.ewma_alpha, threshold, cfg.patience)
        if state.triggered and trigger_batch is None:
            trigger_batch = b
        aux_ok = self_supervised_update(aux, x, m, cfg.aux_lr)
        state = advance_stage(state, "self_supervised")
        ft_ok = None
        if state.triggered:
            ft_ok = pseudo_label_finetune(st_ft, aux, x, m, cfg.pseudo_label_lr, cfg.pseudo_hide_rate,
                                          np.random.default_rng([seed, 303, b]))
        history.append({"batch": b, "step": int(stream.adapt[start].step), "stage": state.stage,
                        "obs_mse": observed_mse(x_hat, x, m), "ewma": state.ewma,
                        "triggered": int(state.triggered), "aux_ok": int(aux_ok),
                        "finetune_ok": "" if ft_ok is None else int(ft_ok)})

    reports = {
        "initial": stage_metrics("initial", aux0, st0, stream.eval, seed),
        "self_supervised": stage_metrics("self_supervised", aux, st0, stream.eval, seed),
    }
    if trigger_batch is not None:
        reports["pseudo_label"] = stage_metrics("pseudo_label", aux, st_ft, stream.eval, seed)
    else:
        log.warning("drift trigger never fired; pseudo-label stage not reached")
        reports["pseudo_label"] = ReconstructionReport("pseudo_label", seed, float("nan"), float("nan"), 0, 0,
                                                       {}, "online", empty=True)
    return OnlineResult(reports, trigger_batch, history, threshold, aux, st_ft)


def stream_config_dict(cfg: StreamConfig) -> dict:
    return asdict(cfg)
