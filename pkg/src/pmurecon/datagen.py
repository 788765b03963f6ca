"""Synthetic PMU windows with controllable rank, missing-data injection and dataset storage.

Signals are damped oscillations whose spatial shapes are Laplacian
eigenvectors of the grid, so every noise-free T x N channel matrix has rank
at most ``n_modes + 1``.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .grid import GridGraph

log = logging.getLogger(__name__)

# pattern label codes stored per cell
OBSERVED = 0
RANDOM = 1
SINGLE_NODE = 2
MULTI_NODE = 3
BLOCK_WISE = 4
PATTERN_NAMES = {
    RANDOM: "random",
    SINGLE_NODE: "single_node_consecutive",
    MULTI_NODE: "multi_node_single_time",
    BLOCK_WISE: "block_wise",
}
PATTERN_CODES = {v: k for k, v in PATTERN_NAMES.items()}

RATE_TOLERANCE = 0.02
MIN_WINDOWS_FOR_RATE_CHECK = 100


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class ModalConfig:
    n_modes: int = 3
    freq_range: tuple = (0.3, 2.5)
    damping_range: tuple = (0.05, 0.6)
    amp_scale: float = 0.05
    angle_scale: float = 0.25
    noise_sigma: float = 5e-4
    sample_rate: float = 50.0
    window_len: int = 8
    # drift knobs: shift which Laplacian eigenvectors shape the oscillations and the
    # static angle profile, the modal frequencies, and the voltage level
    mode_offset: int = 0
    freq_shift: float = 0.0
    level_shift: float = 0.0

    def __post_init__(self):
        if self.n_modes < 1:
            raise ValueError("n_modes must be >= 1")
        lo, hi = self.freq_range
        nyq = self.sample_rate / 2
        if not (0 < lo <= hi < nyq) or not (0 < hi + self.freq_shift < nyq) or lo + self.freq_shift <= 0:
            raise ValueError(f"freq_range {self.freq_range} (+{self.freq_shift}) must lie in (0, {nyq})")
        if self.damping_range[0] < 0 or self.damping_range[1] < self.damping_range[0]:
            raise ValueError("damping_range must be a non-negative interval")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.window_len < 2:
            raise ValueError("window_len must be >= 2")


@dataclass
class MeasurementWindow:
    window_id: int
    x_true: np.ndarray  # (T, N, 2): magnitude p.u., angle rad
    x_obs: np.ndarray
    mask: np.ndarray  # (T, N) in {0, 1}
    labels: np.ndarray  # (T, N) pattern codes
    step: int = 0  # stream index of the first row

    @property
    def shape(self) -> tuple:
        return self.x_true.shape


def mode_shapes(g: GridGraph, n_modes: int, offset: int = 0) -> np.ndarray:
    """Laplacian eigenvectors 1+offset .. n_modes+offset (all buses x n_modes)."""
    L = np.zeros((g.n_bus, g.n_bus))
    for i, j, _, _ in g.edges:
        L[i, j] -= 1.0
        L[j, i] -= 1.0
        L[i, i] += 1.0
        L[j, j] += 1.0
    _, vecs = np.linalg.eigh(L)
    if n_modes + offset + 1 > g.n_bus:
        raise ValueError("not enough buses for the requested modes")
    shapes = vecs[:, 1 + offset:1 + offset + n_modes]
    # deterministic sign: largest entry positive
    idx = np.argmax(np.abs(shapes), axis=0)
    return shapes * np.sign(shapes[idx, np.arange(shapes.shape[1])])


def generate_windows(g: GridGraph, cfg: ModalConfig, n_windows: int, seed: int,
                     all_buses: bool = False) -> list[MeasurementWindow]:
    """Fully observed windows; deterministic in ``seed``.

    With ``all_buses`` the windows cover every bus; the PMU columns are then
    identical to those produced with ``all_buses=False`` for the same seed.
    """
    if n_windows < 1:
        raise ValueError("n_windows must be >= 1")
    rng = np.random.default_rng(seed)
    T, M = cfg.window_len, cfg.n_modes
    shapes = mode_shapes(g, M, cfg.mode_offset)
    fiedler = mode_shapes(g, 1, cfg.mode_offset)[:, 0]
    scale = np.sqrt(g.n_bus)  # eigenvectors have unit norm; rescale to O(1) entries
    t = np.arange(T) / cfg.sample_rate
    cols = np.arange(g.n_bus) if all_buses else np.asarray(g.pmu_nodes)
    out = []
    for w in range(n_windows):
        f = rng.uniform(*cfg.freq_range, size=M) + cfg.freq_shift
        zeta = rng.uniform(*cfg.damping_range, size=M)
        phase = rng.uniform(0, 2 * np.pi, size=(2, M))
        amp = cfg.amp_scale * rng.uniform(0.5, 1.5, size=(2, M)) * rng.choice([-1.0, 1.0], size=(2, M))
        amp[1] *= cfg.angle_scale / cfg.amp_scale
        level = rng.uniform(0.97, 1.03) + cfg.level_shift
        tilt = cfg.angle_scale * rng.uniform(-1.0, 1.0)
        noise = rng.normal(0.0, 1.0, size=(T, g.n_bus, 2)) * cfg.noise_sigma

        decay = np.exp(-zeta[None, :] * t[:, None])
        wave = np.stack([decay * np.cos(2 * np.pi * f[None, :] * t[:, None] + phase[c][None, :])
                         for c in range(2)])  # (2, T, M)
        x = np.empty((T, g.n_bus, 2))
        x[:, :, 0] = level + (wave[0] * amp[0]) @ (shapes.T * scale / M)
        x[:, :, 1] = tilt * fiedler[None, :] * scale / 2 + (wave[1] * amp[1]) @ (shapes.T * scale / M)
        x += noise
        x = x[:, cols, :]
        if x[:, :, 0].min() < 0.85 or x[:, :, 0].max() > 1.15 or np.abs(x[:, :, 1]).max() >= np.pi:
            raise ValueError("generated window leaves the physical range; reduce amp_scale/angle_scale")
        ones = np.ones((T, len(cols)))
        out.append(MeasurementWindow(window_id=w, x_true=x, x_obs=x.copy(), mask=ones,
                                     labels=np.zeros((T, len(cols)), dtype=np.int64), step=w * T))
    return out


# --------------------------------------------------------------------------
# missing data
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MissingEvent:
    pattern: str
    nodes: tuple
    t_span: tuple  # [start, stop) in stream steps


@dataclass(frozen=True)
class MissingSchedule:
    random_rate: float = 0.0
    events: tuple = ()
    seed: int = 0
    target_rate: float | None = None

    def to_json(self) -> dict:
        d = asdict(self)
        d["events"] = [asdict(e) for e in self.events]
        return d


def default_schedule(n_windows: int, n_pmu: int, window_len: int, seed: int,
                     random_rate: float = 0.30, target_rate: float = 0.60,
                     event_len: int = 30, pool_seed: int | None = None) -> MissingSchedule:
    """Random drops plus structured outage events sized to reach ``target_rate``.

    Events are confined to a fixed pool of just over half of the PMU nodes
    and cycle through the block-wise, single-node and multi-node patterns.
    Events are added until the event-only coverage reaches the fraction
    needed so that random drops on top give ``target_rate`` overall.
    ``pool_seed`` (default ``seed``) picks the pool, so a later stream can keep
    the outage-prone nodes of the training data while drawing fresh events.
    """
    if not 0 <= random_rate < 1 or not random_rate <= target_rate < 1:
        raise ScheduleError("need 0 <= random_rate <= target_rate < 1")
    rng = np.random.default_rng([seed, 7])
    n_steps = n_windows * window_len
    need = 1.0 - (1.0 - target_rate) / (1.0 - random_rate)
    pool = np.sort(rng.choice(n_pmu, size=n_pmu // 2 + 1, replace=False))
    if pool_seed is not None:
        pool = np.sort(np.random.default_rng([pool_seed, 7]).choice(n_pmu, size=n_pmu // 2 + 1, replace=False))
    cycle = ["block_wise", "single_node_consecutive", "block_wise",
             "multi_node_single_time", "block_wise", "block_wise"]
    covered = np.zeros((n_steps, n_pmu), dtype=bool)
    total = n_steps * n_pmu
    events = []
    k = 0
    while need > 0 and covered.sum() / total < need and k < 100000:
        pattern = cycle[k % len(cycle)]
        k += 1
        if pattern == "single_node_consecutive":
            nodes = (int(rng.choice(pool)),)
            length = event_len
        elif pattern == "multi_node_single_time":
            nodes = tuple(int(p) for p in pool)
            length = 1
        else:
            nodes = tuple(int(p) for p in pool)
            length = event_len
        start = int(rng.integers(0, max(1, n_steps - length + 1)))
        stop = min(n_steps, start + length)
        trial = covered.copy()
        trial[start:stop, list(nodes)] = True
        # stop once adding the event would overshoot more than it helps
        if trial.sum() / total - need > need - covered.sum() / total:
            break
        covered = trial
        events.append(MissingEvent(pattern, nodes, (start, stop)))
    return MissingSchedule(random_rate=random_rate, events=tuple(events), seed=seed, target_rate=target_rate)


def inject_missing(windows: list[MeasurementWindow], schedule: MissingSchedule) -> list[MeasurementWindow]:
    """Apply random drops and events; returns new windows with mask, x_obs and labels set.

    Windows are laid end to end along the stream in list order.  Overlapping
    events combine by union; a cell keeps the label of the last event that
    covered it.
    """
    if not windows:
        return []
    T, N = windows[0].mask.shape
    n_steps = len(windows) * T
    labels = np.zeros((n_steps, N), dtype=np.int64)
    rng = np.random.default_rng([schedule.seed, 11])
    if schedule.random_rate > 0:
        labels[rng.random((n_steps, N)) < schedule.random_rate] = RANDOM
    for ev in schedule.events:
        if ev.pattern not in PATTERN_CODES:
            raise ScheduleError(f"unknown missing pattern {ev.pattern!r}")
        if any(not 0 <= n < N for n in ev.nodes):
            raise ScheduleError(f"event nodes {ev.nodes} outside 0..{N - 1}")
        start, stop = ev.t_span
        if not 0 <= start < stop <= n_steps:
            raise ScheduleError(f"event span {ev.t_span} outside stream of {n_steps} steps")
        labels[start:stop, list(ev.nodes)] = PATTERN_CODES[ev.pattern]

    rate = float((labels != OBSERVED).mean())
    if schedule.target_rate is not None:
        if len(windows) >= MIN_WINDOWS_FOR_RATE_CHECK and abs(rate - schedule.target_rate) > RATE_TOLERANCE:
            raise ScheduleError(f"realized missing rate {rate:.4f} misses target "
                                f"{schedule.target_rate:.2f} by more than {RATE_TOLERANCE:.2f}")
    out = []
    for k, w in enumerate(windows):
        lab = labels[k * T:(k + 1) * T]
        mask = (lab == OBSERVED).astype(np.float64)
        out.append(replace(w, mask=mask, x_obs=w.x_true * mask[:, :, None], labels=lab.copy(),
                           step=k * T))
    return out


def missing_rate(windows: list[MeasurementWindow]) -> float:
    return float(np.mean([1.0 - w.mask.mean() for w in windows])) if windows else 0.0


def expand_mask_to_buses(full_windows: list[MeasurementWindow], pmu_windows: list[MeasurementWindow],
                         pmu_nodes) -> list[MeasurementWindow]:
    """All-bus windows whose PMU columns carry the PMU windows' masks; other buses stay observed."""
    pmu = list(pmu_nodes)
    out = []
    for fw, pw in zip(full_windows, pmu_windows):
        mask = np.ones(fw.mask.shape)
        labels = np.zeros(fw.labels.shape, dtype=np.int64)
        mask[:, pmu] = pw.mask
        labels[:, pmu] = pw.labels
        out.append(replace(fw, mask=mask, labels=labels, x_obs=fw.x_true * mask[:, :, None], step=pw.step))
    return out


# --------------------------------------------------------------------------
# storage
# --------------------------------------------------------------------------

SPLITS = ("train", "test", "val")


def _split_key(window_id: int) -> str:
    return hashlib.sha256(f"window-{window_id}".encode()).hexdigest()


def split_windows(windows: list[MeasurementWindow], ratios=(0.7, 0.2, 0.1)) -> dict[str, list]:
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(windows)
    n_train = int(round(ratios[0] * n))
    n_test = min(n - n_train, int(round(ratios[1] * n)))
    ranked = sorted(windows, key=lambda w: _split_key(w.window_id))
    parts = {
        "train": ranked[:n_train],
        "test": ranked[n_train:n_train + n_test],
        "val": ranked[n_train + n_test:],
    }
    if not parts["train"]:
        raise ValueError("train split is empty")
    for name in SPLITS:
        parts[name].sort(key=lambda w: w.window_id)
        if not parts[name]:
            log.warning("split %r is empty", name)
    return parts


def window_to_json(w: MeasurementWindow) -> dict:
    return {
        "id": int(w.window_id),
        "step": int(w.step),
        "x_true": w.x_true.tolist(),
        "x_obs": w.x_obs.tolist(),
        "mask": w.mask.astype(int).tolist(),
        "pattern_labels": w.labels.tolist(),
    }


def window_from_json(obj: dict) -> MeasurementWindow:
    return MeasurementWindow(
        window_id=int(obj["id"]),
        x_true=np.array(obj["x_true"], dtype=np.float64),
        x_obs=np.array(obj["x_obs"], dtype=np.float64),
        mask=np.array(obj["mask"], dtype=np.float64),
        labels=np.array(obj["pattern_labels"], dtype=np.int64),
        step=int(obj.get("step", 0)),
    )


def write_jsonl(windows, path) -> None:
    with open(path, "w") as fh:
        for w in windows:
            fh.write(json.dumps(window_to_json(w)) + "\n")


def read_jsonl(path) -> list[MeasurementWindow]:
    with open(path) as fh:
        return [window_from_json(json.loads(line)) for line in fh if line.strip()]


def split_and_store(windows: list[MeasurementWindow], ratios=(0.7, 0.2, 0.1), directory=".",
                    extra: dict | None = None) -> dict:
    """Split deterministically by window id hash and write one JSON-lines file per split."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {directory}: {exc}") from exc
    parts = split_windows(windows, ratios)
    manifest = {
        "ratios": list(ratios),
        "counts": {k: len(v) for k, v in parts.items()},
        "missing_rates": {k: missing_rate(v) for k, v in parts.items()},
        "files": {k: f"{k}.jsonl" for k in SPLITS},
    }
    if extra:
        manifest.update(extra)
    for name, part in parts.items():
        write_jsonl(part, directory / f"{name}.jsonl")
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_dataset(directory) -> dict[str, list[MeasurementWindow]]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    return {name: read_jsonl(directory / fname) for name, fname in manifest["files"].items()}
