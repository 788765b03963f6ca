from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pmurecon.cli import dispatch
from pmurecon.datagen import ModalConfig, default_schedule, generate_windows, inject_missing
from pmurecon.grid import build_khop_operators, load_bundled

settings.register_profile("pmurecon", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("pmurecon")

PIPELINE = ("gen-data", "train-aux", "train-stnet", "evaluate", "ablate", "online")


@pytest.fixture(scope="session")
def case39():
    return load_bundled("case39")


@pytest.fixture(scope="session")
def toy6():
    return load_bundled("toy6")


@pytest.fixture(scope="session")
def fig3():
    return load_bundled("fig3")


@pytest.fixture(scope="session")
def ops39(case39):
    return build_khop_operators(case39, 3)


@pytest.fixture(scope="session")
def small_windows(case39):
    """120 windows with the default 60% structured missing schedule."""
    w = generate_windows(case39, ModalConfig(), 120, 3)
    return inject_missing(w, default_schedule(120, case39.n_pmu, 8, 3))


def small_config(root: Path, n_windows: int = 150, **sections) -> Path:
    """A config with tiny training budgets, written under ``root``."""
    cfg = {
        "paths": {"dataset": str(root / "data"), "checkpoints": str(root / "ckpt"),
                  "reports": str(root / "rep")},
        "data": {"n_windows": n_windows},
        "aux": {"epochs": 3, "warmup_epochs": 1},
        "stnet": {"epochs": 2, "batch_size": 50},
        "online": {"adapt_steps": 80, "eval_steps": 40},
    }
    for k, v in sections.items():
        cfg.setdefault(k, {}).update(v)
    path = root / "cfg.json"
    root.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg))
    return path


@dataclass
class PipelineRun:
    root: Path
    config: Path
    timings: dict = field(default_factory=dict)
    codes: dict = field(default_factory=dict)

    @property
    def total(self) -> float:
        return sum(self.timings.values())

    def report(self, name: str) -> Path:
        return self.root / "rep" / name


@pytest.fixture(scope="session")
def pipeline_run(tmp_path_factory) -> PipelineRun:
    """The default-size pipeline, run once through the CLI and timed stage by stage."""
    root = tmp_path_factory.mktemp("pipeline")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({"paths": {"dataset": str(root / "data"), "checkpoints": str(root / "ckpt"),
                                         "reports": str(root / "rep")}}))
    run = PipelineRun(root, cfg)
    for cmd in PIPELINE:
        t0 = time.perf_counter()
        run.codes[cmd] = dispatch([cmd, "--config", str(cfg)])
        run.timings[cmd] = time.perf_counter() - t0
        if run.codes[cmd] != 0:
            break
    return run


def rel_rmse(a, b) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


@dataclass
class DefaultModels:
    cfg: dict
    data: object
    models: object
    offline_obs_mse: float


@pytest.fixture(scope="session")
def default_models(pipeline_run) -> DefaultModels:
    """Checkpoints from the default pipeline run, loaded the way the CLI loads them."""
    from pmurecon import cli
    from pmurecon.lowrank import stack_inputs
    from pmurecon.online import offline_observed_mse

    assert pipeline_run.codes.get("train-stnet") == 0, pipeline_run.codes
    cfg = cli.load_config(str(pipeline_run.config), [])
    data = cli.experiment_data(cfg)
    models = cli.load_models(cfg, data.g)
    x, m = stack_inputs(data.test)
    return DefaultModels(cfg, data, models, offline_observed_mse(models, x, m))
