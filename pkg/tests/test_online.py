import math
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pmurecon.grid import impedance_edge_features
from pmurecon.lowrank import LowRankConfig, LowRankModel, Normalizer, init_lowrank, lowrank_forward, stack_inputs
from pmurecon.numcore import analytic_grads
from pmurecon.online import (STAGES, DriftMonitorState, StreamConfig, advance_stage, current_phase,
                             drift_monitor, make_stream, observed_mse, pseudo_label_finetune, pseudo_label_loss,
                             pseudo_targets, run_online, self_supervised_update, stage_metrics)
from pmurecon.stnet import STNetConfig, STNetModel, init_stnet, stnet_graph

from oracles import ewma_replay, first_trigger


def feed(errors, alpha=0.1, threshold=1.0, patience=3):
    """Run the monitor on batches whose observed MSE is exactly ``errors[b]``."""
    x_obs = np.zeros((1, 2, 3, 2))
    m = np.ones((1, 2, 3))
    state, states = DriftMonitorState(), []
    for e in errors:
        state = drift_monitor(state, np.full_like(x_obs, math.sqrt(e)), x_obs, m, alpha, threshold, patience)
        states.append(state)
    return states


def trigger_index(states):
    return next((b for b, s in enumerate(states) if s.triggered), None)


# ---------------------------------------------------------------- drift monitor


def test_observed_mse_ignores_missing_entries():
    x = np.zeros((2, 2, 2))
    xh = np.full((2, 2, 2), 3.0)
    m = np.array([[1, 0], [0, 0]], float)
    xh[1] = 100.0
    assert observed_mse(xh, x, m) == 9.0
    assert observed_mse(xh, x, np.zeros((2, 2))) == 0.0


@given(st.lists(st.floats(0, 50, allow_nan=False), min_size=1, max_size=60), st.floats(0.01, 0.99))
def test_ewma_matches_closed_form_replay(errors, alpha):
    states = feed(errors, alpha, threshold=1e9)
    assert np.allclose([s.ewma for s in states], ewma_replay(errors, alpha), rtol=1e-12, atol=1e-300)
    assert all(s.ewma >= 0 for s in states)


def test_zero_error_stream_never_triggers():
    states = feed([0.0] * 500, threshold=1e-12)
    assert not any(s.triggered for s in states) and states[-1].stage == "initial"


@pytest.mark.parametrize("alpha,threshold,level,n_quiet,patience",
                         [(0.1, 4.0, 10.0, 7, 3), (0.1, 1.0, 1.5, 3, 3), (0.3, 0.2, 5.0, 0, 1), (0.05, 2.0, 2.5, 12, 4)])
def test_step_change_triggers_at_closed_form_batch(alpha, threshold, level, n_quiet, patience):
    # after j drift batches from a zero start the EWMA is level * (1 - (1 - alpha)^j)
    j = math.floor(math.log(1 - threshold / level) / math.log(1 - alpha)) + 1
    expect = n_quiet + j - 1 + patience - 1
    states = feed([0.0] * n_quiet + [level] * 200, alpha, threshold, patience)
    assert trigger_index(states) == expect
    assert states[expect].stage == "pseudo_label"


def test_step_below_threshold_never_triggers():
    assert trigger_index(feed([0.0] * 5 + [3.9] * 500, 0.1, 4.0)) is None


@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=80), st.floats(0.01, 5), st.floats(0.01, 5))
def test_lower_threshold_never_triggers_later(errors, t1, t2):
    lo, hi = sorted((t1, t2))
    a, b = trigger_index(feed(errors, 0.1, lo)), trigger_index(feed(errors, 0.1, hi))
    assert a == first_trigger(ewma_replay(errors, 0.1), lo, 3)
    if b is not None:
        assert a is not None and a <= b


def test_trigger_latches():
    states = feed([0.0] + [50.0] * 10 + [0.0] * 100, 0.5, 1.0)
    assert trigger_index(states) is not None and states[-1].triggered


def test_stages_only_move_forward():
    s = DriftMonitorState()
    s = advance_stage(s, "pseudo_label")
    assert advance_stage(s, "initial").stage == "pseudo_label"
    assert advance_stage(advance_stage(DriftMonitorState(), "self_supervised"), "initial").stage == "self_supervised"


def test_state_validation():
    with pytest.raises(ValueError):
        DriftMonitorState(stage="done")
    with pytest.raises(ValueError):
        DriftMonitorState(ewma=-1.0)


@pytest.mark.parametrize("field,value", [("adapt_steps", 0), ("eval_steps", 0), ("patience", 0),
                                         ("ewma_alpha", 1.0), ("ewma_alpha", 0.0), ("drift_threshold", 0.0),
                                         ("pseudo_hide_rate", 1.0), ("drift_delay", -1)])
def test_stream_config_validation(field, value):
    with pytest.raises(ValueError):
        StreamConfig(**{field: value})


def test_phase_defaults_to_adapt():
    assert current_phase() == "adapt"


# ---------------------------------------------------------------- pseudo labels on small models


@pytest.fixture(scope="module")
def small_models(small_windows, case39, ops39):
    x, m = stack_inputs(small_windows[:4])
    norm = Normalizer.fit(x, m)
    aux = init_lowrank(ops39, x.shape[1], LowRankConfig(), 0, norm)
    stn = init_stnet(ops39, impedance_edge_features(case39), STNetConfig(), 0, norm)
    return aux, stn, x, m


def test_pseudo_targets_are_exact_at_observed_entries(small_models):
    aux, _, x, m = small_models
    L = lowrank_forward(aux, x, m).L
    t = pseudo_targets(x, m, L)
    obs = m == 1
    assert t[obs].tobytes() == x[obs].tobytes()
    assert np.array_equal(t[~obs], L[~obs])


def test_target_equal_to_output_gives_zero_gradient(small_models):
    aux, stn, x, m = small_models
    L = lowrank_forward(aux, x, m).L
    target = stn.normalizer.inverse(stnet_graph(stn, x, m, L, train=False).data)
    store = stn.store.copy()
    model = STNetModel(store, stn.ops, stn.edge, stn.cfg)
    grads = analytic_grads(lambda s: pseudo_label_loss(model, x, m, L, target), store)
    assert max(np.abs(g).max() for g in grads.values()) <= 1e-12


def test_pseudo_label_step_never_reads_truth_and_keeps_batch_norm(small_models):
    aux, stn, x, m = small_models
    model = STNetModel(stn.store.copy(), stn.ops, stn.edge, stn.cfg)
    stats = {n: model.store[n].copy() for n, p in model.store.params.items() if not p.trainable}
    assert pseudo_label_finetune(model, aux, x, m, 0.005, 0.3, np.random.default_rng(0))
    for n, v in stats.items():
        assert np.array_equal(model.store[n], v)
    assert any(not np.array_equal(model.store[n], stn.store[n]) for n in stn.store.names())


def test_self_supervised_update_changes_aux_only_on_finite_step(small_models, caplog):
    aux, _, x, m = small_models
    model = LowRankModel(aux.store.copy(), aux.ops, aux.cfg)
    assert self_supervised_update(model, x, m, 0.01)
    assert model.cfg == aux.cfg
    bad = LowRankModel(aux.store.copy(), aux.ops, aux.cfg)
    before = bad.store.to_json()
    ok = self_supervised_update(bad, np.full_like(x, np.nan), m, 0.01)
    assert not ok and bad.store.to_json() == before
    assert "update skipped" in caplog.text


# ---------------------------------------------------------------- against the default checkpoints


class AuditedWindow:
    """Delegates to a window but refuses ground-truth reads outside the metrics phase."""

    def __init__(self, w, reads):
        self._w, self._reads = w, reads

    def __getattr__(self, name):
        if name in ("x_true", "labels"):
            phase = current_phase()
            self._reads.append((name, phase))
            if phase != "metrics":
                raise AssertionError(f"{name} read during {phase}")
        return getattr(self._w, name)


def default_stream(dm, seed, drift=True, **overrides):
    scfg = replace(dm.stream_cfg, **overrides)
    stream = make_stream(dm.data.g, dm.data.modal, scfg, seed, drift=drift, pool_seed=dm.data.data_seed)
    return stream, scfg


@pytest.fixture(scope="module")
def dm(default_models):
    from pmurecon.cli import stream_cfg
    return SimpleNamespace(**vars(default_models), stream_cfg=stream_cfg(default_models.cfg))


@pytest.mark.slow
def test_access_audit(dm):
    stream, scfg = default_stream(dm, 0)
    reads = []
    stream.adapt = [AuditedWindow(w, reads) for w in stream.adapt]
    stream.eval = [AuditedWindow(w, reads) for w in stream.eval]
    res = run_online(dm.models, stream, scfg, 0, dm.offline_obs_mse)
    assert res.trigger_batch is not None  # the pseudo-label path ran under audit
    assert reads and all(phase == "metrics" for _, phase in reads)


@pytest.mark.slow
def test_masked_truth_perturbation_leaves_adaptation_bit_identical(dm):
    stream, scfg = default_stream(dm, 1)
    a = run_online(dm.models, stream, scfg, 1, dm.offline_obs_mse)
    poisoned = [replace(w, x_true=np.where(w.mask[..., None] == 1, w.x_true, np.nan)) for w in stream.adapt]
    stream.adapt = poisoned
    b = run_online(dm.models, stream, scfg, 1, dm.offline_obs_mse)
    assert a.history_csv() == b.history_csv()
    assert a.aux.store.to_json() == b.aux.store.to_json()
    assert a.stnet.store.to_json() == b.stnet.store.to_json()


@pytest.mark.slow
def test_stationary_initial_stage_matches_offline(dm, pipeline_run):
    import json
    offline = json.loads(pipeline_run.report("evaluate.json").read_text())[0]
    for seed in range(3):
        stream, _ = default_stream(dm, seed, drift=False)
        rep = stage_metrics("initial", dm.models.aux, dm.models.stnet, stream.eval, seed)
        assert abs(rep.rmse - offline["rmse"]) <= 0.2 * offline["rmse"], (seed, rep.rmse, offline["rmse"])


@pytest.mark.slow
def test_online_is_deterministic(dm):
    stream, scfg = default_stream(dm, 2)
    a = run_online(dm.models, stream, scfg, 2, dm.offline_obs_mse)
    b = run_online(dm.models, stream, scfg, 2, dm.offline_obs_mse)
    assert a.staged_csv() == b.staged_csv() and a.history_csv() == b.history_csv()
    assert set(a.reports) == set(STAGES)


@pytest.mark.slow
def test_hundred_pseudo_label_steps_lower_eval_rmse(dm):
    stream, scfg = default_stream(dm, 0)
    aux, st0 = dm.models.aux, dm.models.stnet
    model = STNetModel(st0.store.copy(), st0.ops, st0.edge, st0.cfg)
    model.store.reset_optimizer()
    before = stage_metrics("before", aux, model, stream.eval, 0).rmse
    for i in range(100):
        x, m = stack_inputs([stream.adapt[i % len(stream.adapt)]])
        assert pseudo_label_finetune(model, aux, x, m, scfg.pseudo_label_lr, scfg.pseudo_hide_rate,
                                     np.random.default_rng([0, i]))
    after = stage_metrics("after", aux, model, stream.eval, 0).rmse
    assert after < before


def fidelity_ewma(aux, windows, lr, alpha=0.1):
    """Prequential EWMA of the aux output's observed-entry MSE, updating after each window when lr is set."""
    model = LowRankModel(aux.store.copy(), aux.ops, aux.cfg)
    model.store.reset_optimizer()
    e = 0.0
    for w in windows:
        x, m = stack_inputs([w])
        e = alpha * observed_mse(lowrank_forward(model, x, m).L, x, m) + (1 - alpha) * e
        if lr is not None:
            self_supervised_update(model, x, m, lr)
    return e


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="the default aux step size is sized for drift tracking and "
                                       "overshoots on a stationary stream")
def test_stationary_self_supervised_updates_do_not_raise_fidelity_loss(dm):
    stream, scfg = default_stream(dm, 0, drift=False, adapt_steps=400)
    assert len(stream.adapt) == 50
    frozen = fidelity_ewma(dm.models.aux, stream.adapt, None)
    adapted = fidelity_ewma(dm.models.aux, stream.adapt, scfg.aux_lr)
    assert adapted <= frozen
