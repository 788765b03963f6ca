import json
import logging

import numpy as np
import pytest

from pmurecon.datagen import (BLOCK_WISE, OBSERVED, MissingEvent, MissingSchedule, ModalConfig, ScheduleError,
                              default_schedule, generate_windows, inject_missing, load_dataset, missing_rate,
                              split_and_store, split_windows)

from oracles import jacobi_svd


def test_noise_free_windows_are_low_rank(case39):
    ws = generate_windows(case39, ModalConfig(noise_sigma=0.0), 20, 1)
    for w in ws:
        for c in range(2):
            _, S, _ = jacobi_svd(w.x_true[:, :, c])
            assert np.sum(S > 1e-8 * S[0]) <= 4


def test_generation_deterministic(case39):
    a = generate_windows(case39, ModalConfig(), 5, 11)
    b = generate_windows(case39, ModalConfig(), 5, 11)
    c = generate_windows(case39, ModalConfig(), 5, 12)
    assert all(np.array_equal(x.x_true, y.x_true) for x, y in zip(a, b))
    assert not np.array_equal(a[0].x_true, c[0].x_true)


def test_all_bus_windows_agree_on_pmu_columns(case39):
    a = generate_windows(case39, ModalConfig(), 3, 4)
    b = generate_windows(case39, ModalConfig(), 3, 4, all_buses=True)
    for x, y in zip(a, b):
        assert np.array_equal(x.x_true, y.x_true[:, case39.pmu_nodes])


def test_identity_schedule(case39):
    ws = generate_windows(case39, ModalConfig(), 4, 0)
    out = inject_missing(ws, MissingSchedule())
    for w, o in zip(ws, out):
        assert np.all(o.mask == 1) and np.all(o.labels == OBSERVED)
        assert np.array_equal(o.x_obs, w.x_true)


def test_block_event(case39):
    ws = generate_windows(case39, ModalConfig(), 2, 0)
    sched = MissingSchedule(events=(MissingEvent("block_wise", (0, 1, 2), (0, 3)),))
    o = inject_missing(ws, sched)[0]
    assert np.all(o.mask[:3, :3] == 0) and np.all(o.labels[:3, :3] == BLOCK_WISE)
    assert o.mask.sum() == o.mask.size - 9


@pytest.mark.parametrize("ev", [
    MissingEvent("nope", (0,), (0, 1)),
    MissingEvent("block_wise", (99,), (0, 1)),
    MissingEvent("block_wise", (0,), (0, 999)),
])
def test_bad_events_raise(case39, ev):
    ws = generate_windows(case39, ModalConfig(), 2, 0)
    with pytest.raises(ScheduleError):
        inject_missing(ws, MissingSchedule(events=(ev,)))


def test_default_schedule_hits_target(case39):
    ws = generate_windows(case39, ModalConfig(), 400, 2)
    out = inject_missing(ws, default_schedule(400, case39.n_pmu, 8, 2))
    assert abs(missing_rate(out) - 0.6) <= 0.02
    patterns = {int(v) for w in out for v in np.unique(w.labels)}
    assert patterns == {0, 1, 2, 3, 4}


def test_unreachable_target_raises(case39):
    ws = generate_windows(case39, ModalConfig(), 120, 2)
    sched = MissingSchedule(random_rate=0.1, target_rate=0.6)
    with pytest.raises(ScheduleError):
        inject_missing(ws, sched)


def test_observed_equals_mask_times_truth(small_windows):
    for w in small_windows:
        assert np.array_equal(w.x_obs, w.x_true * w.mask[:, :, None])
        assert np.array_equal(w.mask == 0, w.labels != OBSERVED)


def test_split_counts(small_windows):
    parts = split_windows(small_windows)
    assert [len(parts[k]) for k in ("train", "test", "val")] == [84, 24, 12]
    ids = sorted(w.window_id for p in parts.values() for w in p)
    assert ids == sorted(w.window_id for w in small_windows)


def test_split_is_order_independent(small_windows):
    a = split_windows(small_windows)
    b = split_windows(small_windows[::-1])
    for k in a:
        assert [w.window_id for w in a[k]] == [w.window_id for w in b[k]]


def test_empty_split_warns(small_windows, caplog):
    with caplog.at_level(logging.WARNING):
        parts = split_windows(small_windows, (1.0, 0.0, 0.0))
    assert len(parts["train"]) == 120
    assert "empty" in caplog.text


@pytest.mark.parametrize("ratios", [(0.5, 0.5), (0.8, 0.3, -0.1), (0.5, 0.2, 0.2)])
def test_bad_ratios(small_windows, ratios):
    with pytest.raises(ValueError):
        split_windows(small_windows, ratios)


def test_store_round_trip_and_deterministic_manifest(small_windows, tmp_path):
    m1 = split_and_store(small_windows, directory=tmp_path / "a")
    split_and_store(small_windows, directory=tmp_path / "b")
    assert (tmp_path / "a/manifest.json").read_bytes() == (tmp_path / "b/manifest.json").read_bytes()
    assert (tmp_path / "a/train.jsonl").read_bytes() == (tmp_path / "b/train.jsonl").read_bytes()
    loaded = load_dataset(tmp_path / "a")
    assert m1["counts"] == {k: len(v) for k, v in loaded.items()}
    orig = {w.window_id: w for w in small_windows}
    for w in loaded["test"]:
        o = orig[w.window_id]
        assert np.array_equal(w.x_true, o.x_true) and np.array_equal(w.mask, o.mask)
        assert np.array_equal(w.labels, o.labels) and w.step == o.step
    assert json.loads((tmp_path / "a/manifest.json").read_text())["ratios"] == [0.7, 0.2, 0.1]


@pytest.mark.parametrize("kw", [{"n_modes": 0}, {"freq_range": (0.0, 1.0)}, {"noise_sigma": -1.0},
                                {"window_len": 1}, {"freq_range": (1.0, 30.0)}])
def test_modal_config_validation(kw):
    with pytest.raises(ValueError):
        ModalConfig(**kw)
