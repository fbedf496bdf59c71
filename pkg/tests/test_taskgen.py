import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from npprov.kernels import DegenerateInputError, KernelSpec, gaussian_loglik, gp_posterior
from npprov.taskgen import (SMARTMETER_COMPACT, SYNTHETIC_COMPACT, EmptyDataError, ParseError,
                            SmartMeterSeries, Task, TaskConfig, compacted_context_task,
                            compacted_smartmeter_task, distance_to_intervals, in_intervals,
                            load_smart_meter, ood_x_config, ood_y_scale, read_task_archive,
                            sample_smartmeter_task, sample_synthetic_task, window_to_unit,
                            write_task_archive)

CFG = TaskConfig(base_seed=7)


def write_csv(path, rows, header="timestamp,energy_kwh_hh"):
    path.write_text("\n".join([header] + rows) + "\n")
    return path


def half_hourly(days, start="2013-01-01"):
    from datetime import datetime, timedelta
    t0 = datetime.fromisoformat(start)
    rows = []
    for i in range(int(days * 48)):
        stamp = (t0 + timedelta(minutes=30 * i)).strftime("%Y-%m-%d %H:%M:%S")
        rows.append(f"{stamp},{0.1 + 0.05 * np.sin(i / 7):.3f}")
    return rows


@pytest.mark.parametrize("spec", list(KernelSpec))
def test_synthetic_task_sizes_and_range(spec):
    for i in range(50):
        t = sample_synthetic_task(spec, CFG, i)
        assert 3 <= t.x_context.size <= 50 and 3 <= t.x_target.size <= 50
        for x in (t.x_context, t.x_target):
            assert np.all((x >= -2) & (x <= 2))


def test_synthetic_task_deterministic():
    a = sample_synthetic_task(KernelSpec.EQ, CFG, 11)
    b = sample_synthetic_task(KernelSpec.EQ, CFG, 11)
    for f in dataclasses.fields(Task):
        assert getattr(a, f.name).tobytes() == getattr(b, f.name).tobytes()


def test_generation_order_does_not_matter():
    forward = [sample_synthetic_task(KernelSpec.MATERN52, CFG, i) for i in range(6)]
    backward = [sample_synthetic_task(KernelSpec.MATERN52, CFG, i) for i in reversed(range(6))][::-1]
    for a, b in zip(forward, backward):
        assert np.array_equal(a.y_target, b.y_target)


def test_positions_uniform():
    x = np.concatenate([np.concatenate([t.x_context, t.x_target])
                        for t in (sample_synthetic_task(KernelSpec.EQ, CFG, i) for i in range(1000))])
    counts, _ = np.histogram(x, bins=10, range=(-2, 2))
    p = 0.1
    sd = np.sqrt(x.size * p * (1 - p))
    assert np.all(np.abs(counts - x.size * p) < 3 * sd)


def test_sizes_drawn_independently():
    sizes = np.array([(t.x_context.size, t.x_target.size)
                      for t in (sample_synthetic_task(KernelSpec.EQ, CFG, i) for i in range(400))])
    assert abs(np.corrcoef(sizes.T)[0, 1]) < 0.15
    assert sizes.min() == 3 and sizes.max() == 50


def test_joint_sampling_is_consistent():
    better = 0
    for i in range(100):
        t = sample_synthetic_task(KernelSpec.EQ, CFG, i)
        post = gaussian_loglik(t.y_target, gp_posterior(KernelSpec.EQ, t.x_context, t.y_context, t.x_target))
        prior = gaussian_loglik(t.y_target, gp_posterior(KernelSpec.EQ, [], [], t.x_target))
        better += post > prior
    assert better == 100


def test_task_validation():
    with pytest.raises(ValueError):
        Task([], [], [0.0], [0.0])
    with pytest.raises(ValueError):
        Task([0.0, 1.0], [0.0], [0.0], [0.0])
    with pytest.raises(ValueError):
        Task([np.nan], [0.0], [0.0], [0.0])


def test_ood_x_config():
    wide = ood_x_config(CFG)
    assert (wide.x_low, wide.x_high) == (-5.0, 5.0)
    assert ood_x_config(wide) == wide
    meter = ood_x_config(dataclasses.replace(CFG, x_low=0.0, x_high=2.0), smartmeter=True)
    assert (meter.x_low, meter.x_high) == (-1.0, 5.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(-100, 100).filter(lambda f: abs(f) > 1e-6), st.integers(0, 1000))
def test_ood_y_scale_only_scales_values(factor, index):
    t = sample_synthetic_task(KernelSpec.EQ, CFG, index)
    s = ood_y_scale(t, factor)
    assert np.array_equal(s.x_context, t.x_context) and np.array_equal(s.x_target, t.x_target)
    np.testing.assert_array_equal(s.y_context, t.y_context * factor)
    np.testing.assert_array_equal(s.y_target, t.y_target * factor)


def test_ood_y_scale_examples():
    t = sample_synthetic_task(KernelSpec.EQ, CFG, 0)
    assert np.array_equal(ood_y_scale(t, 1).y_context, t.y_context)
    assert np.array_equal(ood_y_scale(ood_y_scale(t, -1), -1).y_target, t.y_target)
    with pytest.raises(ValueError):
        ood_y_scale(t, 0)
    with pytest.raises(ValueError):
        ood_y_scale(t, float("inf"))


def brute_inside(x, intervals):
    return any(lo <= x <= hi for lo, hi in intervals)


def test_compacted_task_geometry():
    for i in range(100):
        t = compacted_context_task(KernelSpec.EQ, SYNTHETIC_COMPACT, CFG, i)
        assert all(brute_inside(x, SYNTHETIC_COMPACT) for x in t.x_context)
        d = distance_to_intervals(t.x_target, SYNTHETIC_COMPACT)
        assert np.all(d <= 0.25 + 1e-12)
        assert np.all(in_intervals(t.x_context, SYNTHETIC_COMPACT))


def test_interval_predicate_matches_brute_scan():
    x = np.linspace(-2, 2, 801)
    expect = np.array([brute_inside(v, SYNTHETIC_COMPACT) for v in x])
    np.testing.assert_array_equal(in_intervals(x, SYNTHETIC_COMPACT), expect)
    np.testing.assert_array_equal(distance_to_intervals(x, SYNTHETIC_COMPACT) == 0, expect)


def test_zero_width_interval_rejected():
    with pytest.raises(ValueError):
        compacted_context_task(KernelSpec.EQ, [(0.5, 0.5)], CFG, 0)


def test_load_smart_meter_basic(tmp_path):
    p = write_csv(tmp_path / "m.csv", ["2013-01-01 00:00:00,0.25", "2013-01-01 00:30:00,0.5"])
    s = load_smart_meter(p)
    assert s.readings.tolist() == [0.25, 0.5]
    np.testing.assert_allclose(s.timestamps, [0, 1 / 48])


def test_load_smart_meter_drops_null(tmp_path):
    p = write_csv(tmp_path / "m.csv", ["2013-01-01 00:00:00,0.25", "2013-01-01 00:30:00,Null",
                                       "2013-01-01 01:00:00,0.1"])
    assert load_smart_meter(p).readings.size == 2


def test_load_smart_meter_bad_reading_names_line(tmp_path):
    p = write_csv(tmp_path / "m.csv", ["2013-01-01 00:00:00,0.25", "2013-01-01 00:30:00,abc"])
    with pytest.raises(ParseError, match=":3:"):
        load_smart_meter(p)


def test_load_smart_meter_sorts_and_rejects_duplicates(tmp_path):
    rows = half_hourly(1)
    shuffled = [rows[i] for i in np.random.default_rng(0).permutation(len(rows))]
    s = load_smart_meter(write_csv(tmp_path / "a.csv", shuffled))
    np.testing.assert_array_equal(s.readings, load_smart_meter(write_csv(tmp_path / "b.csv", rows)).readings)
    assert np.all(np.diff(s.timestamps) > 0)
    with pytest.raises(ParseError, match="duplicate"):
        load_smart_meter(write_csv(tmp_path / "c.csv", rows + rows[:1]))


def test_load_smart_meter_empty(tmp_path):
    with pytest.raises(EmptyDataError):
        load_smart_meter(write_csv(tmp_path / "m.csv", ["2013-01-01 00:00:00,Null"]))
    (tmp_path / "e.csv").write_text("")
    with pytest.raises(EmptyDataError):
        load_smart_meter(tmp_path / "e.csv")


def test_load_smart_meter_bad_header(tmp_path):
    with pytest.raises(ParseError):
        load_smart_meter(write_csv(tmp_path / "m.csv", ["x,1"], header="time,kwh"))


def test_window_map():
    assert window_to_unit(10.0 + 1.0, 10.0) == pytest.approx(1.0)
    assert window_to_unit(10.0, 10.0) == 0.0


SMART_CFG = TaskConfig(x_low=0.0, x_high=2.0, base_seed=3)


def test_smartmeter_tasks(tmp_path):
    series = load_smart_meter(write_csv(tmp_path / "m.csv", half_hourly(20)))
    for i in range(30):
        t = sample_smartmeter_task(series, SMART_CFG, i)
        for x in (t.x_context, t.x_target):
            assert np.all((x >= 0) & (x <= 2))
        assert 3 <= t.x_context.size <= 50 and 3 <= t.x_target.size <= 50
    wide = sample_smartmeter_task(series, ood_x_config(SMART_CFG, smartmeter=True), 0)
    assert np.all((wide.x_context >= -1) & (wide.x_context <= 5))


def test_smartmeter_six_point_window_forces_three_and_three():
    series = SmartMeterSeries(np.array([0.0, 0.4, 0.8, 1.2, 1.6, 2.0]), np.arange(6.0))
    t = sample_smartmeter_task(series, SMART_CFG, 0)
    assert t.x_context.size == 3 and t.x_target.size == 3
    assert sorted(np.concatenate([t.y_context, t.y_target]).tolist()) == list(range(6))


def test_smartmeter_too_short():
    with pytest.raises(DegenerateInputError):
        sample_smartmeter_task(SmartMeterSeries(np.array([0.0, 1.0]), np.ones(2)), SMART_CFG, 0)
    sparse = SmartMeterSeries(np.array([0.0, 5.0, 10.0]), np.ones(3))
    with pytest.raises(DegenerateInputError):
        sample_smartmeter_task(sparse, SMART_CFG, 0)


def test_compacted_smartmeter(tmp_path):
    series = load_smart_meter(write_csv(tmp_path / "m.csv", half_hourly(10)))
    for i in range(20):
        t = compacted_smartmeter_task(series, SMART_CFG, i)
        assert np.all(in_intervals(t.x_context, SMARTMETER_COMPACT))
        d = distance_to_intervals(t.x_target, SMARTMETER_COMPACT)
        assert np.all((d > 0) & (d <= 0.25))


def test_task_archive_roundtrip(tmp_path):
    tasks = [sample_synthetic_task(KernelSpec.WEAKLY_PERIODIC, CFG, i) for i in range(5)]
    assert write_task_archive(tasks, tmp_path / "a.jsonl") == 5
    back = read_task_archive(tmp_path / "a.jsonl")
    for a, b in zip(tasks, back):
        assert np.array_equal(a.x_context, b.x_context) and np.array_equal(a.y_target, b.y_target)


def test_task_archive_bad_line(tmp_path):
    (tmp_path / "a.jsonl").write_text('{"x_context": [1]}\n')
    with pytest.raises(ParseError, match=":1:"):
        read_task_archive(tmp_path / "a.jsonl")
