import struct

import numpy as np
import pytest

from conftest import small_config
from decoupled import checkpoint as C
from decoupled import training as T
from decoupled.errors import FormatError


def quick_tc(**kw):
    base = dict(max_epochs=5, batch_size=8, patience=10, seed=2)
    base.update(kw)
    return T.TrainConfig.for_task("links", **base)


def trained_state(dataset, epochs=2):
    cfg = small_config(dataset)
    tc = quick_tc()
    res = T.train(cfg, dataset, tc, stop_after=epochs)
    return res.state, tc


def test_round_trip_is_bit_exact(tmp_path, tiny_springs):
    state, tc = trained_state(tiny_springs)
    path = tmp_path / "run.dnsc"
    C.save(path, state, tc, extra={"note": "x"})
    loaded, tc2, extra = C.load(path)
    assert tc2 == tc and extra == {"note": "x"}
    for group in C.GROUPS:
        a = C._arrays(state)[group]
        b = C._arrays(loaded)[group]
        assert sorted(a) == sorted(b)
        for name in a:
            assert np.asarray(a[name]).tobytes() == b[name].tobytes()
    assert loaded.curves == state.curves
    assert loaded.rng_state == state.rng_state
    assert (loaded.epoch, loaded.best_epoch, loaded.bad_epochs) == (state.epoch, state.best_epoch, state.bad_epochs)
    assert C.dumps(loaded, tc2, extra) == path.read_bytes()


def test_fresh_state_round_trips(tiny_springs):
    state = T.new_state(small_config(tiny_springs), quick_tc())
    loaded, tc, _ = C.loads(C.dumps(state))
    assert tc is None and loaded.best_val == float("inf") and loaded.adam.t == 0


def test_resume_reproduces_uninterrupted_curve(tmp_path, tiny_springs):
    cfg = small_config(tiny_springs)
    tc = quick_tc()
    full = T.train(cfg, tiny_springs, tc)

    part = T.train(cfg, tiny_springs, tc, stop_after=2)
    path = tmp_path / "half.dnsc"
    C.save(path, part.state, tc)
    state, tc2, _ = C.load(path)
    resumed = T.train(cfg, tiny_springs, tc2, state=state)

    assert resumed.curves == full.curves
    for name, t in full.params.items():
        np.testing.assert_array_equal(resumed.params[name].data, t.data)


def test_load_params_picks_best_snapshot(tmp_path, tiny_springs):
    state, tc = trained_state(tiny_springs, epochs=3)
    path = tmp_path / "c.dnsc"
    C.save(path, state, tc)
    best = C.load_params(path)
    last = C.load_params(path, best=False)
    for name, t in state.params.items():
        np.testing.assert_array_equal(last[name].data, t.data)
        np.testing.assert_array_equal(best[name].data, state.best[name])


def test_version_mismatch_is_rejected(tiny_springs):
    buf = bytearray(C.dumps(T.new_state(small_config(tiny_springs), quick_tc())))
    struct.pack_into("<H", buf, 4, C.VERSION + 1)
    with pytest.raises(FormatError, match="version"):
        C.loads(bytes(buf))


@pytest.mark.parametrize("cut", [0, 3, 9, -1, -8])
def test_truncation_is_rejected(tiny_springs, cut):
    buf = C.dumps(T.new_state(small_config(tiny_springs), quick_tc()))
    with pytest.raises(FormatError):
        C.loads(buf[:cut])


def test_bad_magic_is_rejected(tiny_springs):
    buf = C.dumps(T.new_state(small_config(tiny_springs), quick_tc()))
    with pytest.raises(FormatError, match="magic"):
        C.loads(b"XXXX" + buf[4:])
