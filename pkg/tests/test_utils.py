import threading

import pytest

from utils.clock import ManualClock
from utils.fnv import fnv1a_64, fnv1a_64_hex
from utils.jsonio import dumps_stable, write_atomic
from utils.timefmt import iso_to_ms, ms_to_iso


@pytest.mark.parametrize("data, expected", [
    (b"", 0xCBF29CE484222325),
    (b"a", 0xAF63DC4C8601EC8C),
    (b"foobar", 0x85944171F73967E8),
])
def test_fnv1a_64_known_vectors(data, expected):
    assert fnv1a_64(data) == expected


def test_fnv1a_64_hex_is_zero_padded():
    assert fnv1a_64_hex(b"") == "cbf29ce484222325"


def test_iso_timestamps():
    assert ms_to_iso(1_543_622_400_000) == "2018-12-01T00:00:00.000Z"
    assert iso_to_ms("2018-12-01T00:00:00Z") == 1_543_622_400_000
    assert iso_to_ms("2018-12-01T01:00:00+01:00") == 1_543_622_400_000
    assert iso_to_ms(ms_to_iso(1_514_764_800_123)) == 1_514_764_800_123
    with pytest.raises(ValueError):
        iso_to_ms("yesterday")


def test_dumps_stable_sorts_keys():
    assert dumps_stable({"b": 1, "a": [2, {"d": 3, "c": 4}]}) == '{"a":[2,{"c":4,"d":3}],"b":1}'


def test_write_atomic_replaces_file(tmp_path):
    path = tmp_path / "sub" / "cursor.json"
    write_atomic(path, "one")
    write_atomic(path, "two")
    assert path.read_text() == "two"
    assert [p.name for p in path.parent.iterdir()] == ["cursor.json"]


def test_manual_clock():
    clock = ManualClock(1000)
    clock.advance(500)
    assert clock.now_ms() == 1500
    clock.sleep(250, threading.Event())
    assert clock.now_ms() == 1750
    with pytest.raises(ValueError):
        clock.set(10)
