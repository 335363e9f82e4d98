"""Smoke test for the Python bindings.

Build and install first:  pip install -e crates/py --no-build-isolation
Then run:                 python python/smoke_test.py
"""

import cachevisor_py as cv

SCRATCH_VA = 0x4000_0000
BOOT_L2 = 260
SCRATCH_L2 = 256


def guest_memory_and_hypercalls():
    sys = cv.System()
    assert sys.ttbr0 == 0x0010_0000
    assert sys.page_type[256] == "L1" and sys.page_type[260] == "L2"

    v = sys.map_l2(BOOT_L2, SCRATCH_L2, 300)
    assert v == {"verdict": "accepted"}, v
    sys.write(SCRATCH_VA, 42)
    assert sys.read(SCRATCH_VA) == 42
    # Dirty in the cache, stale in memory until cleaned.
    assert sys.core_view(300 << 12) == 42
    assert sys.clean(SCRATCH_VA) == {"result": "done"}
    assert sys.memory_view(300 << 12) == 42 and sys.coherent(300 << 12)
    assert sys.refs(300)["wt"] >= 1

    # A writable mapping of a page table is refused.
    v = sys.map_l2(BOOT_L2, SCRATCH_L2 + 1, 256)
    assert v["verdict"] == "rejected", v
    assert sys.check_invariant() is None

    assert sys.unmap_l2(BOOT_L2, SCRATCH_L2) == {"verdict": "accepted"}
    try:
        sys.read(SCRATCH_VA)
    except cv.SimulatorError:
        pass
    else:
        raise AssertionError("read of an unmapped page succeeded")


def attacks():
    out = cv.integrity_attack("none")
    assert out["bypassed"] and not out["final_integrity"]
    for cm in ("acpt", "selective", "flush", "detect"):
        assert not cv.integrity_attack(cm)["bypassed"], cm

    key = bytes(range(16))
    r = cv.aes_extract(key)
    assert r["success"] and bytes(r["recovered_key"]) == key, r
    assert not cv.aes_extract(key, "flush", max_encryptions=200)["success"]


def properties():
    r = cv.check_trace(3, steps=500, countermeasure="acpt")
    assert r["failure"] is None, r
    assert cv.check_refs(1, steps=800)["mismatch"] is None
    assert cv.cache_lemmas(0, 100) == {"outcome": "pass", "histories": 100}
    assert cv.spawn()["rc_trace"] == [0, 1, 0]


def errors():
    for bad in (lambda: cv.System(countermeasure="bogus"), lambda: cv.System(geometry=(100, 4, 64))):
        try:
            bad()
        except (ValueError, cv.SimulatorError):
            continue
        raise AssertionError("bad configuration accepted")


if __name__ == "__main__":
    guest_memory_and_hypercalls()
    attacks()
    properties()
    errors()
    print("python smoke test: ok")
