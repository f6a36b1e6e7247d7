import threading
import time


class SystemClock:
    def now_ms(self) -> int:
        return int(time.time() * 1000)

    def sleep(self, ms: int, stop_event: threading.Event | None = None) -> None:
        if ms <= 0:
            return
        if stop_event is not None:
            stop_event.wait(ms / 1000)
        else:
            time.sleep(ms / 1000)


class ManualClock:
    """
    Clock that only moves when told to. The scheduler tests drive it by hand.
    """

    def __init__(self, start_ms: int = 0):
        self._now = start_ms
        self._lock = threading.Lock()

    def now_ms(self) -> int:
        with self._lock:
            return self._now

    def advance(self, ms: int) -> int:
        with self._lock:
            self._now += ms
            return self._now

    def set(self, ms: int) -> None:
        with self._lock:
            if ms < self._now:
                raise ValueError("ManualClock cannot move backwards")
            self._now = ms

    def sleep(self, ms: int, stop_event: threading.Event | None = None) -> None:
        # sleeping on a manual clock just advances it
        if ms > 0:
            self.advance(ms)
