import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from modules.errors import SuperIndexError

logger = logging.getLogger(__name__)


@dataclass
class SourceSchedule:
    source_id: str
    poll_interval_ms: int
    next_due_ms: int = 0
    cycles: int = 0
    sync_attempts: int = 0
    failures: int = 0
    last_error: str | None = None


class Scheduler:
    """
    Drives the harvester. A source with no completed harvest gets a full
    harvest; after that every poll interval gets an incremental sync, and
    every `reconcile_every`-th sync is followed by a reconcile.

    Each tick runs the due sources side by side; one source never runs twice
    at once, and a failing source never stops the others.
    """

    def __init__(self, harvester, sources: list, clock, reconcile_every: int = 10):
        self.harvester = harvester
        self.clock = clock
        self.reconcile_every = reconcile_every
        now = clock.now_ms()
        self.schedules = {
            s.source_id: SourceSchedule(s.source_id, s.poll_interval_ms, next_due_ms=now)
            for s in sources
        }
        self._pool = ThreadPoolExecutor(max_workers=max(1, len(sources)))

    def _run_cycle(self, sched: SourceSchedule) -> str:
        cursor = self.harvester.cursor(sched.source_id)
        if cursor is not None and cursor.flagged:
            logger.error("Skipping flagged source %s", sched.source_id)
            return "flagged"
        if cursor is None or not cursor.harvested:
            self.harvester.full_harvest(sched.source_id)
            return "full_harvest"
        sched.sync_attempts += 1
        self.harvester.incremental_sync(sched.source_id)
        sched.cycles += 1
        if sched.cycles % self.reconcile_every == 0:
            self.harvester.reconcile(sched.source_id)
            return "sync+reconcile"
        return "sync"

    def _guarded(self, sched: SourceSchedule) -> str:
        try:
            outcome = self._run_cycle(sched)
            sched.last_error = None
            return outcome
        except SuperIndexError as e:
            sched.failures += 1
            sched.last_error = f"{e.code}: {e}"
            logger.error("Source %s failed: %s", sched.source_id, e)
            return "error"
        except Exception as e:
            sched.failures += 1
            sched.last_error = repr(e)
            logger.exception("Source %s failed unexpectedly", sched.source_id)
            return "error"

    def tick(self, now_ms: int | None = None) -> dict:
        """Run every source that is due at `now_ms`; returns source -> outcome."""
        now = self.clock.now_ms() if now_ms is None else now_ms
        due = [s for s in self.schedules.values() if s.next_due_ms <= now]
        futures = {s.source_id: self._pool.submit(self._guarded, s) for s in due}
        outcomes = {sid: f.result() for sid, f in futures.items()}
        for s in due:
            s.next_due_ms = now + s.poll_interval_ms
        return outcomes

    def run(self, stop_event: threading.Event | None = None, max_ticks: int | None = None) -> None:
        stop_event = stop_event or threading.Event()
        ticks = 0
        while not stop_event.is_set():
            self.tick()
            ticks += 1
            if max_ticks is not None and ticks >= max_ticks:
                return
            next_due = min((s.next_due_ms for s in self.schedules.values()), default=None)
            if next_due is None:
                return
            self.clock.sleep(max(1, next_due - self.clock.now_ms()), stop_event)

    def status(self) -> dict:
        return {
            sid: {
                "next_due_ms": s.next_due_ms,
                "cycles": s.cycles,
                "failures": s.failures,
                "last_error": s.last_error,
            }
            for sid, s in sorted(self.schedules.items())
        }

    def close(self) -> None:
        self._pool.shutdown(wait=True)


def run_scheduler(harvester, sources: list, clock, reconcile_every: int = 10,
                  stop_event: threading.Event | None = None, max_ticks: int | None = None) -> Scheduler:
    scheduler = Scheduler(harvester, sources, clock, reconcile_every)
    try:
        scheduler.run(stop_event, max_ticks)
    finally:
        scheduler.close()
    return scheduler
