# diagnostics.py
import os
import sys
import time
import threading
import queue

from .errors import ConfigError

# =========================
# CONFIGURATION
# =========================

ENABLE_LOGGING = os.getenv("AGN_ENABLE_LOGGING", "1") == "1"

# If True: soft problems (e.g. graph degree outside the calibration band) raise ConfigError.
# If False (default): print loud diagnostics and keep going.
STRICT_CONFIG_VALIDATION = os.getenv("AGN_STRICT_CONFIG", "0") == "1"

# Empty = no log files, diagnostics still go to stderr.
LOG_DIR = os.getenv("AGN_LOG_DIR", "")

_LOG_QUEUE_MAX = 1000
_LOG_THREAD_NAME = "airway-graph-net-log-writer"
_PREFIX = "[airway-graph-net]"

# =========================
# LOUD OUTPUT
# =========================

def _now():
    try:
        return time.strftime("%Y-%m-%d %H:%M:%S")
    except Exception:
        return "0000-00-00 00:00:00"


def loud(message: str):
    # Printing can fail (closed stderr, broken pipe). Never let that crash a training run.
    try:
        stream = sys.stderr if getattr(sys, "stderr", None) else sys.__stderr__
        print(f"{_PREFIX} {_now()} | {message}", file=stream, flush=True)
    except Exception:
        pass

# =========================
# NON-BLOCKING LOGGING
# =========================

def daily_log_path(directory: str) -> str:
    """One file per calendar day: <directory>/agn_YYYY-mm-dd.log."""
    return os.path.join(directory, f"agn_{time.strftime('%Y-%m-%d')}.log")


class LogWriter:
    """
    Appends lines to log files from a daemon thread.

    submit() never blocks: when the queue is full the line is dropped and
    counted, with a loud notice every ``notice_every`` drops. The target path
    is fixed when the line is submitted, so a run crossing midnight splits
    its lines by submission day.
    """

    def __init__(self, capacity: int = _LOG_QUEUE_MAX, notice_every: int = 50):
        self._queue = queue.Queue(maxsize=capacity)
        self._thread = None
        self._lock = threading.Lock()
        self._notice_every = notice_every
        self._last_notice = 0
        self.dropped = 0

    def submit(self, path: str, line: str) -> bool:
        self._start()
        try:
            self._queue.put_nowait((path, line))
            return True
        except queue.Full:
            self.dropped += 1
            if self.dropped - self._last_notice >= self._notice_every:
                self._last_notice = self.dropped
                loud(f"LOG QUEUE FULL: dropped {self.dropped} log lines")
            return False

    def flush(self, timeout: float = 2.0) -> bool:
        """Wait until every queued line is written; False on timeout."""
        done = self._queue.all_tasks_done
        with done:
            return done.wait_for(lambda: self._queue.unfinished_tasks == 0, timeout)

    def _start(self):
        with self._lock:
            if self._thread is not None:
                return
            self._thread = threading.Thread(target=self._run, name=_LOG_THREAD_NAME, daemon=True)
            try:
                self._thread.start()
            except Exception as e:
                loud(f"FAILED to start log writer thread: {e}")

    def _run(self):
        while True:
            path, line = self._queue.get()
            try:
                os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
                with open(path, "a", encoding="utf-8") as f:
                    f.write(line + "\n")
            except Exception as e:
                loud(f"LOGGING FAILURE (writer thread): {e}")
            finally:
                self._queue.task_done()


_writer = LogWriter()


def log(message: str):
    """Queue a line for today's log file under LOG_DIR; never blocks the training loop."""
    if not LOG_DIR or not ENABLE_LOGGING:
        return
    _writer.submit(daily_log_path(LOG_DIR), f"{_now()} | {message}")


def flush_log(timeout: float = 2.0) -> bool:
    return _writer.flush(timeout)


def report(message: str):
    loud(message)
    log(message)


def diagnose(header: str, problems, hint: str = None):
    """Print a numbered diagnostics block (stderr + log file)."""
    report(header)
    for i, problem in enumerate(problems, 1):
        report(f"  {i}. {problem}")
    if hint:
        report(hint)


def soft_problem(header: str, problems):
    """Diagnose a non-fatal problem; escalates to ConfigError in strict mode."""
    diagnose(header, problems)
    if STRICT_CONFIG_VALIDATION:
        raise ConfigError(f"{len(problems)} problem(s) under strict validation - see stderr for details")


def require_valid(header: str, problems, error_cls=ConfigError):
    """Raise error_cls after printing every collected problem."""
    if not problems:
        return
    diagnose(header, problems)
    raise error_cls(f"{len(problems)} validation error(s), first: {problems[0]}")
