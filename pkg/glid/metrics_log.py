"""
Thread-safe metric rows with atomic CSV appends
"""
import copy
import csv
import io
import os
import threading
from pathlib import Path
from typing import Callable, Dict, List, Optional, Union

from config_settings import Config

HEADER = ('step', 'phase', 'task', 'metric', 'value')


def format_value(value: float) -> str:
    return repr(float(value))


class MetricsLog:
    """
    Metric rows buffered in memory and appended to a CSV file

    Every row ever appended stays readable through ``read_all``; the file
    receives buffered rows in one write + fsync per flush, so a reader never
    sees half a logging interval.
    """

    def __init__(self, path: Optional[Union[str, Path]] = None, flush_every: Optional[int] = None,
                 lock_timeout: Optional[float] = None):
        """
        Initialize metrics log

        Args:
            path: CSV file (optional; rows stay in memory only when None)
            flush_every: buffered rows that trigger an early flush; 0 waits for flush() (default from env)
            lock_timeout: seconds to wait for the lock before raising RuntimeError
        """
        self.path = Path(path) if path is not None else None
        self._rows: List[Dict] = []
        self._pending: List[Dict] = []
        self._lock = threading.RLock()
        self._lock_timeout = Config.LOCK_TIMEOUT if lock_timeout is None else lock_timeout
        self._flush_every = Config.METRICS_FLUSH_EVERY if flush_every is None else flush_every
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(','.join(HEADER) + '\n', encoding='utf-8')

    def append(self, step: int, phase: str, task: str, metric: str, value: float) -> Dict:
        """
        Thread-safely add one metric row

        Returns:
            Dict: the stored row
        """
        row = {'step': int(step), 'phase': phase, 'task': task, 'metric': metric, 'value': float(value)}
        if self._lock.acquire(timeout=self._lock_timeout):
            try:
                self._rows.append(row)
                self._pending.append(row)
                if self._flush_every > 0 and len(self._pending) >= self._flush_every:
                    self._flush_locked()
                return copy.deepcopy(row)
            finally:
                self._lock.release()
        else:
            raise RuntimeError("Failed to acquire lock for append operation")

    def _flush_locked(self) -> int:
        if not self._pending:
            return 0
        written = len(self._pending)
        if self.path is not None:
            buffer = io.StringIO()
            writer = csv.writer(buffer, lineterminator='\n')
            for row in self._pending:
                writer.writerow([row['step'], row['phase'], row['task'], row['metric'], format_value(row['value'])])
            with open(self.path, 'a', encoding='utf-8', newline='') as fh:
                fh.write(buffer.getvalue())
                fh.flush()
                os.fsync(fh.fileno())
        self._pending = []
        return written

    def flush(self) -> int:
        """
        Append every buffered row to the file

        Returns:
            int: number of rows written
        """
        if self._lock.acquire(timeout=self._lock_timeout):
            try:
                return self._flush_locked()
            finally:
                self._lock.release()
        else:
            raise RuntimeError("Failed to acquire lock for flush operation")

    def read_all(self) -> List[Dict]:
        if self._lock.acquire(timeout=self._lock_timeout):
            try:
                return copy.deepcopy(self._rows)
            finally:
                self._lock.release()
        else:
            raise RuntimeError("Failed to acquire lock for read operation")

    def filter_rows(self, predicate: Callable[[Dict], bool]) -> List[Dict]:
        if self._lock.acquire(timeout=self._lock_timeout):
            try:
                return [copy.deepcopy(row) for row in self._rows if predicate(row)]
            finally:
                self._lock.release()
        else:
            raise RuntimeError("Failed to acquire lock for filter operation")

    def count(self) -> int:
        if self._lock.acquire(timeout=self._lock_timeout):
            try:
                return len(self._rows)
            finally:
                self._lock.release()
        else:
            raise RuntimeError("Failed to acquire lock for count operation")

    def last(self, phase: str, task: str, metric: str) -> Optional[float]:
        """Most recent value of one series, or None"""
        rows = self.filter_rows(lambda r: r['phase'] == phase and r['task'] == task and r['metric'] == metric)
        return rows[-1]['value'] if rows else None

    def series(self, phase: str, task: str, metric: str) -> List[tuple]:
        """(step, value) pairs of one series in append order"""
        return [(r['step'], r['value']) for r in
                self.filter_rows(lambda r: r['phase'] == phase and r['task'] == task and r['metric'] == metric)]


def read_metrics_csv(path: Union[str, Path]) -> List[Dict]:
    with open(path, encoding='utf-8', newline='') as fh:
        reader = csv.DictReader(fh)
        return [{'step': int(r['step']), 'phase': r['phase'], 'task': r['task'], 'metric': r['metric'],
                 'value': float(r['value'])} for r in reader]
