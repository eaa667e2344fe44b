"""In-process training job registry: one background thread per training run."""

from __future__ import annotations

import itertools
import threading

from ..errors import CheckpointError, ConfigError, DataError, DivergenceError

_ERROR_KINDS = (
    (ConfigError, "config_error"),
    (DataError, "data_error"),
    (DivergenceError, "divergence"),
    (CheckpointError, "checkpoint_error"),
)


def error_kind(exc):
    for klass, kind in _ERROR_KINDS:
        if isinstance(exc, klass):
            return kind
    return "internal_error"


class Job:
    def __init__(self, job_id):
        self.job_id = job_id
        self.state = "queued"
        self.error_kind = None
        self.detail = None
        self.summary = None
        self.out_dir = None

    def status_dict(self):
        return {
            "job_id": self.job_id,
            "state": self.state,
            "error_kind": self.error_kind,
            "detail": self.detail,
            "summary": self.summary,
            "out_dir": self.out_dir,
        }


class JobRegistry:
    def __init__(self):
        self._jobs = {}
        self._lock = threading.Lock()
        self._counter = itertools.count(1)

    def submit(self, target, out_dir=None):
        """Run `target() -> summary dict` on a daemon thread; returns the job."""
        with self._lock:
            job = Job(f"job-{next(self._counter)}")
            job.out_dir = out_dir
            self._jobs[job.job_id] = job

        def runner():
            job.state = "running"
            try:
                job.summary = target()
                job.state = "done"
            except Exception as exc:  # report, never crash the service
                job.state = "error"
                job.error_kind = error_kind(exc)
                job.detail = str(exc)

        threading.Thread(target=runner, daemon=True).start()
        return job

    def get(self, job_id):
        with self._lock:
            return self._jobs.get(job_id)

    def all_jobs(self):
        with self._lock:
            return list(self._jobs.values())
