"""
Run trace logger.
Writes per-step training records, per-episode evaluation records and
verification outcomes to <out>/run_trace.log, keeping stderr readable.
"""

import logging
from pathlib import Path
from typing import Optional

from config import TRACE_LOG_NAME

# Dedicated logger for run traces
trace_logger = logging.getLogger('efsl_trace')
trace_logger.setLevel(logging.DEBUG)

# Prevent propagation to root logger (keeps terminal clean)
trace_logger.propagate = False

_file_handler: Optional[logging.FileHandler] = None


def attach_trace_file(out_dir) -> Path:
    """Route trace records to <out_dir>/run_trace.log (replacing any previous file handler)."""
    global _file_handler
    detach_trace_file()
    path = Path(out_dir) / TRACE_LOG_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    _file_handler = logging.FileHandler(path, encoding='utf-8')
    _file_handler.setLevel(logging.DEBUG)
    _file_handler.setFormatter(logging.Formatter('%(asctime)s %(message)s'))
    trace_logger.addHandler(_file_handler)
    return path


def detach_trace_file():
    global _file_handler
    if _file_handler is not None:
        trace_logger.removeHandler(_file_handler)
        _file_handler.close()
        _file_handler = None


def log_override(key: str, value: str):
    trace_logger.info(f"[OVERRIDE] {key}={value}")


def log_step(phase: str, step: int, loss: float, lr: float, grad_norm: float, episode_digest: str):
    trace_logger.debug(
        f"[STEP {phase}] step={step} loss={loss:.6f} lr={lr:.3e} "
        f"grad_norm={grad_norm:.4f} episode={episode_digest[:16]}"
    )


def log_episode(phase: str, index: int, accuracy: float, episode_digest: str):
    trace_logger.debug(f"[EPISODE {phase}] idx={index} acc={accuracy:.4f} episode={episode_digest[:16]}")


def log_eval_summary(label: str, mean: float, ci95: float, episodes: int, wall_time: float):
    """Timing only lands here, never in the canonical metrics text"""
    trace_logger.info(
        f"[EVAL] {label}: {mean:.2f} +- {ci95:.2f} over {episodes} episodes "
        f"in {wall_time:.1f}s"
    )


def log_property(name: str, passed: bool, detail: str):
    status = 'PASS' if passed else 'FAIL'
    trace_logger.info(f"[VERIFY {status}] {name}: {detail}")
