"""Isolated execution of candidate feature programs.

Every candidate runs in a fresh child process under a wall-clock and memory
limit, exchanging tables through temp CSV files. Whatever the program does
(loop forever, exhaust memory, fork, call exit), execute() returns an
ExecutionOutcome; the caller's process is never at risk.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import signal
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

ROW_ID_COLUMN = "__llmfe_row_id__"
FUNCTION_STEM = "modify_features_v"

TIMEOUT = "timeout"
MEMORY_EXCEEDED = "memory_exceeded"
RUNTIME_ERROR = "runtime_error"
CONTRACT_VIOLATION = "contract_violation"
DISQUALIFICATION_REASONS = (TIMEOUT, MEMORY_EXCEEDED, RUNTIME_ERROR, CONTRACT_VIOLATION)

_RUNNER = Path(__file__).with_name("_sandbox_runner.py")


@dataclass(frozen=True)
class Provenance:
    """Where a program came from: island, iteration, and demo lineage."""

    island_id: int
    iteration: int
    parent_ids: tuple[int, ...] = ()


@dataclass(frozen=True)
class FeatureProgram:
    """A candidate feature transformation: a Python function over a table."""

    source: str
    function_name: str
    version: int
    provenance: Provenance | None = None

    def source_hash(self) -> str:
        return hashlib.sha256(self.source.encode()).hexdigest()[:16]


def identity_program(version: int = 0) -> FeatureProgram:
    """The seed transformation: returns its input unchanged."""
    name = f"{FUNCTION_STEM}{version}"
    source = f'def {name}(df):\n    """Return the input features unchanged."""\n    return df\n'
    return FeatureProgram(source=source, function_name=name, version=version)


@dataclass(frozen=True)
class ExecutionLimits:
    wall_time_s: float = 30.0
    memory_bytes: int = 2 * 1024**3
    grace_s: float = 2.0

    def __post_init__(self):
        if self.wall_time_s <= 0 or self.memory_bytes <= 0 or self.grace_s < 0:
            raise ValueError(f"nonpositive execution limit: {self}")


@dataclass(frozen=True)
class ExecutionOutcome:
    """Result of one sandboxed run: ok with a table, or disqualified."""

    status: str  # "ok" | "disqualified"
    table: pd.DataFrame | None = None
    reason: str | None = None  # one of DISQUALIFICATION_REASONS when disqualified
    detail: str = ""
    elapsed: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def _disqualified(reason: str, detail: str = "", elapsed: float = 0.0) -> ExecutionOutcome:
    return ExecutionOutcome(
        status="disqualified", reason=reason, detail=detail, elapsed=elapsed
    )


def validate_output(
    table_in: pd.DataFrame, table_out, label_name: str | None = None
) -> str | None:
    """Check the output contract; None means ok, otherwise a short reason.

    Row count and row order must be preserved (order is compared through the
    row index, so a program that rebuilds its frame from scratch in the same
    order still passes), at least one uniquely named column must remain, the
    label and the reserved row-id name must not appear, and every cell must
    be scalar. NaN and inf values pass through.
    """
    if not isinstance(table_out, pd.DataFrame):
        return "not_a_table"
    if len(table_out) != len(table_in):
        return "row_count"
    if not np.array_equal(table_out.index.to_numpy(), table_in.index.to_numpy()):
        return "row_order"
    if table_out.shape[1] == 0:
        return "no_columns"
    if table_out.columns.duplicated().any():
        return "duplicate_columns"
    if ROW_ID_COLUMN in table_out.columns:
        return "reserved_column"
    if label_name is not None and label_name in table_out.columns:
        return "label_column"
    for col in table_out.columns:
        series = table_out[col]
        if series.dtype == object:
            for cell in series:
                if isinstance(cell, (list, tuple, set, dict, np.ndarray)):
                    return "non_scalar"
    return None


def _kill_group(proc: subprocess.Popen) -> None:
    # The child runs in its own session; killing the group also reaps
    # anything a fork-happy candidate spawned.
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError, OSError):
        pass


def execute(
    program: FeatureProgram,
    features: pd.DataFrame,
    limits: ExecutionLimits = ExecutionLimits(),
    label_name: str | None = None,
) -> ExecutionOutcome:
    """Run a feature program on a table inside a fresh child process.

    Returns ok(table) or disqualified(reason) and never raises on account
    of the candidate's behavior.
    """
    if len(features) == 0:
        raise ValueError("features table is empty")
    workdir = tempfile.mkdtemp(prefix="llmfe-sandbox-")
    start = time.monotonic()
    try:
        program_path = os.path.join(workdir, "program.py")
        input_path = os.path.join(workdir, "input.csv")
        output_path = os.path.join(workdir, "output.csv")
        meta_path = os.path.join(workdir, "meta.json")
        schema_path = os.path.join(workdir, "schema.json")
        stderr_path = os.path.join(workdir, "stderr.txt")

        with open(program_path, "w") as fh:
            fh.write(program.source)
        payload = features.copy()
        payload.insert(0, ROW_ID_COLUMN, np.arange(len(features)))
        payload.to_csv(input_path, index=False)
        # String columns are pinned on both sides of the interchange so the
        # round trip cannot re-type values that happen to look numeric.
        string_cols = [c for c in features.columns if features[c].dtype == object]
        with open(schema_path, "w") as fh:
            json.dump({"string_columns": string_cols}, fh)

        cmd = [
            sys.executable,
            "-I",
            str(_RUNNER),
            program_path,
            input_path,
            output_path,
            meta_path,
            schema_path,
            str(limits.memory_bytes),
            program.function_name,
        ]
        with open(stderr_path, "w") as stderr_fh:
            proc = subprocess.Popen(
                cmd,
                stdout=subprocess.DEVNULL,
                stderr=stderr_fh,
                start_new_session=True,
                cwd=workdir,
            )
            try:
                proc.wait(timeout=limits.wall_time_s)
            except subprocess.TimeoutExpired:
                _kill_group(proc)
                try:
                    proc.wait(timeout=limits.grace_s)
                except subprocess.TimeoutExpired:
                    logger.warning("sandbox child %d survived SIGKILL briefly", proc.pid)
                return _disqualified(
                    TIMEOUT,
                    f"exceeded {limits.wall_time_s}s wall time",
                    time.monotonic() - start,
                )
            finally:
                _kill_group(proc)
        elapsed = time.monotonic() - start

        if not os.path.exists(meta_path):
            detail = _tail(stderr_path) or f"exit code {proc.returncode}, no status written"
            return _disqualified(RUNTIME_ERROR, detail, elapsed)
        with open(meta_path) as fh:
            meta = json.load(fh)
        if meta["status"] != "ok":
            reason = meta["status"]
            if reason not in DISQUALIFICATION_REASONS:
                reason = RUNTIME_ERROR
            return _disqualified(reason, meta.get("detail", ""), elapsed)

        if not os.path.exists(output_path):
            return _disqualified(RUNTIME_ERROR, "no output table written", elapsed)
        header = pd.read_csv(output_path, nrows=0)
        dtype_map = {c: str for c in string_cols if c in header.columns}
        out = pd.read_csv(output_path, float_precision="round_trip", dtype=dtype_map)
        if ROW_ID_COLUMN not in out.columns:
            return _disqualified(CONTRACT_VIOLATION, "row_order", elapsed)
        row_ids = out.pop(ROW_ID_COLUMN).to_numpy()
        if len(row_ids) != len(features):
            return _disqualified(CONTRACT_VIOLATION, "row_count", elapsed)
        if not np.array_equal(row_ids, np.arange(len(features))):
            return _disqualified(CONTRACT_VIOLATION, "row_order", elapsed)
        reason = validate_output(features.reset_index(drop=True), out, label_name)
        if reason is not None:
            return _disqualified(CONTRACT_VIOLATION, reason, elapsed)
        return ExecutionOutcome(status="ok", table=out, elapsed=elapsed)
    finally:
        shutil.rmtree(workdir, ignore_errors=True)


def _tail(path: str, limit: int = 300) -> str:
    try:
        text = Path(path).read_text()
    except OSError:
        return ""
    return text[-limit:].strip()
