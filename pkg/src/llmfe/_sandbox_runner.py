"""Child-process driver for candidate feature programs.

Invoked as: python -I _sandbox_runner.py PROGRAM INPUT_CSV OUTPUT_CSV META_JSON
            SCHEMA_JSON MEMORY_BYTES FUNCTION_NAME

Reads the feature table (string columns pinned via the schema file so the
CSV round trip cannot re-type them), applies the memory limit, runs the
named function from the program file, checks the parts of the output
contract that do not survive a CSV round trip (duplicate headers, reserved
column, non-scalar cells), and writes the result plus a status record. The
wall-clock limit is enforced by the parent.
"""

import json
import sys

ROW_ID_COLUMN = "__llmfe_row_id__"

OK = "ok"
MEMORY_EXCEEDED = "memory_exceeded"
RUNTIME_ERROR = "runtime_error"
CONTRACT_VIOLATION = "contract_violation"


def _current_vm_bytes():
    try:
        with open("/proc/self/statm") as fh:
            pages = int(fh.read().split()[0])
        import resource

        return pages * resource.getpagesize()
    except Exception:
        return 0


def _apply_memory_limit(limit_bytes):
    # Applied after the heavy imports so the cap buys the candidate program
    # roughly limit_bytes of additional address space, not interpreter overhead.
    try:
        import resource

        base = _current_vm_bytes()
        cap = base + limit_bytes if base else limit_bytes + (1 << 30)
        resource.setrlimit(resource.RLIMIT_AS, (cap, cap))
    except Exception:
        pass


def _check_output(out, pd, np):
    if not isinstance(out, pd.DataFrame):
        return "not_a_table"
    if out.shape[1] == 0:
        return "no_columns"
    if out.columns.duplicated().any():
        return "duplicate_columns"
    if ROW_ID_COLUMN in out.columns:
        return "reserved_column"
    for col in out.columns:
        series = out[col]
        if series.dtype == object:
            for cell in series:
                if isinstance(cell, (list, tuple, set, dict, np.ndarray)):
                    return "non_scalar"
    return None


def main(argv):
    (
        program_path,
        input_path,
        output_path,
        meta_path,
        schema_path,
        memory_bytes,
        function_name,
    ) = argv
    status = {"status": OK, "detail": ""}
    try:
        import numpy as np
        import pandas as pd

        with open(schema_path) as fh:
            schema = json.load(fh)
        dtype_map = {c: str for c in schema["string_columns"]}
        table = pd.read_csv(input_path, float_precision="round_trip", dtype=dtype_map)
        row_ids = table.pop(ROW_ID_COLUMN)
        table.index = row_ids.to_numpy()

        with open(program_path) as fh:
            source = fh.read()

        _apply_memory_limit(int(memory_bytes))

        namespace = {"pd": pd, "np": np}
        exec(compile(source, "<candidate>", "exec"), namespace)
        fn = namespace.get(function_name)
        if not callable(fn):
            status = {"status": RUNTIME_ERROR, "detail": f"no function {function_name!r}"}
        else:
            out = fn(table)
            reason = _check_output(out, pd, np)
            if reason is not None:
                status = {"status": CONTRACT_VIOLATION, "detail": reason}
            else:
                out.to_csv(output_path, index=True, index_label=ROW_ID_COLUMN)
    except MemoryError:
        status = {"status": MEMORY_EXCEEDED, "detail": "memory limit hit"}
    except BaseException as exc:  # candidate code may raise anything, incl. SystemExit
        status = {"status": RUNTIME_ERROR, "detail": f"{type(exc).__name__}: {exc}"[:500]}
    try:
        with open(meta_path, "w") as fh:
            json.dump(status, fh)
    except Exception:
        pass


if __name__ == "__main__":
    main(sys.argv[1:8])
