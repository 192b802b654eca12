"""Persistence: schema-tagged CSV, atomic writes and run manifests."""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from pathlib import Path

SCHEMA_VERSION = 1

# column layout per report kind
SCHEMAS = {
    "walk": ("path_id", "n", "log_vec_norm", "log_mat_norm", "log_spec_radius"),
    "lyapunov": ("n", "paths", "lambda_hat", "se", "burn", "lambda_burn_discarded", "se_burn_discarded"),
    "variance": ("method", "value", "se", "truncation_lag", "degenerate"),
    "estimates": ("lambda_hat", "lambda_se", "lambda_n", "lambda_paths", "s2_hat", "s2_se", "s2_method",
                  "s2_degenerate", "centering_shift_max"),
    "be_curve": ("observable", "n", "D_n", "mc_floor", "paths", "lambda_hat", "s_hat", "seed"),
    "worst_start": ("start_id", "n", "D_n"),
    "rate_fit": ("observable", "model", "q", "slope", "ci_lo", "ci_hi", "r2", "slope_se", "intercept",
                 "free_slope", "free_ci_lo", "free_ci_hi", "free_slope_se", "ratio"),
    "depcoef": ("p", "k", "delta_hat", "se", "pair_strategy", "pairs", "replicates"),
    "decay": ("p", "q", "slope", "slope_se", "ratio", "flagged", "nonincreasing", "worst_increase_z"),
    "gap": ("n", "max_gap", "mean_gap", "paths", "J_nu"),
    "gap_summary": ("min_gap", "trend_ratio", "paths", "J_nu", "nonnegative"),
    "scaling": ("kind", "m", "value", "se", "noise_floor", "slope", "ceiling", "slope_se", "passed",
                "paths", "J_nu", "J_c"),
    "blocks": ("path_id", "n", "m", "N", "J_nu", "J_c", "S_n", "S_nm", "S1", "S2", "identity_residual"),
    "block_sums": ("path_id", "j", "U", "R", "m", "N", "J_nu", "J_c"),
    "structure": ("check", "statistic", "threshold", "passed", "m", "N", "J_nu", "replicates", "outer",
                  "inner"),
}


class SchemaError(ValueError):
    """A CSV does not carry the expected schema header or columns."""


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float) or hasattr(v, "dtype"):
        x = float(v)
        if x.is_integer() and hasattr(v, "dtype") and v.dtype.kind in "iu":
            return str(int(v))
        if math.isnan(x):
            return "nan"
        return "%.17g" % x
    return str(v)


def atomic_write(path, data: bytes) -> None:
    """Write to a temp file in the target directory, fsync, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_csv(schema: str, rows) -> bytes:
    cols = SCHEMAS[schema]
    lines = [f"# glwalk-schema: {schema} v{SCHEMA_VERSION}", ",".join(cols)]
    for r in rows:
        if len(r) != len(cols):
            raise ValueError(f"{schema} row has {len(r)} fields, expected {len(cols)}")
        lines.append(",".join(_fmt(v) for v in r))
    return ("\n".join(lines) + "\n").encode()


def write_csv(path, schema: str, rows) -> Path:
    atomic_write(path, encode_csv(schema, rows))
    return Path(path)


def read_csv(path, schema: str | None = None) -> tuple[str, list[dict]]:
    """Parse a schema-tagged CSV; returns (schema name, rows as dicts of strings)."""
    text = Path(path).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) < 2 or not lines[0].startswith("# glwalk-schema:"):
        raise SchemaError(f"{path}: missing schema header")
    name, _, ver = lines[0].split(":", 1)[1].strip().partition(" v")
    if name not in SCHEMAS or ver != str(SCHEMA_VERSION):
        raise SchemaError(f"{path}: unknown schema {lines[0]!r}")
    if schema is not None and name != schema:
        raise SchemaError(f"{path}: schema {name!r}, expected {schema!r}")
    cols = lines[1].split(",")
    if tuple(cols) != SCHEMAS[name]:
        raise SchemaError(f"{path}: columns do not match schema {name!r}")
    rows = []
    for ln in lines[2:]:
        vals = ln.split(",")
        if len(vals) != len(cols):
            raise SchemaError(f"{path}: ragged row")
        rows.append(dict(zip(cols, vals)))
    return name, rows


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def config_hash(config: dict) -> str:
    """Hash of the canonical JSON form; scheduling-only keys are excluded."""
    core = {k: v for k, v in config.items() if k not in ("workers", "output_dir")}
    blob = json.dumps(core, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def write_manifest(out_dir, config: dict, command: str, version: str, started: float, finished: float,
                   files) -> Path:
    out_dir = Path(out_dir)
    manifest = {
        "command": command,
        "config_hash": config_hash(config),
        "version": version,
        "seed": config.get("seed"),
        "start_time": started,
        "end_time": finished,
        "files": {Path(f).name: sha256_file(f) for f in sorted(files, key=lambda p: Path(p).name)},
    }
    path = out_dir / f"manifest_{command}.json"
    atomic_write(path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return path
