"""Small shared helpers: atomic writes, CSV with pinned float format, seeds."""

import os

import numpy as np

__all__ = ["NumericalAbort", "fmt", "atomic_write_text", "atomic_write_bytes",
           "write_csv", "derive_seed"]


class NumericalAbort(RuntimeError):
    """A run produced a non-finite quantity and was stopped."""


def fmt(value):
    """Pin floats to 17 significant digits so reruns are byte-identical."""
    if isinstance(value, (float, np.floating)):
        return f"{value:.17g}"
    return str(value)


def atomic_write_text(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def atomic_write_bytes(path, payload):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def write_csv(path, header, rows, comment=None):
    """Comma-separated, '.' decimals, mandatory header row."""
    lines = []
    if comment:
        lines.append(f"# {comment}\n")
    lines.append(",".join(header) + "\n")
    for row in rows:
        lines.append(",".join(fmt(v) for v in row) + "\n")
    atomic_write_text(path, "".join(lines))


def derive_seed(*keys):
    """Deterministic 63-bit child seed from an ordered key tuple."""
    ss = np.random.SeedSequence([int(k) & 0x7FFFFFFFFFFFFFFF for k in keys])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)
