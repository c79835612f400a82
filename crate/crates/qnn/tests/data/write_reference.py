"""Writes reference model files without using the Rust code.

Layout: magic, version, header, layer descriptors, then tensor records in
gate order (input, forget, cell, output). Values come from `value(t, k)`
and are exact in f32, so the Rust test can recompute them.

    python3 write_reference.py    # writes reference_full.qnn, reference_deploy.qnn
"""
import math
import os
import struct

INPUT_DIM, N_CLASSES, CELLS, PROJ, SEED, PHASE = 3, 2, 2, 1, 42, 2
SCALE = 255


def value(t, k):
    return ((t * 5 + k * 3) % 11 - 5) / 4.0


def bias(t, k):
    return ((t * 3 + k) % 7 - 3) / 8.0


def rhu(x):
    return math.floor(x + 0.5)


def codes(vals):
    lo, hi = min(vals), max(vals)
    q = SCALE / (hi - lo)
    z = rhu(q * lo)
    out = []
    for x in vals:
        if x <= lo:
            out.append(0)
        elif x >= hi:
            out.append(SCALE)
        else:
            out.append(min(max(rhu(q * x) - z, 0), SCALE))
    return lo, hi, out


def float_record(rows, cols, vals):
    return struct.pack("<BII", 0, rows, cols) + struct.pack("<%df" % len(vals), *vals)


def quant_record(rows, cols, vals):
    lo, hi, c = codes(vals)
    return struct.pack("<BIIffI", 1, rows, cols, lo, hi, SCALE) + bytes(c)


def build(masters):
    layer_flags = 0b011 | (0b100 if masters else 0)
    out = b"QNN1" + struct.pack("<IIIQII", 1, INPUT_DIM, N_CLASSES, SEED, PHASE, 1)
    out += struct.pack("<III", CELLS, PROJ, layer_flags)
    out += struct.pack("<I", 0b100)
    t = 0

    def weight(rows, cols):
        nonlocal t
        vals = [value(t, k) for k in range(rows * cols)]
        t += 1
        rec = float_record(rows, cols, vals) if masters else b""
        return rec + quant_record(rows, cols, vals)

    def bias_record(n):
        nonlocal t
        vals = [bias(t, k) for k in range(n)]
        t += 1
        return float_record(1, n, vals)

    for _ in range(4):
        out += weight(CELLS, INPUT_DIM)
        out += weight(CELLS, PROJ)
        out += bias_record(CELLS)
    out += weight(PROJ, CELLS)
    vals = [value(t, k) for k in range(N_CLASSES * PROJ)]
    t += 1
    out += float_record(N_CLASSES, PROJ, vals)
    out += bias_record(N_CLASSES)
    return out


here = os.path.dirname(os.path.abspath(__file__))
for name, masters in (("reference_full.qnn", True), ("reference_deploy.qnn", False)):
    with open(os.path.join(here, name), "wb") as f:
        f.write(build(masters))
