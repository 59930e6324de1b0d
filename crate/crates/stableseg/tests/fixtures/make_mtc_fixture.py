"""Writes mtc_logits.t2g, mtc_labels.t2g and mtc_expected.json.

The expected values come from this numpy implementation, independent of the
Rust code.
"""
import json
import pathlib
import struct

import numpy as np

HERE = pathlib.Path(__file__).parent
IGNORE = 255


def write_t2g(path, arr):
    code = {np.dtype("uint8"): 0, np.dtype("float32"): 1, np.dtype("float64"): 2}[arr.dtype]
    head = b"T2GT" + bytes([1, code, arr.ndim, 0])
    head += b"".join(struct.pack("<I", d) for d in arr.shape)
    path.write_bytes(head + arr.astype(arr.dtype.newbyteorder("<")).tobytes(order="C"))


def mtc(x, y, tau=0.2, alpha=0.5):
    b, t, k, h, w = x.shape
    e = np.exp(x - x.max(axis=2, keepdims=True))
    p = e / e.sum(axis=2, keepdims=True)
    scales = int(np.floor(np.log2(t - 1))) + 1 if t >= 2 else 0
    out, terms = [], []
    for s in range(scales):
        r = 2**s
        stat = {"scale": s, "stride": r, "count": 0, "kept": 0, "trimmed_mean": None}
        if r < t:
            delta = np.abs(p[:, r:] - p[:, :-r]).sum(axis=2)
            a, c = y[:, :-r], y[:, r:]
            mask = (a != IGNORE) & (a == c)
            vals = np.sort(delta[mask], kind="stable")
            stat["count"] = int(vals.size)
            if vals.size:
                keep = max(1, int(np.floor((1 - tau) * vals.size)))
                stat["kept"] = keep
                stat["trimmed_mean"] = float(vals[:keep].mean())
                terms.append(alpha**s * stat["trimmed_mean"])
        out.append(stat)
    loss = float(np.mean(terms)) if terms else 0.0
    valid = [st["scale"] for st in out if st["trimmed_mean"] is not None]
    return {"loss": loss, "weighted_loss": loss, "valid_scales": valid, "empty": not valid, "scales": out}


def main():
    rng = np.random.default_rng(20240611)
    b, t, k, h, w = 2, 6, 3, 4, 5
    x = rng.normal(0.0, 1.5, size=(b, t, k, h, w))
    base = rng.integers(0, k, size=(b, 1, h, w))
    y = np.repeat(base, t, axis=1)
    flip = rng.random(y.shape) < 0.15
    y = np.where(flip, rng.integers(0, k, size=y.shape), y)
    y = np.where(rng.random(y.shape) < 0.1, IGNORE, y).astype(np.uint8)
    write_t2g(HERE / "mtc_logits.t2g", x.astype(np.float64))
    write_t2g(HERE / "mtc_labels.t2g", y)
    (HERE / "mtc_expected.json").write_text(json.dumps(mtc(x, y), indent=2) + "\n")


if __name__ == "__main__":
    main()
