"""Independent reference implementations used only by the tests.

They are written elementwise from the defining formulas and share no code
with the package.
"""
import math

import numpy as np


def hann_dtft(omega, length):
    """DTFT of the periodic Hann window w[n] = 0.5 - 0.5 cos(2 pi n / L), n < L."""

    def dirichlet(w):
        w = np.asarray(w, dtype=np.float64)
        out = np.empty_like(w, dtype=np.complex128)
        small = np.abs(np.sin(w / 2)) < 1e-12
        ws = w[~small]
        out[~small] = np.exp(-1j * ws * (length - 1) / 2) * np.sin(ws * length / 2) / np.sin(ws / 2)
        out[small] = length
        return out

    step = 2 * np.pi / length
    return 0.5 * dirichlet(omega) - 0.25 * dirichlet(omega - step) - 0.25 * dirichlet(omega + step)


def windowed_sine_magnitude(freq, amplitude, sample_rate, length):
    """|DFT| of a Hann-windowed sine at the rfft bin frequencies (positive-frequency lobe)."""
    omega0 = 2 * np.pi * freq / sample_rate
    bins = 2 * np.pi * np.arange(length // 2 + 1) / length
    return np.abs(amplitude / 2 * hann_dtft(bins - omega0, length))


def triangle_filter_response(magnitude, sample_rate, length, n_mels):
    """Apply unit-peak triangular mel filters, evaluated one weight at a time."""
    top = 2595.0 * math.log10(1 + (sample_rate / 2) / 700.0)
    edges = [700.0 * (10 ** (top * i / (n_mels + 1) / 2595.0) - 1) for i in range(n_mels + 2)]
    out = np.zeros(n_mels)
    for m in range(n_mels):
        lo, c, hi = edges[m], edges[m + 1], edges[m + 2]
        acc = 0.0
        for k, mag in enumerate(magnitude):
            f = k * sample_rate / length
            if lo < f <= c:
                acc += (f - lo) / (c - lo) * mag
            elif c < f < hi:
                acc += (hi - f) / (hi - c) * mag
        out[m] = acc
    return out, edges


def depth_metrics_bruteforce(preds, gts, eigen=False):
    abs_rel = sqr_rel = mse = msl = 0.0
    for p, g in zip(preds, gts):
        n = 0
        a = s = l2 = lg = 0.0
        for pv, gv in zip(np.ravel(p), np.ravel(g)):
            pv, gv = float(pv), float(gv)
            if gv <= 0:
                continue
            n += 1
            den = gv if eigen else max(pv, 1e-6)
            a += abs(gv - pv) / den
            s += (gv - pv) ** 2 / den
            l2 += (gv - pv) ** 2
            lg += (math.log(max(gv, 1e-6)) - math.log(max(pv, 1e-6))) ** 2
        abs_rel += a / n
        sqr_rel += s / n
        mse += l2 / n
        msl += lg / n
    t = len(preds)
    return abs_rel / t, sqr_rel / t, math.sqrt(mse / t), math.sqrt(msl / t)


def crr_bruteforce(pred, gt, tau):
    hits = total = 0
    for pv, gv in zip(np.ravel(pred), np.ravel(gt)):
        if gv <= 0:
            continue
        total += 1
        hits += abs(gv - pv) / gv < tau
    return hits / total


def auc_bruteforce(preds, gts):
    taus = [t / 100 for t in range(31)]
    total = 0.0
    for t in range(30):
        c = sum(crr_bruteforce(p, g, taus[t]) for p, g in zip(preds, gts)) / len(preds)
        total += c * (taus[t + 1] - taus[t])
    return total


def iou_bruteforce(pred, gt, cls):
    inter = union = 0
    for pv, gv in zip(np.ravel(pred), np.ravel(gt)):
        a, b = pv == cls, gv == cls
        inter += a and b
        union += a or b
    return None if union == 0 else inter / union


def global_iou_bruteforce(preds, gts, cls):
    inter = union = 0
    for p, g in zip(preds, gts):
        for pv, gv in zip(np.ravel(p), np.ravel(g)):
            a, b = pv == cls, gv == cls
            inter += a and b
            union += a or b
    return None if union == 0 else inter / union


def nearest_code_bruteforce(vec, codebook):
    best, best_d = 0, None
    for k, e in enumerate(codebook):
        d = sum((float(a) - float(b)) ** 2 for a, b in zip(vec, e))
        if best_d is None or d < best_d:
            best, best_d = k, d
    return best
