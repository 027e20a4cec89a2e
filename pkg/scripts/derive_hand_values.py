"""Evaluate the hand-checked constants from first principles with ``math`` only.

Run ``python scripts/derive_hand_values.py``; prints one line per value. The
test-suite imports ``derive()`` and compares it with both the stated
constants and the library implementation.
"""

import math


def kl(ref, view):
    return sum(r * math.log(r / v) for r, v in zip(ref, view))


def softmax(z):
    m = max(z)
    e = [math.exp(x - m) for x in z]
    return [x / sum(e) for x in e]


def derive():
    d = kl((0.9, 0.1), (0.5, 0.5))
    sharp = softmax([1 / 0.5, 0 / 0.5])
    # tau = 0.1, cos_pos = 1, cos_neg = 0:  -log(e^10 / (e^10 + e^0))
    info_nce = -math.log(math.exp(10) / (math.exp(10) + 1))
    # target (0.9, 0.1) against view (0.5, 0.5): soft cross-entropy
    lp = -(0.9 * math.log(0.5) + 0.1 * math.log(0.5))
    composite = math.exp(-d) * lp + d
    return {
        "kl": d,
        "sharpen_0": sharp[0],
        "sharpen_1": sharp[1],
        "info_nce_single_negative": info_nce,
        "info_nce_closed_form": math.log1p(math.exp(-10)),
        "rectified_composite": composite,
    }


if __name__ == "__main__":
    for name, value in derive().items():
        print(f"{name:26s} {value:.10g}")
