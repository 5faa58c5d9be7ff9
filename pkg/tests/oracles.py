"""Independent reference implementations used by the test suite.

These are deliberately naive (loops, no vectorisation) so they share no code
paths with the package under test.
"""

from __future__ import annotations

import numpy as np

from psgdetect.autodiff import ops
from psgdetect.autodiff import tensor as T


# -- interval geometry ----------------------------------------------------------------
def iou_ref(s1, d1, s2, d2) -> float:
    inter = max(0.0, min(s1 + d1, s2 + d2) - max(s1, s2))
    union = d1 + d2 - inter
    return inter / union if union > 0 else 0.0


def nms_ref(cands, thr):
    """O(n^2) greedy suppression on tuples (class, prob, start, dur)."""
    kept = []
    for k in sorted({c[0] for c in cands}):
        pool = sorted([c for c in cands if c[0] == k], key=lambda c: (-c[1], c[2]))
        removed = [False] * len(pool)
        for i, c in enumerate(pool):
            if removed[i]:
                continue
            kept.append(c)
            for j in range(i + 1, len(pool)):
                if not removed[j] and iou_ref(c[2], c[3], pool[j][2], pool[j][3]) > thr:
                    removed[j] = True
    return sorted(kept, key=lambda c: (c[2], c[0], -c[1]))


def match_ref(preds, truths, thr):
    """Greedy matching by exhaustive re-scan: repeatedly take the best remaining pair."""
    free_p = set(range(len(preds)))
    free_t = set(range(len(truths)))
    pairs = []
    while True:
        best = None
        for i in sorted(free_p):
            for j in sorted(free_t):
                v = iou_ref(*preds[i], *truths[j])
                if v <= 0 or v < thr:
                    continue
                if best is None or v > best[2]:
                    best = (i, j, v)
        if best is None:
            break
        pairs.append(best)
        free_p.discard(best[0])
        free_t.discard(best[1])
    tp = len(pairs)
    return tp, len(preds) - tp, len(truths) - tp, pairs


# -- gradient-check cases -------------------------------------------------------------
def grad_cases(seed: int):
    """(name, fn, inputs, tol) tuples with shapes drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    cases = []

    b, ci, co = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k, stride, pad = rng.integers(1, 5), rng.integers(1, 4), rng.integers(0, 3)
    t = int(rng.integers(max(k - 2 * pad, 1), 12)) + 1
    x = rng.standard_normal((b, ci, t))
    w = rng.standard_normal((co, ci, k))
    bias = rng.standard_normal(co)
    cases.append((f"conv1d k={k} s={stride} p={pad}",
                  lambda x, w, b_: ops.conv1d(x, w, b_, stride=int(stride), padding=int(pad)), [x, w, bias], 1e-4))

    c, t = int(rng.integers(1, 4)), int(rng.integers(2, 7))
    x = rng.standard_normal((int(rng.integers(1, 4)), c, t)) * 2 + 1
    g, bt = rng.standard_normal(c), rng.standard_normal(c)
    cases.append(("batchnorm train", lambda x, g, b_: ops.batchnorm1d(x, g, b_, training=True), [x, g, bt], 1e-4))
    rm, rv = rng.standard_normal(c), rng.uniform(0.5, 2.0, c)
    cases.append(("batchnorm eval",
                  lambda x, g, b_: ops.batchnorm1d(x, g, b_, rm.copy(), rv.copy(), training=False), [x, g, bt], 1e-4))

    x = rng.standard_normal((2, 3, 5))
    x = np.where(np.abs(x) < 0.05, 0.1, x)  # keep away from the kink
    cases.append(("relu", ops.relu, [x], 1e-4))

    t = 2 * int(rng.integers(1, 6))
    x = rng.permutation(2 * 3 * t).reshape(2, 3, t) * 0.1 + rng.uniform(-0.01, 0.01, (2, 3, t))
    cases.append(("maxpool", lambda x: ops.maxpool1d(x, 2, 2), [x], 1e-4))

    x = rng.standard_normal((2, int(rng.integers(2, 5)), 3)) * 2
    cases.append(("softmax", lambda x: ops.softmax(x, axis=1), [x], 1e-4))
    cases.append(("log_softmax", lambda x: ops.log_softmax(x, axis=1), [x], 1e-4))
    tgt = rng.integers(0, x.shape[1], (2, 3))
    cases.append(("cross_entropy", lambda x: ops.cross_entropy(x, tgt, axis=1), [x], 1e-4))
    p = rng.uniform(0.1, 1.0, x.shape)
    cases.append(("cross_entropy_probs", lambda p: ops.cross_entropy_probs(p, tgt, axis=1, reduction="sum"), [p], 1e-4))

    pred = rng.standard_normal((2, 2, 4)) * 2
    target = rng.standard_normal((2, 2, 4))
    d = pred - target
    pred = np.where(np.abs(np.abs(d) - 1) < 0.05, pred + 0.2, pred)
    cases.append(("smooth_l1", lambda p: ops.smooth_l1(p, target), [pred], 1e-4))

    bsz, dim, hid, steps = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(2, 6))
    params = []
    for _ in range(2):
        params += [rng.standard_normal((3 * hid, dim)) * 0.5, rng.standard_normal((3 * hid, hid)) * 0.5,
                   rng.standard_normal(3 * hid) * 0.1, rng.standard_normal(3 * hid) * 0.1]
    x = rng.standard_normal((bsz, dim, steps))
    cases.append((f"bgru H={hid} T={steps}", lambda x, *ps: ops.bgru(x, ps), [x] + params, 1e-3))

    a, bb = rng.standard_normal((3, 4)), rng.standard_normal((1, 4))
    cases.append(("add broadcast", lambda a, b_: a + b_, [a, bb], 1e-4))
    cases.append(("mul broadcast", lambda a, b_: a * b_, [a, bb], 1e-4))
    cases.append(("getitem", lambda a: a[1:, ::2], [a], 1e-4))
    cases.append(("concat", lambda a, b_: T.concat([a, b_], axis=0), [a, bb], 1e-4))
    cases.append(("reshape/transpose", lambda a: a.reshape(2, 6).transpose(1, 0), [a], 1e-4))
    cases.append(("sum/mean", lambda a: a.sum(axis=0) * 2.0 + a.mean(axis=1).sum(), [a], 1e-4))
    cases.append(("exp/tanh/sigmoid", lambda a: T.exp(a) + T.tanh(a) + T.sigmoid(a), [a], 1e-4))
    cases.append(("log", lambda a: T.log(a), [np.abs(a) + 0.5], 1e-4))
    return cases
