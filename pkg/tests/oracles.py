"""Independent scalar-loop reference implementations used by the tests.

Nothing here imports the package's math; everything is plain Python floats.
"""

import math


def rotate(row, pos, base=10000.0):
    d = len(row)
    out = list(row)
    for m in range(d // 2):
        theta = pos * base ** (-2.0 * m / d)
        c, s = math.cos(theta), math.sin(theta)
        a, b = row[2 * m], row[2 * m + 1]
        out[2 * m] = c * a - s * b
        out[2 * m + 1] = s * a + c * b
    return out


def dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def softmax(xs):
    m = max(xs)
    es = [math.exp(x - m) for x in xs]
    z = sum(es)
    return [e / z for e in es]


def dense_attention(q_bar, k_bar, v, positions, base=10000.0, w_q=None, w_k=None,
                    visual=(), gamma=1.0, rows=None):
    """Causal attention for one head, step by step; gate applied when weights are given."""
    n, d = len(q_bar), len(q_bar[0])
    q = [rotate(q_bar[i], positions[i], base) for i in range(n)]
    k = [rotate(k_bar[i], positions[i], base) for i in range(n)]
    out, probs = [], []
    for i in range(n):
        logits = []
        for j in range(i + 1):
            l_ij = dot(q[i], k[j]) / math.sqrt(d)
            if w_q is not None and j in visual and (rows is None or i in rows):
                s_q = dot(q_bar[i], w_q)
                s_k = dot(k_bar[j], w_k)
                l_ij += gamma * math.tanh(s_q * s_k)
            logits.append(l_ij)
        p = softmax(logits)
        probs.append(p + [0.0] * (n - i - 1))
        out.append([sum(p[j] * v[j][c] for j in range(i + 1)) for c in range(len(v[0]))])
    return out, probs


def cross_entropy(logits, target):
    m = max(logits)
    return -(logits[target] - m - math.log(sum(math.exp(x - m) for x in logits)))


def central_difference(f, x, idx, h=1e-5):
    old = x[idx]
    x[idx] = old + h
    fp = f()
    x[idx] = old - h
    fm = f()
    x[idx] = old
    return (fp - fm) / (2 * h)
