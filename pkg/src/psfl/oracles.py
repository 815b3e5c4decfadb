"""Reference tables computed by small scalar implementations.

Nothing here calls the rest of the package: every expected value comes
from plain-Python loops (sorting, weighted means, explicit attention
sums, log/exp arithmetic) so the tables can check the vectorized code
independently. Each table is a CSV with columns

    case, inputs, expected, provenance

where ``inputs`` and ``expected`` are JSON and ``provenance`` is one of
``trivial`` (follows by inspection), ``published`` (a constant quoted
from the reference setup) or ``derived:<function>`` (computed here by the
named function).

Regenerate with ``python -m psfl.oracles <dir>``; output is deterministic.
"""
from __future__ import annotations

import csv
import io
import json
import math
import random
import sys
from pathlib import Path

TABLES = ("prune_ratio", "magnitude_prune", "adjust_mask", "attention", "losses", "fedavg",
          "energy", "metrics")


# ---------------------------------------------------------------------------
# scalar oracles


def sort_prune_oracle(weights, zeta):
    """Positions pruned by sorting (|w|, position) and taking floor(zeta * n)."""
    n = len(weights)
    k = int(math.floor(zeta * n + 1e-9))
    order = sorted(range(n), key=lambda i: (abs(weights[i]), i))
    return sorted(order[:k])


def grow_prune_oracle(weights, pruned, zeta_new):
    """Extra positions pruned when the ratio rises: smallest active |w| first."""
    n = len(weights)
    k = int(math.floor(zeta_new * n + 1e-9)) - len(pruned)
    gone = set(pruned)
    active = [i for i in range(n) if i not in gone]
    active.sort(key=lambda i: (abs(weights[i]), i))
    return sorted(pruned + active[:max(k, 0)])


def scalar_attention(Z, Wq, Wk, Wv):
    """softmax(Q K^T / sqrt(d)) V with explicit loops."""
    def mm(A, B):
        return [[sum(A[i][t] * B[t][j] for t in range(len(B))) for j in range(len(B[0]))]
                for i in range(len(A))]

    Q, K, V = mm(Z, Wq), mm(Z, Wk), mm(Z, Wv)
    d = len(Wq[0])
    out = []
    for i in range(len(Z)):
        s = [sum(Q[i][t] * K[j][t] for t in range(d)) / math.sqrt(d) for j in range(len(Z))]
        m = max(s)
        e = [math.exp(x - m) for x in s]
        tot = sum(e)
        a = [x / tot for x in e]
        out.append([sum(a[j] * V[j][c] for j in range(len(Z))) for c in range(len(V[0]))])
    return out


def scalar_ce(y, p, eps=1e-12):
    return sum(-sum(yi * math.log(max(pi, eps)) for yi, pi in zip(yr, pr))
               for yr, pr in zip(y, p)) / len(y)


def scalar_mse(a, b):
    fa = [x for row in a for x in row]
    fb = [x for row in b for x in row]
    return sum((x - z) ** 2 for x, z in zip(fa, fb)) / len(fa)


def scalar_kl(p, q, eps=1e-12):
    tot = 0.0
    for pr, qr in zip(p, q):
        tot += sum(pi * (math.log(max(pi, eps)) - math.log(max(qi, eps))) for pi, qi in zip(pr, qr) if pi > 0)
    return tot / len(p)


def scalar_task(y, y_hat, m, m_hat):
    return scalar_ce(y, y_hat) + scalar_mse(m, m_hat)


def scalar_distill(own, other, counterpart_task, tau=1e-3):
    return scalar_kl(own, other) / max(counterpart_task, tau)


def scalar_semantic(S_m, S_s, C_m, C_s, task_sum, tau=1e-3):
    return (scalar_mse(S_m, S_s) + scalar_mse(C_m, C_s)) / max(task_sum, tau)


def scalar_weighted_mean(values, counts):
    """Per-coordinate sum(N_k w_k) / sum(N_k)."""
    tot = float(sum(counts))
    return [sum(n * v[i] for n, v in zip(counts, values)) / tot for i in range(len(values[0]))]


def scalar_rate(bandwidth, snr_db):
    return bandwidth * math.log2(1.0 + 10.0 ** (snr_db / 10.0))


def scalar_psnr(a, b, max_value=1.0):
    mse = scalar_mse(a, b)
    return math.inf if mse == 0 else 10.0 * math.log10(max_value ** 2 / mse)


def scalar_ssim(a, b, max_value=1.0):
    fa = [x for row in a for x in row]
    fb = [x for row in b for x in row]
    if fa == fb:
        return 1.0
    n = len(fa)
    c1, c2 = (0.01 * max_value) ** 2, (0.03 * max_value) ** 2
    ma, mb = sum(fa) / n, sum(fb) / n
    va = sum((x - ma) ** 2 for x in fa) / n
    vb = sum((x - mb) ** 2 for x in fb) / n
    cov = sum((x - ma) * (z - mb) for x, z in zip(fa, fb)) / n
    return ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))


# ---------------------------------------------------------------------------
# tables


def _r(rng, n, lo=-1.0, hi=1.0, digits=6):
    return [round(rng.uniform(lo, hi), digits) for _ in range(n)]


def _prob_rows(rng, rows, cols):
    out = []
    for _ in range(rows):
        v = [rng.uniform(0.05, 1.0) for _ in range(cols)]
        s = sum(v)
        out.append([x / s for x in v])
    return out


def _mat(rng, r, c):
    return [_r(rng, c) for _ in range(r)]


def table_prune_ratio():
    rows = []
    for snr, z in ((0.0, 1.0), (6.25, 0.75), (12.5, 0.5), (18.75, 0.25), (25.0, 0.0)):
        rows.append((f"mean_{snr}", {"snr_db": [snr], "psi_min": 0.0, "psi_max": 25.0}, z, "trivial"))
    rows.append(("mixed_clients", {"snr_db": [5.0, 20.0, 12.5], "psi_min": 0.0, "psi_max": 25.0}, 0.5, "trivial"))
    return rows


def table_magnitude_prune():
    rows = [("four_weights", {"weights": [0.1, -0.2, 0.3, -0.4], "zeta": 0.5},
             sort_prune_oracle([0.1, -0.2, 0.3, -0.4], 0.5), "derived:sort_prune_oracle"),
            ("zero_ratio", {"weights": [0.5, -0.1, 0.2], "zeta": 0.0}, [], "trivial"),
            ("ties_earlier_first", {"weights": [0.2, -0.2, 0.2, 0.1], "zeta": 0.5},
             sort_prune_oracle([0.2, -0.2, 0.2, 0.1], 0.5), "derived:sort_prune_oracle")]
    rng = random.Random(1234)
    for i, zeta in enumerate((0.25, 0.5, 0.75, 0.95)):
        w = _r(rng, 12 + 4 * i, digits=2)  # two digits -> ties are common
        rows.append((f"random_{i}", {"weights": w, "zeta": zeta}, sort_prune_oracle(w, zeta),
                     "derived:sort_prune_oracle"))
    return rows


def table_adjust_mask():
    rng = random.Random(99)
    rows = []
    for i in range(3):
        w = _r(rng, 8, digits=3)
        pruned = sort_prune_oracle(w, 0.5)
        rows.append((f"grow_{i}", {"weights": w, "pruned": pruned, "zeta_prev": 0.5, "zeta_new": 0.75},
                     grow_prune_oracle(w, pruned, 0.75), "derived:grow_prune_oracle"))
    return rows


def table_attention():
    rows = [("n2_d2", {"Z": [[1.0, 0.0], [0.0, 1.0]], "Wq": [[1.0, 0.0], [0.0, 1.0]],
                       "Wk": [[1.0, 0.0], [0.0, 1.0]], "Wv": [[1.0, 2.0], [3.0, 4.0]]},
             scalar_attention([[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]],
                              [[1.0, 0.0], [0.0, 1.0]], [[1.0, 2.0], [3.0, 4.0]]),
             "derived:scalar_attention")]
    rng = random.Random(7)
    for i, (n, d, dh) in enumerate(((3, 4, 2), (4, 4, 4))):
        Z, Wq, Wk, Wv = _mat(rng, n, d), _mat(rng, d, dh), _mat(rng, d, dh), _mat(rng, d, dh)
        rows.append((f"random_{i}", {"Z": Z, "Wq": Wq, "Wk": Wk, "Wv": Wv},
                     scalar_attention(Z, Wq, Wk, Wv), "derived:scalar_attention"))
    return rows


def table_losses():
    rows = [
        ("task_perfect", {"op": "task", "y": [[0, 1]], "y_hat": [[0.0, 1.0]], "m": [[0.5, 0.5]],
                          "m_hat": [[0.5, 0.5]]}, 0.0, "trivial"),
        ("task_mse_quarter", {"op": "task", "y": [[1, 0]], "y_hat": [[1.0, 0.0]], "m": [[0.0, 1.0]],
                              "m_hat": [[0.5, 0.5]]}, 0.25, "trivial"),
        ("distill_identical", {"op": "distill", "own": [[0.3, 0.7]], "other": [[0.3, 0.7]],
                               "counterpart_task": 0.01}, 0.0, "trivial"),
        ("distill_ln2_over_2", {"op": "distill", "own": [[1.0, 0.0]], "other": [[0.5, 0.5]],
                                "counterpart_task": 2.0}, math.log(2) / 2, "trivial"),
        ("semantic_half", {"op": "semantic", "S_m": [[1.0]], "S_s": [[0.0]], "C_m": [[0.0]], "C_s": [[0.0]],
                           "task_sum": 2.0}, 0.5, "trivial"),
    ]
    rng = random.Random(21)
    for i in range(3):
        y = []
        for _ in range(3):
            c = rng.randrange(4)
            y.append([int(j == c) for j in range(4)])
        y_hat = _prob_rows(rng, 3, 4)
        m, m_hat = _mat(rng, 3, 5), _mat(rng, 3, 5)
        rows.append((f"task_random_{i}", {"op": "task", "y": y, "y_hat": y_hat, "m": m, "m_hat": m_hat},
                     scalar_task(y, y_hat, m, m_hat), "derived:scalar_task"))
        own, other = _prob_rows(rng, 3, 4), _prob_rows(rng, 3, 4)
        ct = rng.uniform(0.1, 3.0)
        rows.append((f"distill_random_{i}", {"op": "distill", "own": own, "other": other, "counterpart_task": ct},
                     scalar_distill(own, other, ct), "derived:scalar_distill"))
        S_m, S_s, C_m, C_s = (_mat(rng, 3, 4) for _ in range(4))
        ts = rng.uniform(0.1, 3.0)
        rows.append((f"semantic_random_{i}", {"op": "semantic", "S_m": S_m, "S_s": S_s, "C_m": C_m, "C_s": C_s,
                                              "task_sum": ts},
                     scalar_semantic(S_m, S_s, C_m, C_s, ts), "derived:scalar_semantic"))
    return rows


def table_fedavg():
    rows = [("weighted_scalar", {"values": [[0.0], [4.0]], "counts": [1, 3]}, [3.0], "trivial"),
            ("identical", {"values": [[1.5, -2.0]] * 3, "counts": [2, 5, 7]}, [1.5, -2.0], "trivial")]
    rng = random.Random(5)
    for i in range(3):
        vals = [_r(rng, 6) for _ in range(3)]
        counts = [rng.randint(1, 50) for _ in range(3)]
        rows.append((f"random_{i}", {"values": vals, "counts": counts}, scalar_weighted_mean(vals, counts),
                     "derived:scalar_weighted_mean"))
    return rows


def table_energy():
    return [
        ("rate_unit", {"op": "rate", "bandwidth_hz": 1.0, "snr_db": 0.0}, 1.0, "trivial"),
        ("rate_log2_4", {"op": "rate", "bandwidth_hz": 2000.0, "snr_db": 10 * math.log10(3.0)}, 4000.0, "trivial"),
        ("rate_10db", {"op": "rate", "bandwidth_hz": 1e6, "snr_db": 10.0}, scalar_rate(1e6, 10.0),
         "derived:scalar_rate"),
        ("delay", {"op": "delay", "payload_bits": 1e6, "rate_bps": 5e5}, 2.0, "trivial"),
        ("delay_zero_payload", {"op": "delay", "payload_bits": 0.0, "rate_bps": 5e5}, 0.0, "trivial"),
        ("energy_pmax", {"op": "energy", "power_w": 0.1, "delay_s": 2.0}, 0.2, "published"),
        ("payload_full_csc", {"op": "payload", "active": 54721065, "bits_per_weight": 32}, 54721065 * 32, "published"),
        ("payload_half", {"op": "payload", "active": 500, "bits_per_weight": 32}, 16000, "trivial"),
    ]


def table_metrics():
    rng = random.Random(11)
    a, b = _mat(rng, 4, 4), _mat(rng, 4, 4)
    a = [[abs(x) for x in r] for r in a]
    b = [[abs(x) for x in r] for r in b]
    return [
        ("psnr_identical", {"op": "psnr", "a": [[0.2, 0.4]], "b": [[0.2, 0.4]]}, "inf", "trivial"),
        ("psnr_mse_is_max_sq", {"op": "psnr", "a": [[0.0, 1.0]], "b": [[1.0, 0.0]]}, 0.0, "trivial"),
        ("psnr_random", {"op": "psnr", "a": a, "b": b}, scalar_psnr(a, b), "derived:scalar_psnr"),
        ("ssim_identical", {"op": "ssim", "a": a, "b": a}, 1.0, "trivial"),
        ("ssim_random", {"op": "ssim", "a": a, "b": b}, scalar_ssim(a, b), "derived:scalar_ssim"),
    ]


def render(name):
    rows = globals()[f"table_{name}"]()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["case", "inputs", "expected", "provenance"])
    for case, inputs, expected, prov in rows:
        w.writerow([case, json.dumps(inputs, sort_keys=True), json.dumps(expected), prov])
    return buf.getvalue()


def generate_oracles(out_dir):
    """Write every table to ``out_dir/<name>.csv``; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in TABLES:
        p = out / f"{name}.csv"
        p.write_text(render(name), encoding="utf-8")
        paths.append(p)
    return paths


def load_table(path):
    """Rows of an oracle CSV with JSON fields decoded."""
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        r["inputs"] = json.loads(r["inputs"])
        r["expected"] = json.loads(r["expected"])
    return rows


if __name__ == "__main__":
    for p in generate_oracles(sys.argv[1] if len(sys.argv) > 1 else "tests/fixtures/oracles"):
        print(p)
