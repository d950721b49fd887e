"""Evaluation: abundance RMSE, spectral angle distance, endmember matching.

Estimated endmember sets are unordered, so scoring first aligns them to
the ground truth with a Hungarian assignment on the pairwise SAD matrix;
the same permutation is applied to abundance channels.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ContractError, ShapeError


def rmse(z_true, z_hat):
    """Per-endmember RMSE over pixels plus the average across endmembers."""
    z_true = np.asarray(z_true, dtype=np.float64)
    z_hat = np.asarray(z_hat, dtype=np.float64)
    if z_true.shape != z_hat.shape:
        raise ShapeError(f"rmse: shapes {z_true.shape} vs {z_hat.shape}")
    if z_true.ndim != 2 or z_true.shape[0] == 0:
        raise ContractError("rmse expects a nonempty (N, K) array pair")
    per_k = np.sqrt(np.mean((z_true - z_hat) ** 2, axis=0))
    return per_k, float(per_k.mean())


def sad(x_est, x_true):
    """Spectral angle distance in radians: arccos of cosine similarity.

    Evaluated as 2*atan2(|u - v|, |u + v|) on the normalized vectors, which
    is the same angle but stays accurate near 0 and pi where the naive
    clamped arccos loses ~sqrt(eps); result lies in [0, pi].
    """
    a = np.asarray(x_est, dtype=np.float64)
    b = np.asarray(x_true, dtype=np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ContractError("sad requires nonzero vectors")
    u = a / na
    v = b / nb
    return 2.0 * math.atan2(np.linalg.norm(u - v), np.linalg.norm(u + v))


def sad_matrix(est, truth):
    est = np.asarray(est, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    k = est.shape[0]
    cost = np.empty((k, k))
    for i in range(k):
        for j in range(k):
            cost[i, j] = sad(est[i], truth[j])
    return cost


def match_endmembers(est, truth):
    """Permutation p minimizing total SAD so est[p[j]] pairs with truth[j]."""
    est = np.asarray(est)
    truth = np.asarray(truth)
    if est.shape != truth.shape:
        raise ShapeError(f"match_endmembers: shapes {est.shape} vs {truth.shape}")
    cost = sad_matrix(est, truth)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(est.shape[0], dtype=int)
    perm[cols] = rows
    return perm


@dataclass
class EvaluationReport:
    per_endmember: list  # (index, rmse, sad) triples in ground-truth order
    average_rmse: float
    average_sad: float
    metadata: dict = field(default_factory=dict)


def evaluate(z_true, z_hat, endm_est, endm_true, metadata=None):
    """Score matched abundances and endmembers against ground truth.

    The Hungarian permutation from the endmember SAD matrix is applied to
    both the estimated endmember rows and the estimated abundance columns
    before scoring, so channel ordering cannot affect the report.
    """
    perm = match_endmembers(endm_est, endm_true)
    endm_m = np.asarray(endm_est)[perm]
    zhat_m = np.asarray(z_hat)[:, perm]
    per_k_rmse, avg_rmse = rmse(z_true, zhat_m)
    sads = np.array([sad(endm_m[j], np.asarray(endm_true)[j]) for j in range(endm_m.shape[0])])
    rows = [(j, float(per_k_rmse[j]), float(sads[j])) for j in range(endm_m.shape[0])]
    return EvaluationReport(rows, avg_rmse, float(sads.mean()), metadata or {})


def write_report_csv(path, reports):
    """Emit per-endmember rows plus the average; multi-run gives mean/std.

    `reports` is a single EvaluationReport or a list of them (one per
    seed); a single report gets std columns of zero.
    """
    if isinstance(reports, EvaluationReport):
        reports = [reports]
    k = len(reports[0].per_endmember)
    rmse_runs = np.array([[row[1] for row in r.per_endmember] for r in reports])
    sad_runs = np.array([[row[2] for row in r.per_endmember] for r in reports])
    with open(path, "w") as fh:
        fh.write("endmember,rmse_mean,rmse_std,sad_mean,sad_std\n")
        for j in range(k):
            fh.write(f"{j},{float(rmse_runs[:, j].mean())!r},{float(rmse_runs[:, j].std())!r},"
                     f"{float(sad_runs[:, j].mean())!r},{float(sad_runs[:, j].std())!r}\n")
        fh.write(f"average,{float(rmse_runs.mean(axis=1).mean())!r},{float(rmse_runs.mean(axis=1).std())!r},"
                 f"{float(sad_runs.mean(axis=1).mean())!r},{float(sad_runs.mean(axis=1).std())!r}\n")


def read_report_csv(path):
    rows = {}
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            parts = line.strip().split(",")
            rows[parts[0]] = dict(zip(header[1:], map(float, parts[1:])))
    return rows


def write_pgm(path, values):
    """8-bit binary PGM of a (H, W) array of [0, 1] values."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"write_pgm expects a 2-d array, got {arr.shape}")
    pix = np.clip(np.rint(255.0 * arr), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())
