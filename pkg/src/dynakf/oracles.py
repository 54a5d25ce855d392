"""Independent reference implementations used as test ground truth.

Nothing in the production package imports this module.  The code favours
plain dense algebra over speed and shares no helpers with ``kalman`` or
``evalkit``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .diffmath.gradcheck import finite_difference, grad_check, relative_error

__all__ = [
    "ReferenceKfState",
    "reference_kf",
    "reference_drift",
    "finite_difference",
    "grad_check",
    "relative_error",
]


@dataclass
class ReferenceKfState:
    z_prior: np.ndarray
    P_prior: np.ndarray
    z: np.ndarray
    P: np.ndarray
    K: np.ndarray
    r: np.ndarray
    S: np.ndarray


def reference_kf(A, H, Q, R, z0, P0, observations, update_first: bool = True) -> list[ReferenceKfState]:
    """Textbook Kalman recursion with an explicit inverse of S.

    With ``update_first`` the first observation is applied to (z0, P0)
    directly, without a preceding predict.
    """
    A, H, Q, R = (np.array(m, dtype=float) for m in (A, H, Q, R))
    z = np.array(z0, dtype=float)
    P = np.array(P0, dtype=float)
    if A.shape[0] > 6:
        raise ValueError("reference_kf is meant for d <= 6")
    out = []
    for t, a in enumerate(observations):
        if t > 0 or not update_first:
            z = A.dot(z)
            P = A.dot(P).dot(A.T) + Q
        z_prior, P_prior = z.copy(), P.copy()
        S = H.dot(P).dot(H.T) + R
        if abs(np.linalg.det(S)) < 1e-300:
            raise np.linalg.LinAlgError("singular innovation covariance")
        K = P.dot(H.T).dot(np.linalg.inv(S))
        r = np.asarray(a, dtype=float) - H.dot(z)
        z = z + K.dot(r)
        P = (np.eye(len(z)) - K.dot(H)).dot(P)
        out.append(ReferenceKfState(z_prior, P_prior, z.copy(), P.copy(), K, r, S))
    return out


def _pose_matrix(p) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = Rotation.from_euler("XYZ", p[3:6]).as_matrix()
    T[:3, 3] = p[:3]
    return T


def reference_drift(gt, est, lengths, tol: float = 1e-9) -> dict:
    """Brute-force segment drift over every (start, length) pair.

    Returns ``{"t_rel": %, "r_rel": deg/100m, "per_length": {L: (t, r, n)}}``
    where t_rel and r_rel are RMSE per length averaged over lengths that had
    at least one segment.
    """
    gt, est = np.asarray(gt, dtype=float), np.asarray(est, dtype=float)
    n = len(gt)
    per_length = {}
    for L in lengths:
        t_errs, r_errs = [], []
        for i in range(n):
            end, arc = None, 0.0
            for j in range(i + 1, n):
                arc += float(np.sqrt(np.sum((gt[j, :3] - gt[j - 1, :3]) ** 2)))
                if arc >= L - tol:
                    end = j
                    break
            if end is None:
                continue
            d_gt = np.linalg.inv(_pose_matrix(gt[i])).dot(_pose_matrix(gt[end]))
            d_est = np.linalg.inv(_pose_matrix(est[i])).dot(_pose_matrix(est[end]))
            err = np.linalg.inv(d_est).dot(d_gt)
            t_errs.append(np.linalg.norm(err[:3, 3]) / L * 100.0)
            angle = Rotation.from_matrix(err[:3, :3]).magnitude()
            r_errs.append(np.degrees(angle) / L * 100.0)
        if t_errs:
            per_length[L] = (
                float(np.sqrt(np.mean(np.square(t_errs)))),
                float(np.sqrt(np.mean(np.square(r_errs)))),
                len(t_errs),
            )
    if not per_length:
        return {"t_rel": float("nan"), "r_rel": float("nan"), "per_length": {}}
    return {
        "t_rel": float(np.mean([v[0] for v in per_length.values()])),
        "r_rel": float(np.mean([v[1] for v in per_length.values()])),
        "per_length": per_length,
    }
