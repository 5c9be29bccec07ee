"""Axis-angle rotation utilities shared by the tracking and deformation solvers."""

import numpy as np


def axis_angle_to_matrix(r: np.ndarray) -> np.ndarray:
    """Rodrigues formula: axis-angle 3-vector (radians) -> 3x3 rotation matrix."""
    r = np.asarray(r, dtype=np.float64)
    theta = np.linalg.norm(r)
    if theta < 1e-12:
        return np.eye(3)
    k = r / theta
    K = np.array([[0.0, -k[2], k[1]],
                  [k[2], 0.0, -k[0]],
                  [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def matrix_to_axis_angle(R: np.ndarray) -> np.ndarray:
    """Inverse Rodrigues. Returns the canonical representation with angle in [0, pi]."""
    R = np.asarray(R, dtype=np.float64)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < 1e-12:
        return np.zeros(3)
    if np.pi - theta < 1e-6:
        # Near pi the off-diagonal extraction degenerates; use the symmetric part.
        A = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(A), 0.0))
        # Fix signs from the largest component.
        i = int(np.argmax(axis))
        if axis[i] < 1e-12:
            return np.zeros(3)
        for j in range(3):
            if j != i and A[i, j] < 0:
                axis[j] = -axis[j]
        axis /= np.linalg.norm(axis)
        return axis * theta
    axis = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    axis /= (2.0 * np.sin(theta))
    return axis * theta


def canonicalize_axis_angle(r: np.ndarray) -> np.ndarray:
    """Map an axis-angle vector to the equivalent one with magnitude <= pi."""
    r = np.asarray(r, dtype=np.float64)
    theta = np.linalg.norm(r)
    if theta <= np.pi:
        return r.copy()
    axis = r / theta
    theta = np.fmod(theta, 2.0 * np.pi)
    if theta > np.pi:
        theta -= 2.0 * np.pi
    return axis * theta


def nearest_axis_angle(r: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Representation of rotation ``r`` nearest to ``reference`` in parameter space.

    Candidates are r itself and the flipped-axis representation with angle
    2*pi - |r|; used before blending axis-angle vectors numerically.
    """
    r = np.asarray(r, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    theta = np.linalg.norm(r)
    if theta < 1e-12:
        return r.copy()
    alt = r * (theta - 2.0 * np.pi) / theta
    if np.linalg.norm(alt - reference) < np.linalg.norm(r - reference):
        return alt
    return r.copy()


def rotation_and_derivatives(r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation matrix and its partials w.r.t. the axis-angle components.

    Uses the closed form of Gallego & Yezzi for dR/dr_i; at r = 0 the
    derivative reduces to the skew generator [e_i]_x.

    Returns (R, dR) with dR of shape (3, 3, 3); dR[i] = dR/dr_i.
    """
    r = np.asarray(r, dtype=np.float64)
    theta = np.linalg.norm(r)
    R = axis_angle_to_matrix(r)
    dR = np.empty((3, 3, 3))
    if theta < 1e-8:
        for i in range(3):
            e = np.zeros(3)
            e[i] = 1.0
            dR[i] = _skew(e)
        return R, dR
    rx = _skew(r)
    ImR = np.eye(3) - R
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1.0
        dR[i] = (r[i] * rx + _skew(np.cross(r, ImR @ e))) @ R / (theta * theta)
    return R, dR


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def rotation_angle_between(r_a: np.ndarray, r_b: np.ndarray) -> float:
    """Geodesic angle (radians) between two axis-angle rotations."""
    Ra = axis_angle_to_matrix(r_a)
    Rb = axis_angle_to_matrix(r_b)
    cos_theta = np.clip((np.trace(Ra.T @ Rb) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.arccos(cos_theta))
