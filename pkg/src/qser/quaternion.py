"""Quaternion algebra: Hamilton product and its real 4x4 matrix form.

A quaternion q = r + a*i + b*j + c*k is stored as the real 4-vector
[r, a, b, c].  Left-multiplication by a fixed quaternion w is a linear map
on that vector, and ``hamilton_matrix(w)`` returns the 4x4 real matrix
realizing it; this is the same structured sign pattern the quaternion
convolution uses to mix its four component planes.
"""

from __future__ import annotations

import numpy as np


def qmul(p, q):
    """Hamilton product p*q of two quaternions given as length-4 sequences.

    Non-commutative: i*j = k but j*i = -k.
    """
    pr, pa, pb, pc = p
    qr, qa, qb, qc = q
    return np.array([
        pr * qr - pa * qa - pb * qb - pc * qc,
        pr * qa + pa * qr + pb * qc - pc * qb,
        pr * qb - pa * qc + pb * qr + pc * qa,
        pr * qc + pa * qb - pb * qa + pc * qr,
    ])


def hamilton_matrix(w):
    """4x4 real matrix H with H @ vec(q) == vec(qmul(w, q)).

    Row/column order is [r, a, b, c].  For unit-norm w the matrix is
    orthogonal.
    """
    r, a, b, c = w
    return np.array([
        [r, -a, -b, -c],
        [a, r, -c, b],
        [b, c, r, -a],
        [c, -b, a, r],
    ])


# hamilton_matrix(e) for the four basis quaternions 1, i, j, k; used to
# expand the four shared conv kernel banks into the full mixing matrix.
_BASIS = np.eye(4)
HAMILTON_BASIS = np.stack([hamilton_matrix(_BASIS[s]) for s in range(4)])


def qnorm(q):
    """Euclidean norm sqrt(r^2 + a^2 + b^2 + c^2)."""
    return float(np.sqrt(np.dot(q, q)))
