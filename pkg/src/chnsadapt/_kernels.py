"""Element-local quadrature kernels for the P2 velocity blocks.

Each kernel exists twice: a numba loop nest and a numpy ``einsum`` version.
The module-level names dispatch according to :mod:`chnsadapt._accel`; the
``*_numpy`` and ``*_numba`` variants stay importable for tests and
benchmarks.

Array conventions (``E`` elements, ``Q`` quadrature points, ``B`` local
basis functions):

* ``wq``  -- ``(E, Q)`` quadrature weights already multiplied by the
  Jacobian and any scalar coefficient,
* ``N``   -- ``(Q, B)`` basis values on the reference element,
* ``G``   -- ``(E, Q, B, 2)`` physical basis gradients,
* ``bq``  -- ``(E, Q, 2)`` weighted advecting velocity.
"""

import numpy as np

from ._accel import USE_NUMBA, njit


def weighted_mass_numpy(wq, N):
    return np.einsum("eq,qa,qb->eab", wq, N, N, optimize=True)


def weighted_gradgrad_numpy(wq, G):
    # out[e, i, j, a, b] = sum_q w G[e,q,a,i] G[e,q,b,j]
    return np.einsum("eq,eqai,eqbj->eijab", wq, G, G, optimize=True)


def advection_numpy(bq, G, N):
    # out[e, a, b] = sum_q (b . grad phi_b) phi_a   (a test, b trial)
    return np.einsum("eqk,eqbk,qa->eab", bq, G, N, optimize=True)


@njit(cache=True)
def weighted_mass_numba(wq, N):
    E, Q = wq.shape
    B = N.shape[1]
    out = np.zeros((E, B, B))
    for e in range(E):
        for q in range(Q):
            w = wq[e, q]
            if w == 0.0:
                continue
            for a in range(B):
                wa = w * N[q, a]
                for b in range(B):
                    out[e, a, b] += wa * N[q, b]
    return out


@njit(cache=True)
def weighted_gradgrad_numba(wq, G):
    E, Q = wq.shape
    B = G.shape[2]
    out = np.zeros((E, 2, 2, B, B))
    for e in range(E):
        for q in range(Q):
            w = wq[e, q]
            if w == 0.0:
                continue
            for a in range(B):
                for i in range(2):
                    wai = w * G[e, q, a, i]
                    for b in range(B):
                        for j in range(2):
                            out[e, i, j, a, b] += wai * G[e, q, b, j]
    return out


@njit(cache=True)
def advection_numba(bq, G, N):
    E, Q = bq.shape[0], bq.shape[1]
    B = N.shape[1]
    out = np.zeros((E, B, B))
    for e in range(E):
        for q in range(Q):
            bx = bq[e, q, 0]
            by = bq[e, q, 1]
            for b in range(B):
                adv = bx * G[e, q, b, 0] + by * G[e, q, b, 1]
                if adv == 0.0:
                    continue
                for a in range(B):
                    out[e, a, b] += adv * N[q, a]
    return out


def _contig(*arrays):
    return tuple(np.ascontiguousarray(a, dtype=np.float64) for a in arrays)


if USE_NUMBA:
    # einsum turns the mass kernel into one BLAS product, faster than the loop
    weighted_mass = weighted_mass_numpy

    def weighted_gradgrad(wq, G):
        return weighted_gradgrad_numba(*_contig(wq, G))

    def advection(bq, G, N):
        return advection_numba(*_contig(bq, G, N))

    BACKEND = "numba"
else:
    weighted_mass = weighted_mass_numpy
    weighted_gradgrad = weighted_gradgrad_numpy
    advection = advection_numpy
    BACKEND = "numpy"
