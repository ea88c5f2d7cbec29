"""Fused element-wise loops for the AMP inner iteration.

Each kernel makes a single pass over ``(Pt, K, M)`` arrays; inputs may be
broadcast views with zero strides.
"""

from __future__ import annotations

import math

import numba
import numpy as np


@numba.njit(cache=True)
def denoise_kernel(C, D, mu, tau, gamma, half, lclamp, ga, gc, pi, A, B):
    """Writes posterior mean/variance, support probability and slab moments.

    Returns False if any input entry is non-finite (outputs are then undefined).
    """
    P, K, M = C.shape
    for p in range(P):
        for k in range(K):
            for m in range(M):
                c = C[p, k, m]
                d = D[p, k, m]
                u = mu[p, k, m]
                t = tau[p, k, m]
                g = gamma[p, k, m]
                if not (math.isfinite(c.real) and math.isfinite(c.imag) and math.isfinite(d)
                        and math.isfinite(u.real) and math.isfinite(u.imag)
                        and math.isfinite(t) and math.isfinite(g)):
                    return False
                dt = d + t
                inv = 1.0 / dt
                a = (t * c + u * d) * inv
                b = t * d * inv
                er = c.real - u.real
                ei = c.imag - u.imag
                # log N(c; 0, d) - log N(c; u, d + t), up to the factor ``half``
                L = half * (math.log(d / dt) + (c.real * c.real + c.imag * c.imag) / d
                            - (er * er + ei * ei) * inv)
                if L > lclamp:
                    L = lclamp
                elif L < -lclamp:
                    L = -lclamp
                if g <= 0.0:
                    s = 0.0
                elif g >= 1.0:
                    s = 1.0
                else:
                    x = L + math.log(g / (1.0 - g))
                    if x >= 0.0:
                        s = 1.0 / (1.0 + math.exp(-x))
                    else:
                        z = math.exp(x)
                        s = z / (1.0 + z)
                pi[p, k, m] = s
                A[p, k, m] = a
                B[p, k, m] = b
                ga[p, k, m] = s * a
                gc[p, k, m] = s * ((1.0 - s) * (a.real * a.real + a.imag * a.imag) + b)
    return True


@numba.njit(cache=True)
def em_prior_kernel(pi, A, B, mu_old, tau_old, mu, tau):
    """Prior mean then prior variance (using the new mean), per (p, m) over users."""
    P, K, M = pi.shape
    for p in range(P):
        for m in range(M):
            w = 0.0
            sr = 0.0
            si = 0.0
            for k in range(K):
                s = pi[p, k, m]
                w += s
                sr += s * A[p, k, m].real
                si += s * A[p, k, m].imag
            if w > 0.0:
                ur = sr / w
                ui = si / w
                acc = 0.0
                for k in range(K):
                    dr = A[p, k, m].real - ur
                    di = A[p, k, m].imag - ui
                    acc += pi[p, k, m] * (dr * dr + di * di + B[p, k, m])
                mu[p, 0, m] = complex(ur, ui)
                tau[p, 0, m] = acc / w
            else:
                mu[p, 0, m] = mu_old[p, 0, m]
                tau[p, 0, m] = tau_old[p, 0, m]


@numba.njit(cache=True)
def relative_change(new, old):
    """``sum_p ||new_p - old_p||_F / sum_p ||old_p||_F`` (inf when the denominator is 0)."""
    P, K, M = new.shape
    num = 0.0
    den = 0.0
    for p in range(P):
        a = 0.0
        b = 0.0
        for k in range(K):
            for m in range(M):
                d = new[p, k, m] - old[p, k, m]
                o = old[p, k, m]
                a += d.real * d.real + d.imag * d.imag
                b += o.real * o.real + o.imag * o.imag
        num += math.sqrt(a)
        den += math.sqrt(b)
    if den > 0.0:
        return num / den
    return np.inf
