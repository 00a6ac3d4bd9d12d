# cython: boundscheck=False, wraparound=False, cdivision=True
# cython: language_level=3
"""Compiled rasterization core.

Same contract as the numpy backend: front-to-back alpha blending per
blur sample with the 0.999 opacity clip, the 1/255 skip rule, and the
1e-4 transmittance exit, averaged over samples. Pixel loops run
sequentially so results are deterministic.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()

cdef double ALPHA_CLIP = 0.999
cdef double ALPHA_SKIP = 1.0 / 255.0
cdef double TRANSMITTANCE_EXIT = 1e-4
# exp(-10) < (1/255); with alpha < 1 such splats always hit the skip rule
cdef double NEGLIGIBLE_LOG = -10.0


cdef inline double _clip_alpha(double a) nogil:
    return ALPHA_CLIP if a > ALPHA_CLIP else a


def forward(int width, int height, int tile,
            object mu_in, object conic_in, object color_in, object alpha_in,
            object vel_in, object tile_idx_in, object tile_start_in,
            object e_offsets_in, double t_ro):
    cdef double[:, ::1] mu = np.ascontiguousarray(mu_in, dtype=np.float64)
    cdef double[:, ::1] conic = np.ascontiguousarray(conic_in, dtype=np.float64)
    cdef double[:, ::1] color = np.ascontiguousarray(color_in, dtype=np.float64)
    cdef double[::1] alpha = np.ascontiguousarray(alpha_in, dtype=np.float64)
    cdef double[:, ::1] vel = np.ascontiguousarray(vel_in, dtype=np.float64)
    cdef int[::1] tile_idx = np.ascontiguousarray(tile_idx_in, dtype=np.int32)
    cdef int[::1] tile_start = np.ascontiguousarray(tile_start_in, dtype=np.int32)
    cdef double[::1] e_offsets = np.ascontiguousarray(e_offsets_in, dtype=np.float64)

    cdef int ntx = (width + tile - 1) // tile
    cdef int nty = (height + tile - 1) // tile
    cdef int n_samples = e_offsets.shape[0]
    out = np.zeros((height, width, 3), dtype=np.float64)
    cdef double[:, :, ::1] img = out

    cdef int t, s, e, x0, x1, y0, y1, x, y, k, i, j
    cdef double px, py, dt, T, a, G, E, dx, dy, w
    cdef double acc0, acc1, acc2, inv_n
    inv_n = 1.0 / n_samples
    with nogil:
        for t in range(ntx * nty):
            s = tile_start[t]
            e = tile_start[t + 1]
            if s == e:
                continue
            x0 = (t % ntx) * tile
            y0 = (t // ntx) * tile
            x1 = min(x0 + tile, width)
            y1 = min(y0 + tile, height)
            for y in range(y0, y1):
                py = y
                for x in range(x0, x1):
                    px = x
                    acc0 = 0.0
                    acc1 = 0.0
                    acc2 = 0.0
                    for k in range(n_samples):
                        dt = e_offsets[k] + ((py + 0.5) / height - 0.5) * t_ro
                        T = 1.0
                        for i in range(s, e):
                            if T < TRANSMITTANCE_EXIT:
                                break
                            j = tile_idx[i]
                            dx = px - (mu[j, 0] + dt * vel[j, 0])
                            dy = py - (mu[j, 1] + dt * vel[j, 1])
                            E = -0.5 * (conic[j, 0] * dx * dx
                                        + conic[j, 2] * dy * dy) \
                                - conic[j, 1] * dx * dy
                            if E < NEGLIGIBLE_LOG:
                                continue
                            G = exp(E)
                            a = _clip_alpha(alpha[j] * G)
                            if a < ALPHA_SKIP:
                                continue
                            w = T * a
                            acc0 += w * color[j, 0]
                            acc1 += w * color[j, 1]
                            acc2 += w * color[j, 2]
                            T *= 1.0 - a
                    img[y, x, 0] = acc0 * inv_n
                    img[y, x, 1] = acc1 * inv_n
                    img[y, x, 2] = acc2 * inv_n
    return out


def backward(int width, int height, int tile,
             object mu_in, object conic_in, object color_in, object alpha_in,
             object vel_in, object tile_idx_in, object tile_start_in,
             object e_offsets_in, double t_ro, object d_image_in):
    cdef double[:, ::1] mu = np.ascontiguousarray(mu_in, dtype=np.float64)
    cdef double[:, ::1] conic = np.ascontiguousarray(conic_in, dtype=np.float64)
    cdef double[:, ::1] color = np.ascontiguousarray(color_in, dtype=np.float64)
    cdef double[::1] alpha = np.ascontiguousarray(alpha_in, dtype=np.float64)
    cdef double[:, ::1] vel = np.ascontiguousarray(vel_in, dtype=np.float64)
    cdef int[::1] tile_idx = np.ascontiguousarray(tile_idx_in, dtype=np.int32)
    cdef int[::1] tile_start = np.ascontiguousarray(tile_start_in, dtype=np.int32)
    cdef double[::1] e_offsets = np.ascontiguousarray(e_offsets_in, dtype=np.float64)
    cdef double[:, :, ::1] d_image = np.ascontiguousarray(d_image_in, dtype=np.float64)

    cdef int n = mu.shape[0]
    cdef int ntx = (width + tile - 1) // tile
    cdef int nty = (height + tile - 1) // tile
    cdef int n_samples = e_offsets.shape[0]

    d_mu_out = np.zeros((n, 2), dtype=np.float64)
    d_conic_out = np.zeros((n, 3), dtype=np.float64)
    d_color_out = np.zeros((n, 3), dtype=np.float64)
    d_alpha_out = np.zeros(n, dtype=np.float64)
    d_vel_out = np.zeros((n, 2), dtype=np.float64)
    cdef double[:, ::1] d_mu = d_mu_out
    cdef double[:, ::1] d_conic = d_conic_out
    cdef double[:, ::1] d_color = d_color_out
    cdef double[::1] d_alpha = d_alpha_out
    cdef double[:, ::1] d_vel = d_vel_out

    cdef int t, s, e, x0, x1, y0, y1, x, y, k, i, j
    cdef double px, py, dt, T, a, G, E, dx, dy, w
    cdef double C0, C1, C2, A0, A1, A2
    cdef double dC0, dC1, dC2, da, dE, dposx, dposy, inv_om
    cdef double inv_n = 1.0 / n_samples
    with nogil:
        for t in range(ntx * nty):
            s = tile_start[t]
            e = tile_start[t + 1]
            if s == e:
                continue
            x0 = (t % ntx) * tile
            y0 = (t // ntx) * tile
            x1 = min(x0 + tile, width)
            y1 = min(y0 + tile, height)
            for y in range(y0, y1):
                py = y
                for x in range(x0, x1):
                    px = x
                    dC0 = d_image[y, x, 0] * inv_n
                    dC1 = d_image[y, x, 1] * inv_n
                    dC2 = d_image[y, x, 2] * inv_n
                    if dC0 == 0.0 and dC1 == 0.0 and dC2 == 0.0:
                        continue
                    for k in range(n_samples):
                        dt = e_offsets[k] + ((py + 0.5) / height - 0.5) * t_ro
                        # first pass: total blended color of this sample
                        C0 = 0.0
                        C1 = 0.0
                        C2 = 0.0
                        T = 1.0
                        for i in range(s, e):
                            if T < TRANSMITTANCE_EXIT:
                                break
                            j = tile_idx[i]
                            dx = px - (mu[j, 0] + dt * vel[j, 0])
                            dy = py - (mu[j, 1] + dt * vel[j, 1])
                            E = -0.5 * (conic[j, 0] * dx * dx
                                        + conic[j, 2] * dy * dy) \
                                - conic[j, 1] * dx * dy
                            if E < NEGLIGIBLE_LOG:
                                continue
                            G = exp(E)
                            a = _clip_alpha(alpha[j] * G)
                            if a < ALPHA_SKIP:
                                continue
                            w = T * a
                            C0 += w * color[j, 0]
                            C1 += w * color[j, 1]
                            C2 += w * color[j, 2]
                            T *= 1.0 - a
                        # second pass: gradients via suffix sums
                        A0 = 0.0
                        A1 = 0.0
                        A2 = 0.0
                        T = 1.0
                        for i in range(s, e):
                            if T < TRANSMITTANCE_EXIT:
                                break
                            j = tile_idx[i]
                            dx = px - (mu[j, 0] + dt * vel[j, 0])
                            dy = py - (mu[j, 1] + dt * vel[j, 1])
                            E = -0.5 * (conic[j, 0] * dx * dx
                                        + conic[j, 2] * dy * dy) \
                                - conic[j, 1] * dx * dy
                            if E < NEGLIGIBLE_LOG:
                                continue
                            G = exp(E)
                            a = _clip_alpha(alpha[j] * G)
                            if a < ALPHA_SKIP:
                                continue
                            w = T * a
                            A0 += w * color[j, 0]
                            A1 += w * color[j, 1]
                            A2 += w * color[j, 2]
                            d_color[j, 0] += w * dC0
                            d_color[j, 1] += w * dC1
                            d_color[j, 2] += w * dC2
                            if alpha[j] * G < ALPHA_CLIP:
                                inv_om = 1.0 / (1.0 - a)
                                da = dC0 * (T * color[j, 0] - (C0 - A0) * inv_om) \
                                    + dC1 * (T * color[j, 1] - (C1 - A1) * inv_om) \
                                    + dC2 * (T * color[j, 2] - (C2 - A2) * inv_om)
                                d_alpha[j] += da * G
                                dE = da * a
                                dposx = dE * (conic[j, 0] * dx + conic[j, 1] * dy)
                                dposy = dE * (conic[j, 1] * dx + conic[j, 2] * dy)
                                d_mu[j, 0] += dposx
                                d_mu[j, 1] += dposy
                                d_vel[j, 0] += dt * dposx
                                d_vel[j, 1] += dt * dposy
                                d_conic[j, 0] += dE * (-0.5 * dx * dx)
                                d_conic[j, 1] += dE * (-dx * dy)
                                d_conic[j, 2] += dE * (-0.5 * dy * dy)
                            T *= 1.0 - a
                    # (gradient of the sample average is already folded into dC)
    return d_mu_out, d_conic_out, d_color_out, d_alpha_out, d_vel_out
