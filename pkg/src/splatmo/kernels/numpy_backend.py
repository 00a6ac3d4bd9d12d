"""Vectorized numpy rasterization kernels.

Exactly mirrors the compiled core: front-to-back alpha blending per blur
sample, with the sequential early-exit rule expressed as a transmittance
mask (a splat contributes iff every earlier one left transmittance at or
above the exit threshold, which matches breaking out of the loop).
"""

import numpy as np

ALPHA_CLIP = 0.999
ALPHA_SKIP = 1.0 / 255.0
TRANSMITTANCE_EXIT = 1e-4


def _tile_pixels(t, ntx, tile, width, height):
    ty, tx = divmod(t, ntx)
    x0, x1 = tx * tile, min((tx + 1) * tile, width)
    y0, y1 = ty * tile, min((ty + 1) * tile, height)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    return x0, x1, y0, y1, xs.ravel().astype(np.float64), ys.ravel().astype(np.float64)


def _sample_weights(px, py, dt, mu, conic, color_alpha, vel):
    """Alpha-blend one time sample for a block of pixels.

    Returns (weights (P, S), a (P, S), G (P, S), dx, dy, Tprefix) with the
    skip/clip/exit rules applied; weights already include transmittance.
    """
    posx = mu[None, :, 0] + dt[:, None] * vel[None, :, 0]
    posy = mu[None, :, 1] + dt[:, None] * vel[None, :, 1]
    dx = px[:, None] - posx
    dy = py[:, None] - posy
    E = -0.5 * (conic[None, :, 0] * dx * dx + conic[None, :, 2] * dy * dy) \
        - conic[None, :, 1] * dx * dy
    G = np.exp(E)
    a = color_alpha[None, :] * G
    np.minimum(a, ALPHA_CLIP, out=a)
    a[a < ALPHA_SKIP] = 0.0
    Tprefix = np.ones_like(a)
    if a.shape[1] > 1:
        np.cumprod(1.0 - a[:, :-1], axis=1, out=Tprefix[:, 1:])
    w = Tprefix * a
    w[Tprefix < TRANSMITTANCE_EXIT] = 0.0
    return w, a, G, dx, dy, Tprefix


def forward(width, height, tile, mu, conic, color, alpha, vel,
            tile_idx, tile_start, e_offsets, t_ro):
    ntx = -(-width // tile)
    nty = -(-height // tile)
    n_samples = len(e_offsets)
    img = np.zeros((height, width, 3), dtype=np.float64)
    for t in range(ntx * nty):
        s, e = tile_start[t], tile_start[t + 1]
        if s == e:
            continue
        ids = tile_idx[s:e]
        x0, x1, y0, y1, px, py = _tile_pixels(t, ntx, tile, width, height)
        acc = np.zeros((px.size, 3), dtype=np.float64)
        m, c, col, al, vl = mu[ids], conic[ids], color[ids], alpha[ids], vel[ids]
        for k in range(n_samples):
            dt = e_offsets[k] + ((py + 0.5) / height - 0.5) * t_ro
            w = _sample_weights(px, py, dt, m, c, al, vl)[0]
            acc += w @ col
        img[y0:y1, x0:x1] = (acc / n_samples).reshape(y1 - y0, x1 - x0, 3)
    return img


def backward(width, height, tile, mu, conic, color, alpha, vel,
             tile_idx, tile_start, e_offsets, t_ro, d_image):
    ntx = -(-width // tile)
    nty = -(-height // tile)
    n = mu.shape[0]
    n_samples = len(e_offsets)
    d_mu = np.zeros((n, 2))
    d_conic = np.zeros((n, 3))
    d_color = np.zeros((n, 3))
    d_alpha = np.zeros(n)
    d_vel = np.zeros((n, 2))
    for t in range(ntx * nty):
        s, e = tile_start[t], tile_start[t + 1]
        if s == e:
            continue
        ids = tile_idx[s:e]
        x0, x1, y0, y1, px, py = _tile_pixels(t, ntx, tile, width, height)
        m, c, col, al, vl = mu[ids], conic[ids], color[ids], alpha[ids], vel[ids]
        # gradient of the sample average
        dC = d_image[y0:y1, x0:x1].reshape(-1, 3) / n_samples  # (P, 3)
        for k in range(n_samples):
            dt = e_offsets[k] + ((py + 0.5) / height - 0.5) * t_ro
            w, a, G, dx, dy, Tpre = _sample_weights(px, py, dt, m, c, al, vl)
            live = w > 0.0  # contributing (pixel, splat) pairs
            # color gradient: dC/dcolor_j = w_j
            d_color[ids] += np.einsum("ps,pc->sc", w, dC)
            # suffix color sums S_j = sum_{l>j} w_l c_l per pixel
            wc = np.einsum("ps,sc->psc", w, col)
            suffix = wc[:, ::-1].cumsum(axis=1)[:, ::-1] - wc
            # d(sample color)/d(a_j) = T_j c_j - S_j / (1 - a_j)
            da = np.einsum("pc,psc->ps",
                           dC, Tpre[:, :, None] * col[None, :, :] - suffix
                           / (1.0 - a[:, :, None]))
            da[~live] = 0.0
            clipped = al[None, :] * G >= ALPHA_CLIP
            da_free = np.where(clipped, 0.0, da)
            d_alpha[ids] += np.einsum("ps,ps->s", da_free, G)
            dE = da_free * a  # dG = da * alpha; dE = dG * G = da * a
            dposx = dE * (c[None, :, 0] * dx + c[None, :, 1] * dy)
            dposy = dE * (c[None, :, 1] * dx + c[None, :, 2] * dy)
            d_mu[ids, 0] += dposx.sum(axis=0)
            d_mu[ids, 1] += dposy.sum(axis=0)
            d_vel[ids, 0] += np.einsum("p,ps->s", dt, dposx)
            d_vel[ids, 1] += np.einsum("p,ps->s", dt, dposy)
            d_conic[ids, 0] += np.einsum("ps,ps->s", dE, -0.5 * dx * dx)
            d_conic[ids, 1] += np.einsum("ps,ps->s", dE, -dx * dy)
            d_conic[ids, 2] += np.einsum("ps,ps->s", dE, -0.5 * dy * dy)
    return d_mu, d_conic, d_color, d_alpha, d_vel
