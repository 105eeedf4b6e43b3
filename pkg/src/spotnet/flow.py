"""Two-frame dense motion by polynomial expansion (Farneback), coarse to fine.

Each neighbourhood of an image is approximated by a quadratic
``f(p) ~ p^T A p + b^T p + c``. If the second frame is the first moved by
``d``, then ``b2 = b1 - 2 A d``, which gives ``d`` from a 2x2 system per
pixel after Gaussian averaging over a window.
"""
from __future__ import annotations

import cv2
import numpy as np


def _poly_kernels(n: int, sigma: float) -> tuple[np.ndarray, np.ndarray]:
    x = np.arange(-n, n + 1, dtype=np.float64)
    g = np.exp(-x * x / (2 * sigma * sigma))
    return x, g


def poly_expansion(img: np.ndarray, n: int = 5, sigma: float = 1.1) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel quadratic fit with Gaussian applicability.

    Returns ``A`` with shape (H, W, 2, 2) and ``b`` with shape (H, W, 2),
    coordinates ordered (x, y).
    """
    img = img.astype(np.float64)
    x, g = _poly_kernels(n, sigma)
    # basis 1, x, y, x^2, y^2, xy; Gram matrix of the applicability-weighted basis
    basis = [(0, 0), (1, 0), (0, 1), (2, 0), (0, 2), (1, 1)]
    moments = {k: float(np.sum(g * x ** k)) for k in range(5)}
    gram = np.empty((6, 6))
    for i, (pi, qi) in enumerate(basis):
        for j, (pj, qj) in enumerate(basis):
            gram[i, j] = moments[pi + pj] * moments[qi + qj]
    ginv = np.linalg.inv(gram)

    # correlations of the image with each weighted basis function (separable)
    def corr(px: int, qy: int) -> np.ndarray:
        kx = (g * x ** px).astype(np.float64)
        ky = (g * x ** qy).astype(np.float64)
        # filter2D correlates, which is what the least-squares projection needs
        return cv2.sepFilter2D(img, cv2.CV_64F, kx, ky, borderType=cv2.BORDER_REFLECT)

    proj = np.stack([corr(p, q) for p, q in basis], axis=-1)
    r = proj @ ginv.T
    A = np.empty(img.shape + (2, 2))
    A[..., 0, 0] = r[..., 3]
    A[..., 1, 1] = r[..., 4]
    A[..., 0, 1] = A[..., 1, 0] = r[..., 5] / 2
    b = r[..., 1:3].copy()
    return A, b


def _warp(arr: np.ndarray, flow: np.ndarray) -> np.ndarray:
    h, w = flow.shape[:2]
    gx, gy = np.meshgrid(np.arange(w, dtype=np.float32), np.arange(h, dtype=np.float32))
    mx = gx + flow[..., 0].astype(np.float32)
    my = gy + flow[..., 1].astype(np.float32)
    flat = arr.reshape(h, w, -1).astype(np.float32)
    out = np.stack([cv2.remap(np.ascontiguousarray(flat[..., i]), mx, my, cv2.INTER_LINEAR,
                              borderMode=cv2.BORDER_REPLICATE) for i in range(flat.shape[-1])], axis=-1)
    return out.reshape(arr.shape).astype(np.float64)


def _refine(A1, b1, A2, b2, flow, win_sigma: float, iterations: int) -> np.ndarray:
    for _ in range(iterations):
        A2w = _warp(A2, flow)
        b2w = _warp(b2, flow)
        A = (A1 + A2w) / 2
        db = -0.5 * (b2w - b1) + np.einsum("...ij,...j->...i", A, flow)
        # normal equations, averaged over the window
        ata = np.einsum("...ki,...kj->...ij", A, A)
        atb = np.einsum("...ki,...k->...i", A, db)
        blur = lambda m: cv2.GaussianBlur(m, (0, 0), win_sigma, borderType=cv2.BORDER_REFLECT)
        g11, g12, g22 = blur(ata[..., 0, 0]), blur(ata[..., 0, 1]), blur(ata[..., 1, 1])
        h1, h2 = blur(atb[..., 0]), blur(atb[..., 1])
        reg = 1e-3 * (g11 + g22).mean() + 1e-12
        g11 = g11 + reg
        g22 = g22 + reg
        det = g11 * g22 - g12 * g12
        flow = np.stack([(g22 * h1 - g12 * h2) / det, (g11 * h2 - g12 * h1) / det], axis=-1)
    return flow


def farneback_flow(img1: np.ndarray, img2: np.ndarray, *, levels: int = 3, pyr_scale: float = 0.5,
                   winsize: int = 9, iterations: int = 3, poly_n: int = 2,
                   poly_sigma: float = 1.1) -> np.ndarray:
    """Displacement (dx, dy) per pixel such that ``img2(p + d) ~ img1(p)``."""
    pyr1, pyr2 = [img1.astype(np.float64)], [img2.astype(np.float64)]
    for _ in range(levels - 1):
        h, w = pyr1[-1].shape
        nh, nw = int(round(h * pyr_scale)), int(round(w * pyr_scale))
        if min(nh, nw) < 2 * poly_n + 1:
            break
        for pyr in (pyr1, pyr2):
            smooth = cv2.GaussianBlur(pyr[-1], (0, 0), 1.0 / (2 * pyr_scale))
            pyr.append(cv2.resize(smooth, (nw, nh), interpolation=cv2.INTER_LINEAR))

    win_sigma = winsize / 4.0
    flow = None
    for a, b in zip(reversed(pyr1), reversed(pyr2)):
        h, w = a.shape
        if flow is None:
            flow = np.zeros((h, w, 2))
        else:
            flow = cv2.resize(flow, (w, h), interpolation=cv2.INTER_LINEAR) / pyr_scale
        A1, b1 = poly_expansion(a, poly_n, poly_sigma)
        A2, b2 = poly_expansion(b, poly_n, poly_sigma)
        flow = _refine(A1, b1, A2, b2, flow, win_sigma, iterations)
    return flow.astype(np.float32)
