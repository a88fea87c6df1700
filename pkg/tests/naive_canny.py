"""Straight-line reference implementation of the five Canny stages.

Everything is explicit per-pixel loops with reflect indexing; the only shared
pieces with the production code are the stage definitions themselves
(grayscale weights, kernels, direction bins, threshold rule), so agreement is
a real cross-check of both index arithmetic and accumulation order.
"""

import numpy as np


def _reflect(i: int, n: int) -> int:
    if i < 0:
        return -i
    if i >= n:
        return 2 * n - 2 - i
    return i


def _gauss5(sigma: float) -> np.ndarray:
    k = np.zeros((5, 5))
    for u in range(5):
        for v in range(5):
            k[u, v] = np.exp(-((u - 2.0) ** 2 + (v - 2.0) ** 2) / (2.0 * sigma**2))
    return k / k.sum()


def _correlate(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    h, w = image.shape
    r = kernel.shape[0] // 2
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for u in range(kernel.shape[0]):
                for v in range(kernel.shape[1]):
                    acc += kernel[u, v] * image[_reflect(i + u - r, h), _reflect(j + v - r, w)]
            out[i, j] = acc
    return out


def naive_canny(pixels: np.ndarray, sigma: float = 1.4, low: float = 0.1, high: float = 0.3) -> np.ndarray:
    h, w = pixels.shape[:2]
    gray = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            if pixels.shape[2] == 1:
                gray[i, j] = pixels[i, j, 0]
            else:
                gray[i, j] = 0.299 * pixels[i, j, 0] + 0.587 * pixels[i, j, 1] + 0.114 * pixels[i, j, 2]

    blurred = _correlate(gray, _gauss5(sigma))
    sobel_x = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
    sobel_y = np.array([[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]])
    gx = _correlate(blurred, sobel_x)
    gy = _correlate(blurred, sobel_y)

    mag = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            mag[i, j] = np.sqrt(gx[i, j] * gx[i, j] + gy[i, j] * gy[i, j])
    peak = mag.max()
    if peak == 0.0:
        return np.zeros((h, w))

    neighbors = {
        0: ((0, -1), (0, 1)),
        1: ((-1, 1), (1, -1)),
        2: ((-1, 0), (1, 0)),
        3: ((-1, -1), (1, 1)),
    }
    nms = np.zeros((h, w))
    for i in range(1, h - 1):
        for j in range(1, w - 1):
            angle = np.degrees(np.arctan2(gy[i, j], gx[i, j])) % 180.0
            b = int(np.floor((angle + 22.5) / 45.0) % 4)
            (du1, dv1), (du2, dv2) = neighbors[b]
            if mag[i, j] > mag[i + du1, j + dv1] and mag[i, j] >= mag[i + du2, j + dv2]:
                nms[i, j] = mag[i, j]

    strong = [(i, j) for i in range(h) for j in range(w) if nms[i, j] > high * peak]
    weak_level = low * peak
    edges = np.zeros((h, w))
    queue = list(strong)
    for i, j in strong:
        edges[i, j] = 1.0
    while queue:
        i, j = queue.pop()
        for du in (-1, 0, 1):
            for dv in (-1, 0, 1):
                ni, nj = i + du, j + dv
                if 0 <= ni < h and 0 <= nj < w and edges[ni, nj] == 0.0 and nms[ni, nj] > weak_level:
                    edges[ni, nj] = 1.0
                    queue.append((ni, nj))
    return edges
