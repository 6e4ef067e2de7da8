#!/usr/bin/env python3
# SPDX-License-Identifier: Apache-2.0
#
# Standalone numpy Canny used once to produce canny_golden.txt. Kept so the
# fixture can be regenerated and audited; the C++ tests only read the text file.

import numpy as np


def pattern():
    y, x = np.mgrid[0:16, 0:16]
    img = np.where(((y // 4) + (x // 4)) % 2 == 0, 0.2, 0.8)
    img[(y - 7.5) ** 2 + (x - 7.5) ** 2 <= 20.25] = 1.0
    return img


def blur(img, sigma):
    r = max(1, int(np.floor(1.5 * sigma + 0.5)))
    k = np.exp(-np.arange(-r, r + 1) ** 2 / (2 * sigma * sigma))
    k /= k.sum()
    p = np.pad(img, ((0, 0), (r, r)), mode="edge")
    h = sum(k[i] * p[:, i:i + img.shape[1]] for i in range(2 * r + 1))
    p = np.pad(h, ((r, r), (0, 0)), mode="edge")
    return sum(k[i] * p[i:i + img.shape[0], :] for i in range(2 * r + 1))


def sobel(img):
    p = np.pad(img, 1, mode="edge")
    H, W = img.shape
    s = lambda dy, dx: p[1 + dy:1 + dy + H, 1 + dx:1 + dx + W]
    gx = (s(-1, 1) + 2 * s(0, 1) + s(1, 1)) - (s(-1, -1) + 2 * s(0, -1) + s(1, -1))
    gy = (s(1, -1) + 2 * s(1, 0) + s(1, 1)) - (s(-1, -1) + 2 * s(-1, 0) + s(-1, 1))
    return gx, gy, np.hypot(gx, gy)


def nms(gx, gy, mag):
    H, W = mag.shape
    out = np.zeros_like(mag)
    ang = np.degrees(np.arctan2(gy, gx)) % 180.0
    for y in range(H):
        for x in range(W):
            m = mag[y, x]
            if m <= 0:
                continue
            a = ang[y, x]
            if 22.5 <= a < 67.5:
                dy, dx = 1, 1
            elif 67.5 <= a < 112.5:
                dy, dx = 1, 0
            elif 112.5 <= a < 157.5:
                dy, dx = 1, -1
            else:
                dy, dx = 0, 1

            def nb(yy, xx):
                return mag[yy, xx] if 0 <= yy < H and 0 <= xx < W else 0.0

            if m > nb(y - dy, x - dx) and m >= nb(y + dy, x + dx):
                out[y, x] = m
    return out


def hysteresis(thin, low, high):
    H, W = thin.shape
    edge = thin >= high
    stack = list(zip(*np.nonzero(edge)))
    while stack:
        y, x = stack.pop()
        for yy in range(y - 1, y + 2):
            for xx in range(x - 1, x + 2):
                if 0 <= yy < H and 0 <= xx < W and not edge[yy, xx] and thin[yy, xx] >= low:
                    edge[yy, xx] = True
                    stack.append((yy, xx))
    return edge.astype(np.uint8)


def main():
    gx, gy, mag = sobel(blur(pattern(), 1.4))
    mask = hysteresis(nms(gx, gy, mag), 0.1, 0.2)
    for row in mask:
        print("".join(str(v) for v in row))


if __name__ == "__main__":
    main()
