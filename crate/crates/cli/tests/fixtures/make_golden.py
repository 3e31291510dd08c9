"""Regenerates the binarization fixture and its golden outputs.

The oracle visits every window pixel directly, clamping coordinates to the
image border, and applies T = m * (1 + k * (s / R - 1)); a pixel below T is
foreground (0), anything else background (255).
"""

import math
import random

WIDTH, HEIGHT = 37, 23


def make_fixture():
    rng = random.Random(20240611)
    img = [[rng.randint(170, 235) for _ in range(WIDTH)] for _ in range(HEIGHT)]
    for y in range(HEIGHT):
        for x in range(WIDTH):
            img[y][x] = max(0, img[y][x] - 2 * x)
    for stroke in range(5):
        x0 = 3 + 7 * stroke
        for t in range(14):
            x, y = x0 + t // 3, 4 + t
            for dx in (0, 1):
                if 0 <= x + dx < WIDTH and y < HEIGHT:
                    img[y][x + dx] = rng.randint(20, 70)
    return img


def sauvola(img, window, k, r):
    h, w = len(img), len(img[0])
    half = window // 2
    n = window * window
    out = []
    for y in range(h):
        row = []
        for x in range(w):
            total = 0
            total_sq = 0
            for wy in range(y - half, y + half + 1):
                for wx in range(x - half, x + half + 1):
                    v = img[min(max(wy, 0), h - 1)][min(max(wx, 0), w - 1)]
                    total += v
                    total_sq += v * v
            mean = total / float(n)
            std = math.sqrt(float(n * total_sq - total * total) / (float(n) * float(n)))
            threshold = mean * (1.0 + k * (std / r - 1.0))
            row.append(0 if img[y][x] < threshold else 255)
        out.append(row)
    return out


def write_pgm(path, img):
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (len(img[0]), len(img)))
        f.write(bytes(v for row in img for v in row))


if __name__ == "__main__":
    fixture = make_fixture()
    write_pgm("fragment.pgm", fixture)
    write_pgm("fragment_w7_k0.3.pgm", sauvola(fixture, 7, 0.3, 128.0))
    write_pgm("fragment_default.pgm", sauvola(fixture, 31, 0.2, 128.0))
