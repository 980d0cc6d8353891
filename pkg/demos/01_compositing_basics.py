"""Alpha compositing on synthetic planes.

Walks the core image math: blending one and several foregrounds over a
background, binarization, transition bands, and IoU.
"""

import numpy as np

from mattekit.imageops import (AlphaMatte, Box, ImageRGB, binarize,
                               composite, composite_multi, iou,
                               transition_band)


def soft_disk(size, cy, cx, r, feather=2.5):
    yy, xx = np.mgrid[:size, :size]
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    return AlphaMatte(np.clip((r - dist) / feather + 0.5, 0, 1).astype(np.float32))


size = 96
alpha = soft_disk(size, 40, 44, 22)
fg = ImageRGB(np.broadcast_to(np.array([0.95, 0.55, 0.15], np.float32)[:, None, None],
                              (3, size, size)).copy())
bg = ImageRGB(np.broadcast_to(np.array([0.1, 0.25, 0.45], np.float32)[:, None, None],
                              (3, size, size)).copy())

image = composite(fg, bg, alpha)
print(f"composite: {image.width}x{image.height}, "
      f"center pixel (should be foreground) = "
      f"{image.planes[:, 40, 44].round(3)}")

# blending is exact at the extremes
assert np.array_equal(composite(fg, bg, AlphaMatte(np.ones((size, size),
                                                           np.float32))).planes,
                      fg.planes)
assert np.array_equal(composite(fg, bg, AlphaMatte(np.zeros((size, size),
                                                            np.float32))).planes,
                      bg.planes)
print("alpha=1 reproduces the foreground, alpha=0 the background: ok")

# two disjoint instances blended in one pass
a1 = soft_disk(size, 30, 26, 13)
a2 = soft_disk(size, 64, 68, 13)
fg2 = ImageRGB(np.broadcast_to(np.array([0.2, 0.8, 0.3], np.float32)[:, None, None],
                               (3, size, size)).copy())
multi = composite_multi([fg, fg2], [a1, a2], bg)
print(f"multi-instance composite: instance colors at (30,26) -> "
      f"{multi.planes[:, 30, 26].round(2)}, at (64,68) -> "
      f"{multi.planes[:, 64, 68].round(2)}")

# the transition band hugs the soft rim and grows with the dilation radius
for radius in (0, 2, 5):
    band = transition_band(alpha, radius=radius)
    print(f"transition band radius {radius}: {band.area()} px")

mask = binarize(alpha, 0.5)
box = Box.tight_around(alpha)
print(f"tight box around the disk: ({box.x0},{box.y0})..({box.x1},{box.y1}); "
      f"IoU(box, mask) = {iou(box, mask):.3f}")
