"""
Road-aligned coordinates
========================

A road frame is built from a centreline drawn in image pixels. Points map
to (x, y) metres: x runs along the road and y is the signed lateral offset,
positive to the left. Lanes and sections follow from those coordinates.
"""

# %%
import numpy as np

from urbanflow import roadmap

angles = np.radians(np.arange(0, 91, 1.0))
centerline = np.column_stack([500 * np.sin(angles), 500 * (1 - np.cos(angles))]) + 100
frame = roadmap.build_road_frame(centerline, meters_per_pixel=0.1, lane_width=3.5, lanes_per_side=2,
                                 section_boundaries=[30.0, 60.0])
print("road length %.2f m (quarter circle of radius 50 m: %.2f m)" % (frame.length_m, 25 * np.pi))

# %%
# A point 2 m left of the centreline, 40 m along.
px = roadmap.road_to_image((40.0, 2.0), frame)
pos = roadmap.image_to_road(px, frame)
print("pixel", np.round(px, 3), "->", pos)
print(roadmap.assign_lane_section(pos.x, pos.y, frame))

# %%
# Round trip over many random points.
rng = np.random.default_rng(0)
xs, ys = rng.uniform(0, frame.length_m, 1000), rng.uniform(-7, 7, 1000)
x2, y2, ambiguous = frame.to_road(frame.to_image(xs, ys))
print("max round-trip error %.1e m, ambiguous %d" % (np.max(np.hypot(x2 - xs, y2 - ys)), ambiguous.sum()))

# %%
# Masking everything but the road before feature detection.
mask = roadmap.polygon_mask([[0, 0], [60, 0], [60, 40], [0, 40]], (80, 80))
print("masked pixels:", int(mask.sum()))
