"""
Stabilizing a jittered frame stream
===================================

Each frame is scored against the reference by windowed SSIM. While the
score stays above a threshold the previous homography is reused. Otherwise
the frame is re-aligned: corner features and RANSAC give a rough
homography, and ECC refines it on a down-sampled copy.
"""

# %%
import time

import numpy as np

from urbanflow import imaging, scenegen, stabilize

world = scenegen.gen_world(seed=1, n_pairs=4, pair_spacing_s=3, min_separation_m=5)
render = scenegen.render_frames(world, scenegen.JitterModel(), n_frames=60, t_start=4.0)

# %%
# Estimating a single homography: RANSAC over feature matches, then ECC.
ref, tgt = render.frames[0], render.frames[40]
matches = stabilize.detect_and_match(ref, tgt, radius=48.0)
rough, inliers = stabilize.ransac_homography(matches)
refined = stabilize.ecc_refine(ref, tgt, rough)
truth = render.homographies[40]
print(f"{len(matches)} matches, {len(inliers)} inliers")
print("corner error: RANSAC %.3f px, after ECC %.3f px" % (
    imaging.corner_error(rough, truth, 320, 320), imaging.corner_error(refined.homography, truth, 320, 320)))

# %%
# The whole stream, aligning on a 1/4 down-sampled copy.
cfg = stabilize.StabilizerConfig(ds_factor=4, ssim_threshold=0.95)
start = time.perf_counter()
result = stabilize.stabilize_stream(render.frames, cfg)
print("%.1f s, %d alignments for %d frames" % (time.perf_counter() - start, result.alignment_count,
                                               len(render.frames)))
errors = [imaging.corner_error(h, g, 320, 320) for h, g in zip(result.homographies, render.homographies)]
print("mean corner error %.3f px, worst %.3f px" % (np.mean(errors), np.max(errors)))

# %%
# Down-sampling trades a little accuracy for speed.
for factor in (1, 2, 4, 8):
    start = time.perf_counter()
    h, _ = stabilize.align_frames(ref, tgt, np.eye(3), stabilize.StabilizerConfig(ds_factor=factor))
    print("1/%d: %.3f s, corner error %.3f px" % (factor, time.perf_counter() - start,
                                                 imaging.corner_error(h, truth, 320, 320)))
