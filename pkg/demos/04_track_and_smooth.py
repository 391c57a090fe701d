"""
Tracking and smoothing vehicles
===============================

A constant-velocity Kalman filter runs per track. Greedy nearest-neighbour
matching inside a distance gate links detections to tracks. A backward
Rauch-Tung-Striebel pass then smooths each finished track.
"""

# %%
import numpy as np

from urbanflow import tracking
from urbanflow.tracking import KalmanModel, Measurement

dt = 1.0 / 30.0
rng = np.random.default_rng(3)
t = np.arange(150) * dt
paths = {0: np.column_stack([9 * t, np.zeros_like(t)]), 1: np.column_stack([12 - 9 * t, np.full_like(t, 6.0)])}
detections = [Measurement(k, paths[v][k] + rng.normal(0, 0.25, 2), truth_id=v)
              for k in range(len(t)) for v in paths]

# %%
model = KalmanModel.constant_velocity(dt, accel_var=2.0, meas_std=0.25)
tracks = tracking.run_tracker(detections, model)
report = tracking.identity_report(tracks, detections)
print(f"{len(tracks)} tracks, {report.identity_switches} identity switches")

# %%
for track in tracks:
    owner = track.history[0].measurement.truth_id
    truth = paths[owner][track.frames]
    smoothed = tracking.rts_smooth(track, model)
    rms = lambda p: np.sqrt(np.mean(np.sum((p - truth) ** 2, axis=1)))  # noqa: E731
    print("track %d: filtered RMS %.3f m, smoothed %.3f m, jerk %.1f -> %.1f m/s^3" % (
        track.track_id, rms(track.positions()), rms(smoothed.x[:, :2]),
        tracking.rms_jerk(track.positions(), dt), tracking.rms_jerk(smoothed.x[:, :2], dt)))
