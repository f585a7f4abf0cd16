#!/usr/bin/env python3
"""Completing occluded structure with iterative under-noised editing.

A top-down depth prior only sees the surface shell of a solid building,
so the whole interior is missing from the voxelized prior.  Editing
rounds noise the encoded guide, denoise it with a field pulled toward
the completed scene, and re-encode.  Noising less than the schedule
assumes (under-noising) makes the field treat the missing structure as
residual noise, which completes it far more reliably than the classic
matched setting or noising more than the schedule covers.
"""

import numpy as np

from tiledflow.fixtures import build_cavity_fixture, cavity_recall

fixture = build_cavity_fixture()
hidden = int(fixture.hidden.sum())
print(f"prior shell: {fixture.occ_prior.count()} voxels; "
      f"target: {fixture.occ_target.count()} voxels; hidden: {hidden}")

settings = [
    ("under-noise  (noise 0.6, denoise from 0.8)", dict(t_noise=0.6, t_start=0.8, n_iter=1)),
    ("matched      (noise 0.6, denoise from 0.6)", dict(t_noise=0.6, t_start=0.6, n_iter=1)),
    ("over-noise   (noise 0.8, denoise from 0.6)", dict(t_noise=0.8, t_start=0.6, n_iter=1)),
    ("no editing   (n_iter = 0)", dict(t_noise=0.6, t_start=0.8, n_iter=0)),
]

seeds = range(5)
print(f"\nhidden-region recall over {len(list(seeds))} seeds:")
for label, kwargs in settings:
    recalls = [cavity_recall(fixture, seed=s, **kwargs) for s in range(5)]
    print(f"  {label}: mean {np.mean(recalls):.3f}  (min {min(recalls):.3f}, max {max(recalls):.3f})")

print("\nchaining rounds (under-noise setting):")
for n_iter in (0, 1, 2, 3):
    recall = cavity_recall(fixture, t_noise=0.6, t_start=0.8, n_iter=n_iter, seed=0)
    print(f"  {n_iter} round(s): recall {recall:.3f}")
