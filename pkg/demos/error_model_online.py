# Online adaptation of the disparity error model, and what its quantiles do
# to the uncertainty intervals fed to the safety filter.
#
# Run from the repository root:  python demos/error_model_online.py
import numpy as np

from stereocbf import (CameraRig, Corruption, ErrorModelParams, MatchConfig, RobotPose, Scene, Sphere,
                       TextureSpec, adapt_online, predict, quantile, render_triple)
from stereocbf.errormodel import feature_map, intervals
from stereocbf.scene import corrupt_disparity
from stereocbf.sim import frame_maps

rig = CameraRig()
cfg = MatchConfig(d_max=rig.d_max, uniqueness_ratio=1.1, lr_check=True)
scene = Scene((Sphere((0.9, 0.0, 0.0), 0.25, TextureSpec("value_noise", seed=7)),))

# %% One frame, matched three ways; the wide-baseline map is biased by 2 px
triple, gt = render_triple(scene, RobotPose(), rig)
d12, d23, d13 = frame_maps(triple, cfg)
d13 = corrupt_disparity(d13, Corruption((0, 0, rig.width, rig.height), 2), rig.d_max)
feats = feature_map(triple.I1, triple.I3, d13)
rows, cols = np.nonzero(d13 >= 1)

# %% Start from an uninformed model and adapt on the same frame
params = ErrorModelParams.zeros()
for step in range(301):
    if step % 50 == 0:
        P = predict(params, feats[rows, cols])
        q = quantile(P, 0.99, rig.d_max)
        print(f"step {step:3d}  mean P = {np.round(P.mean(0), 3)}  median q = {int(np.median(q))}")
    params, loss = adapt_online(params, triple, None, 0.001, rig.d_max, maps=(d12, d23, d13), features=feats)

# %% Intervals at confidence 0.99: the true disparity should sit inside
lo, hi, _ = intervals(d13[rows, cols], q, rig.d_max)
truth = gt.d13[rows, cols]
print(f"truth inside its interval at {np.mean((lo <= truth) & (truth <= hi)):.1%} of pixels")
# most misses are backdrop pixels next to the outline that the matching window drags onto the ball
print(f"nearest depth: worst case {rig.fb / hi.max():.3f} m, measured {rig.fb / d13[rows, cols].max():.3f} m, "
      f"true {rig.fb / truth.max():.3f} m")
