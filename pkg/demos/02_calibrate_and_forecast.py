"""Generate synthetic surveillance data and calibrate the simulator to it.

The generator hides known region/week parameters behind observed weekly
case counts; the calibration network is trained end to end through the
simulator and then forecasts past the training window.  A short epoch
budget keeps this demo quick; push it up for tighter recovery.
"""

import numpy as np

from calypso import calib, synth
from calypso.core import aggregate, metrics

bundle = synth.generate(synth.SynthSpec(n_patches=12, n_regions=3, weeks=60, horizon=4, seed=7))
graph, data = bundle.graph, bundle.data
print(f"{graph.n_patches} patches, {graph.n_regions} regions, "
      f"{data.window} training weeks + {data.horizon} held out")

net = calib.CalibNet(data.features.shape[2], seed=0)
result = calib.train_joint(net, data, graph, calib.TrainConfig(epochs=400, seed=0))
print(f"loss {result.history['loss'][0]:.3g} -> {result.best_loss:.3g} "
      f"(best epoch {result.best_loss_epoch})")

traj = calib.forecast(result.net, data, graph, data.horizon)
window, horizon = data.window, data.horizon
pred = aggregate(traj.weekly_series[:, window:window + horizon], "state", graph)[0]
obs = aggregate(data.holdout_observed(), "state", graph)[0]
print("held-out state series, predicted:", np.round(pred, 0))
print("held-out state series, observed :", np.round(obs, 0))
print("held-out metrics:", {k: round(v, 4) for k, v in metrics(pred, obs).items()})

inferred = calib.infer_params(result.net, data, graph)
print("\ninferred vs true transmission rate at the final training week:")
for rid in graph.region_ids:
    r = graph.region_index[rid]
    print(f"  {rid}: inferred {inferred.beta[r, -1]:.3f}  true {bundle.params.beta[r, window - 1]:.3f}")
