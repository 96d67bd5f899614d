"""Refine simulator forecasts with the residual recurrent corrector.

The adapter never touches the calibrated model: it reads the stacked
patch/region/state series the simulator produced, learns the residual to
the observations on the training window (mixing teacher forcing with
autoregressive steps), and corrects the full series including the
forecast horizon.
"""

import numpy as np

from calypso import adapter, calib, synth

bundle = synth.generate(synth.SynthSpec(n_patches=12, n_regions=3, weeks=60, horizon=4, seed=7))
graph, data = bundle.graph, bundle.data
window, horizon = data.window, data.horizon

result = calib.train_joint(calib.CalibNet(data.features.shape[2], seed=0),
                           data, graph, calib.TrainConfig(epochs=400, seed=0))
traj = calib.forecast(result.net, data, graph, horizon)

raw = adapter.stack_levels(traj.weekly_series, graph)
truth = adapter.stack_levels(data.observed[:, :window + horizon], graph)
state_row = graph.n_patches + graph.n_regions

net, history = adapter.train_adapter(
    adapter.AdapterNet(seed=0),
    raw[:, :window], truth[:, :window],
    adapter.AdapterTrainConfig(epochs=300, seed=0),
)
print(f"adapter loss {history['loss'][0]:.4f} -> {history['loss'][-1]:.4f}")

corrected = adapter.refine(net, raw)
for label, series in (("raw", raw), ("corrected", corrected)):
    mse = np.mean((series[state_row, window:] - truth[state_row, window:]) ** 2)
    print(f"held-out state MSE, {label}: {mse:.1f}")
