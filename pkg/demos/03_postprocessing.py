"""Two ways to average generator outputs: across seeds, and across dropout masks.

Trains three tiny models in memory, then checks on every held-out sample that
the mean of the models is never worse in MSE than the models are on average.

Run:  python3 demos/03_postprocessing.py
"""
import datetime as dt

import numpy as np

from spreadcast import SynthConfig, TrainConfig, TrainedModel, default_arch, mc_dropout_mean, multi_model_mean
from spreadcast import synth_ensemble, train
from spreadcast.data import fit_normalizer, sample_dates
from spreadcast.training import Samples

synth = SynthConfig(grid_h=8, grid_w=16, members=6)
dates = sample_dates(2012, 1, day_stride=12)
runs = [synth_ensemble(synth, d) for d in dates]
data = Samples(dates, np.stack([r.control.values for r in runs]), np.stack([r.spread.values for r in runs]))
n_train = len(dates) - 6
train_set, test_set = data.subset(range(n_train)), data.subset(range(n_train, len(dates)))
norm = fit_normalizer(train_set.control, train_set.spread)
arch = default_arch((16, 8, 16, 1), width=0.0625, ceil_mode=True)

models = []
for seed in range(3):
    res = train(train_set, None, arch, TrainConfig(epochs=2, seed=seed), norm)
    models.append(TrainedModel(res.best_gen, arch, norm))


def mse(a, b):
    return float(np.mean((a - b) ** 2))


print("sample  mean-of-models MSE  average single-model MSE")
for i, d in enumerate(test_set.dates):
    x, y = test_set.control[i], test_set.spread[i].astype(np.float64)
    together = mse(multi_model_mean(models, x), y)
    apart = np.mean([mse(m.predict(x), y) for m in models])
    print(f"{d}  {together:18.3f}  {apart:24.3f}")

x, y = test_set.control[0], test_set.spread[0].astype(np.float64)
single = mse(mc_dropout_mean(models[0], x, n=1), y)
averaged = mse(mc_dropout_mean(models[0], x, n=10), y)
print()
print(f"dropout active, one pass: MSE {single:.3f}; mean of 10 passes: MSE {averaged:.3f}")
