"""
Training a bag classifier
=========================

Generate labelled bags, train one model with validation-based snapshot
selection, then estimate generalization with stratified cross-validation.
"""

import numpy as np

from minnsa.bagdata import SynthConfig, stratified_holdout, synth_generate
from minnsa.evaluation import cross_validate
from minnsa.metrics import auc
from minnsa.network import ModelConfig, init_model
from minnsa.training import TrainConfig, predict, train

# %%
# 400 bags of 30-dimensional instances. Positive bags carry a witness
# instance shifted along a hidden direction.
ds = synth_generate(SynthConfig(n_bags=400, p=30, signal_shift=3.0, witness_rate=0.5, seed=1))
print(len(ds), "bags,", ds.labels.sum(), "positive, mean size", ds.sizes.mean())

# %%
# Hold out 20% for testing and 10% of the rest for picking the best epoch.
keep, test = stratified_holdout(ds.labels, 0.2, seed=0)
fit, val = stratified_holdout(ds.labels[keep], 0.1, seed=1)
train_ds, val_ds, test_ds = ds.subset(keep[fit]), ds.subset(keep[val]), ds.subset(test)

model = init_model(ModelConfig(p=30, m_star=100, seed=0))
best, history = train(model, train_ds, val_ds, TrainConfig(epochs=60, seed=0))
print("best epoch", history.best_epoch, "val AUC", round(history.best_metric, 4))
print("first / last train loss", round(history.train_loss[0], 4), round(history.train_loss[-1], 4))

# %%
# Test-set performance and the attention over the largest positive test bag.
pred = predict(best, test_ds)
print("test AUC", round(auc(pred.probabilities, test_ds.labels), 4))
i = int(np.argmax(np.where(test_ds.labels == 1, test_ds.sizes, 0)))
size = test_ds.bags[i].size
print("attention on bag", test_ds.bags[i].bag_id, np.round(pred.attention[i, :size], 3))

# %%
# 5-fold cross-validation with the same settings.
report = cross_validate(ds, ModelConfig(p=30, m_star=100), TrainConfig(epochs=60), k=5, seed=0)
print("fold AUCs", np.round(report.fold_aucs, 4), "mean", round(report.mean_auc, 4))
