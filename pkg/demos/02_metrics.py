# The three scan-level metrics on a toy set of predictions.
import numpy as np

from canmap.evalkit import auc, mae, pearson
from canmap.predictor import ScanPrediction

rng = np.random.default_rng(0)
ages = rng.uniform(20, 90, size=12)

# each scan gets 8 noisy slice predictions; the scan value is their median
scans = [ScanPrediction(f"s{i}", a + rng.normal(0, 4, size=8)) for i, a in enumerate(ages)]
pred = np.array([s.aggregate for s in scans])
print("MAE %.2f years, r %.3f" % (mae(pred, ages), pearson(pred, ages)))

# a site offset moves MAE but leaves the correlation where it was
print("with a +6 year offset: MAE %.2f, r %.3f" % (mae(pred + 6, ages), pearson(pred + 6, ages)))

labels = np.array([0, 0, 1, 1])
print("AUC", auc([0.1, 0.4, 0.35, 0.8], labels))
