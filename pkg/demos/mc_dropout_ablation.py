# Does averaging dropout passes help pick the right teacher?
#
# The teachers here get thirty extra high learning-rate epochs without dropout
# after training, which makes them nearly certain about everything, including
# rows from classes they never saw. A single deterministic pass then often
# trusts the wrong teacher. Averaging sixteen dropout passes softens the
# out-of-specialty predictions more than the in-specialty ones.

import numpy as np

from amalgam import experiments as ex
from amalgam.evaluation import selection_accuracy, uncertainty_histogram
from amalgam.uncertainty import MCConfig

cfg = ex.overconfident()
rows = []
for seed in (0, 1, 2):
    rep = ex.prepare(cfg, seed, with_oracle=False)
    one = selection_accuracy(rep.teachers, rep.partition, rep.test, MCConfig.deterministic())
    mc = selection_accuracy(rep.teachers, rep.partition, rep.test, MCConfig(16, base_seed=seed))
    hist = uncertainty_histogram(rep.teachers, rep.partition, rep.test, MCConfig(16, base_seed=seed))
    rows.append((one, mc, hist.aggregates["single"]["separation"], hist.aggregates["mc"]["separation"]))
    print(f"seed {seed}: right teacher {one:.3f} single pass, {mc:.3f} with 16 passes")

# Separation is the mean normalized uncertainty of the wrong teacher minus
# that of the right one. Bigger means the two are easier to tell apart.

one, mc, sep1, sep16 = np.mean(rows, axis=0)
print(f"mean selection accuracy {one:.3f} -> {mc:.3f}")
print(f"mean separation {sep1:.3f} -> {sep16:.3f}")
