# Two teachers, one student
#
# Each teacher below knows four of the eight classes of a Gaussian mixture.
# Neither can label the other's classes, so padded into the eight-way space
# each one is right on about half the test rows. The student never sees a
# label: it learns from whichever teacher is more certain about a row.

import numpy as np

from amalgam import experiments as ex
from amalgam.data import strip_labels
from amalgam.evaluation import PaddedTeacher, accuracy
from amalgam.uncertainty import MCConfig, assess

# Data, label split, teachers and the fully supervised reference model for seed 0.

cfg = ex.paper_analog()
rep = ex.prepare(cfg, seed=0)
print("label subsets:", rep.partition.subsets)
for i, t in enumerate(rep.teachers):
    print(f"teacher {i + 1} alone: {accuracy(PaddedTeacher(t, rep.partition), rep.test):.3f}")
print(f"supervised reference: {accuracy(rep.oracle, rep.test):.3f}")

# How sure is each teacher? Sixteen dropout passes per teacher, averaged,
# then the entropy is scaled by the log of the teacher's class count so that
# teachers of different sizes compare on one 0..1 scale.

report = assess(rep.teachers, rep.test.features[:5], MCConfig(16, base_seed=0))
print("confidence per teacher, first five test rows:")
print(np.round(report.c, 3))
print("chosen teacher:", report.selected, " true owner:", rep.partition.owner(rep.test.labels[:5]))
print("margin weight v:", np.round(report.v, 3))

# Train the students. The transfer set is the training features with the
# labels stripped off.

x = strip_labels(rep.train)
print(f"transfer set: {len(x)} unlabeled rows")
for method in ("muka_hard", "muka_soft", "vanilla_kd", "uhc"):
    acc = ex.train_student_for(cfg, rep, method)
    print(f"{method:>10}: {acc:.3f}")
