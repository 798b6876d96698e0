# Temperature of the soft teacher weighting
#
# The soft student mixes the teachers' padded predictions with weights
# softmax(confidence / tau). A small tau trusts the most confident teacher
# almost exclusively; a large one averages everybody, and the student
# inherits each teacher's confident guesses about classes it never saw.

from amalgam import experiments as ex

cfg = ex.paper_analog(seeds=(0,))
rep = ex.prepare(cfg, 0, with_oracle=False)
for tau in ex.TAU_GRID:
    acc = ex.train_student_for(cfg, rep, "muka_soft", f"soft_{tau}", tau=tau)
    print(f"tau {tau:>5}: {acc:.3f}")
