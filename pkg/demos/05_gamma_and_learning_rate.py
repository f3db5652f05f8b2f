"""
How sensitive is the outcome to the learning rate?
==================================================

For each gamma, run the benchmark at three learning rates and take the
sample variance of the mean Vendi score across them.  A smaller gamma
weights the anchor term more heavily, which should make the result less
sensitive to the step size.  This runs 12 experiments of 50 trials.

On this 2-D toy the differences are of order 1e-6 to 1e-5 and the ordering
of neighbouring gammas changes from seed to seed; compare the rows for
gamma = 1.0 and 0.7 rather than reading each step.
"""

from pathlib import Path

from cnoise.harness import gamma_stability, load_config

config = load_config(Path(__file__).parent.parent / "configs" / "benchmark.cfg").replace(trials=50)
stab = gamma_stability(config)
print(" gamma   s2(vendi)    s2(mss)      s2(log-density)")
for g in stab.gammas:
    v = stab.variances[g]
    print(f" {g:4.1f}   {v['vendi']:.3e}   {v['mss']:.3e}   {v['fidelity_logdensity']:.3e}")
