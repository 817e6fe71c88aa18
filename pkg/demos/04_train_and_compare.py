"""Train the no-collaboration, early-fusion and intermediate-fusion models on a
small occlusion set and compare them, including pose noise on the senders.

The defaults take two to three minutes on one core. The numbers are noisy at
this size; the full comparison is `collabmi.experiments.run_suite(SuiteConfig())`.

Run: python3 demos/04_train_and_compare.py [n_train] [epochs]
"""
import sys

from collabmi.experiments import SuiteConfig, run_suite

n_train = int(sys.argv[1]) if len(sys.argv) > 1 else 100
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 12
cfg = SuiteConfig(n_train=n_train, n_test=20, epochs=epochs, seeds=(0,))
print(f"training 4 models on {n_train} scenes for {epochs} epochs, testing on {cfg.n_test}")

out = run_suite(cfg)
print(f"done in {out['seconds']:.0f} s with {out['workers']} worker(s)\n")
print(f"{'mode':<22} {'pose noise':>10} {'AP@0.5':>7} {'AP@0.7':>7} {'bytes/msg':>10}")
for r in out["rows"]:
    print(f"{r['mode']:<22} {r['noise_std']:>10} {r['ap50']:>7.3f} {r['ap70']:>7.3f} {r['comm_bytes']:>10}")
