"""Finite-difference check of the whole model, one line per parameter group.

Runs the same check as ``refgroup gradcheck --full``: a 32x32 scene, four
tokens, Gumbel noise on, 20 probed entries per group.
"""
import time

from refgroup.harness import model_gradcheck

t0 = time.time()
checks = model_gradcheck(seed=0, image_size=32, n_tokens=4, n_probe=20)
for c in checks:
    print(f"{c.group:<24} probes {c.n_probed:>3}   max rel err {c.max_rel_error:.2e}")
worst = max(c.max_rel_error for c in checks)
print(f"\nworst {worst:.2e} over {len(checks)} groups in {time.time() - t0:.1f}s")
