"""The four-arm ablation on the tiny preset, one seed.

The full check (three seeds) lives in the acceptance tests; ``guidedsplat
bench --preset tiny --out runs/tiny`` does the same from the shell.
"""

# %%
import time
from pathlib import Path

from guidedsplat import bench

OUT = Path(__file__).parent / "out" / "ablation"
arms = ["baseline", "naive_synth", "scheduled", "full_uncertainty"]

t0 = time.perf_counter()
rows = bench.run_ablation("tiny", arms, seeds=(0,), out_dir=OUT)
print(f"{time.perf_counter() - t0:.0f}s")

# %%
for arm, value in bench.mean_psnr(rows).items():
    print(f"{arm:18s} {value:6.2f} dB")
print((OUT / "report.csv").read_text())
