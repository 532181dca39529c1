"""How often does training look at a synthetic view?

The weight rises from 0.1, peaks a quarter of the way in and decays back. It
is read as odds against one ground-truth draw.
"""

# %%
from guidedsplat.curriculum import ScheduleParams, make_rng, mode, sample_source, schedule_table
from guidedsplat.scene import Role

rows = schedule_table(21)
print(" t      w(t)    p(t)")
for _, t, w, p in rows:
    print(f"{t:.2f}  {w:7.4f}  {p:.4f}")
print("peak at t =", mode())

# %% [markdown]
# The clamp reading treats the weight as a probability directly, which pins it
# at 1 across most of the middle of training.

# %%
clamp = schedule_table(21, ScheduleParams(interpretation="clamp"))
print("clamped p:", " ".join(f"{p:.2f}" for *_, p in clamp))

# %%
rng = make_rng(0)
n = 20_000
hits = sum(sample_source(0.25, ScheduleParams(), rng, 8, 24)[0] is Role.SYNTHETIC for _ in range(n))
print(f"empirical synthetic fraction at t=0.25: {hits / n:.4f}")
