"""Regenerates ett_like.csv: an hourly stand-in with the ETTh1 column layout."""
import csv
import math
import random
from datetime import datetime, timedelta

N = 4000
rng = random.Random(20240611)

def ar1(phi, sd):
    x, out = 0.0, []
    for _ in range(N):
        x = phi * x + rng.gauss(0.0, sd)
        out.append(x)
    return out

drift = ar1(0.999, 0.08)
load_noise = [ar1(0.9, 0.4) for _ in range(6)]
ot_noise = ar1(0.95, 0.9)
shifts = sorted(rng.sample(range(200, N - 200), 5))
shift_sizes = [rng.choice([-1, 1]) * rng.uniform(2.0, 4.0) for _ in shifts]

start = datetime(2016, 7, 1)
with open("ett_like.csv", "w", newline="") as f:
    w = csv.writer(f)
    w.writerow(["date", "HUFL", "HULL", "MUFL", "MULL", "LUFL", "LULL", "OT"])
    for t in range(N):
        day = math.sin(2 * math.pi * t / 24)
        week = math.sin(2 * math.pi * t / 168)
        season = math.sin(2 * math.pi * t / 2800 + 0.6)
        loads = [
            base + amp * day + 0.5 * week + n[t]
            for base, amp, n in zip([5.5, 2.0, 4.5, 1.8, 3.2, 0.8], [2.0, 0.6, 1.6, 0.5, 1.2, 0.2], load_noise)
        ]
        level = sum(s for st, s in zip(shifts, shift_sizes) if t >= st)
        ot = 13.0 + 8.0 * season + 3.0 * day + 1.0 * week + drift[t] + level + ot_noise[t]
        w.writerow([(start + timedelta(hours=t)).strftime("%Y-%m-%d %H:%M:%S")] + [f"{v:.3f}" for v in loads + [ot]])
