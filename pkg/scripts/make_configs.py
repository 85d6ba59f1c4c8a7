"""Generate the shipped instance configs from the published cluster parameters.

Run from the repository root:

    python3 scripts/make_configs.py

Both files are written deterministically from fixed seeds.
"""
from __future__ import annotations

import argparse
import json
import math
from pathlib import Path

import numpy as np

# alpha_j / a_1 per storage node, 1/s
ALPHA_OVER_A1 = [18.238, 24.062, 11.950, 17.053, 26.191, 23.906,
                 27.006, 21.381, 9.910, 24.959, 26.529, 23.807]
SIZES = [6.0, 11.0, 19.2, 31.2, 41.0, 56.2]     # Mb per 4 s segment
BETA_A1 = 0.010                                  # s, shift for a level-1 chunk
TAU = 4.0
N, K = 7, 4

# gradients at this scale are small relative to the block sizes, so the
# proximal weights are loosened from 1.0 to keep outer iterations productive
DESK_SOLVER = {
    "theta": 1e-7,
    "reg": {"q": 0.01, "p": 0.01, "t": 0.001, "b": 1.0, "w": 0.01},
}


def video_lengths(rng: np.random.Generator, count: int, scale: float, limit: float) -> list[int]:
    """Pareto(shape 2) durations below ``limit`` seconds, in whole segments."""
    out: list[int] = []
    while len(out) < count:
        secs = scale * (1.0 + rng.pareto(2.0))
        if secs < limit:
            out.append(int(math.ceil(secs / TAU)))
    return out


def build(r: int, streams: int, scale: float, limit: float, rates: tuple[float, float],
          startup: float, seed: int, solver: dict) -> dict:
    rng = np.random.default_rng(seed)
    a1 = SIZES[0]
    servers = [
        {"id": j + 1, "alpha_base": round(v * a1, 6), "beta_base": BETA_A1 / a1,
         "num_streams": streams}
        for j, v in enumerate(ALPHA_OVER_A1)
    ]
    lengths = video_lengths(rng, r, scale, limit)
    videos = []
    for i in range(r):
        place = sorted(int(x) + 1 for x in rng.choice(len(servers), N, replace=False))
        videos.append({
            "id": i + 1,
            "lambda": rates[0] if i < r // 2 else rates[1],
            "segments": lengths[i],
            "n": N,
            "k": K,
            "placement": place,
        })
    return {
        "servers": servers,
        "qualities": SIZES,
        "videos": videos,
        "streaming": {"tau": TAU, "startup_delay": startup},
        "solver": solver,
    }


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out-dir", default="configs")
    args = ap.parse_args(argv)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    desk = build(r=50, streams=5, scale=30.0, limit=360.0, rates=(0.004, 0.006),
                 startup=10.0, seed=2017, solver=DESK_SOLVER)
    full = build(r=1000, streams=20, scale=300.0, limit=3600.0, rates=(0.002, 0.003),
                 startup=10.0, seed=2017, solver={"theta": 1e-7})
    for name, doc in (("desk.json", desk), ("full_scale.json", full)):
        (out / name).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        print(f"wrote {out / name}")


if __name__ == "__main__":
    main()
