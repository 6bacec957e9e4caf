"""From a synthetic skeleton to heatmaps, thermal cubes and a rendered frame.

Run: python3 demos/01_heatmaps_and_cubes.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from mofm.config import desk_profile
from mofm.cubes import assemble, segment
from mofm.data import SynthSpec, gen_corpus, prepare
from mofm.heatmap import build_heatmap, condense
from mofm.io import write_pgm

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)
prof = desk_profile()

# one walking person, centred and scaled into the 24x24 canvas
(walk,) = prepare(gen_corpus(SynthSpec(per_class=1, classes=("walk",), seed=3)), prof)
print("keypoints per frame:", walk.coords.shape[1], "frames:", walk.frames)

u = build_heatmap(walk, prof.height, prof.width, prof.sigma)
print("heatmap volume J x F x H x W:", u.shape, "peak", float(u.max()))

# the tokenizer target collapses the joint axis
u_r = condense(u)
print("condensed target F x H x W:", u_r.shape)

cubes = segment(u, prof.geometry)
print(f"{len(cubes)} cubes of shape {cubes.shape[1:]}; non-empty:",
      int((cubes.reshape(len(cubes), -1).max(1) > 0.05).sum()))
assert np.array_equal(assemble(cubes, prof.geometry), u)

for f in (0, prof.frames // 2, prof.frames - 1):
    write_pgm(out / f"walk_frame{f:02d}.pgm", u_r[f])
print("wrote PGM frames to", out)
