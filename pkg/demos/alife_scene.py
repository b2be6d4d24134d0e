"""Scatter a sprite over a periodic canvas and save one scene as a PNG.

    python3 demos/alife_scene.py [pattern.png] [out.png]
"""
import sys

import numpy as np
from PIL import Image

from eqflow.systems import demo_sprite, make_alife_scene

if len(sys.argv) > 1:
    pattern = np.asarray(Image.open(sys.argv[1]).convert("RGBA"), dtype=float) / 255.0
else:
    pattern = demo_sprite()
out = sys.argv[2] if len(sys.argv) > 2 else "alife_scene.png"

scene = make_alife_scene(pattern, (128, 128), n_patterns=24, rng=np.random.default_rng(0))
print(f"placed {len(scene.placements)} of 24 copies, {scene.occupancy.mean():.1%} of the canvas covered")
Image.fromarray((scene.rgb * 255).astype(np.uint8)).save(out)
print("wrote", out)
