"""Scratch: small end-to-end decomposition to probe optimizer dynamics."""
import time
import numpy as np

from diffcomp.core import PatchLibrary, RgbmImage
from diffcomp.cli import synth_scene
from diffcomp.compositor import composite_hard
from diffcomp.optimizer import TaskInputs, desk_preset, run_task
from diffcomp.metrics import (depth_order_consistent, match_elements, mean_l2)


def disk_patch(sz, color):
    d = np.zeros((sz, sz, 4))
    yy, xx = np.mgrid[0:sz, 0:sz]
    c = (sz - 1) / 2
    m = ((xx - c) ** 2 + (yy - c) ** 2) <= (sz / 2.0 - 0.6) ** 2
    d[..., :3] = np.asarray(color)
    d[..., 3] = m
    d[..., :3] *= m[..., None]
    return RgbmImage(d)


def square_patch(sz, color):
    d = np.zeros((sz, sz, 4))
    yy, xx = np.mgrid[0:sz, 0:sz]
    c = (sz - 1) / 2
    m = (np.abs(xx - c) <= sz / 2 - 1.1) & (np.abs(yy - c) <= sz / 2 - 1.1)
    d[..., :3] = np.asarray(color)
    d[..., 3] = m
    d[..., :3] *= m[..., None]
    return RgbmImage(d)


lib = PatchLibrary(patches=(disk_patch(16, (0.85, 0.25, 0.2)),
                            square_patch(16, (0.2, 0.45, 0.85))),
                   background_color=(0.96, 0.96, 0.93))

seed = 0
canvas = (128, 128)
truth = synth_scene(seed, lib, canvas, 12, rotations="none", allow_overlap=True)
target = composite_hard(truth, lib, canvas)

config = desk_preset(canvas=canvas, n_max=64, schedule_scale=0.1,
                     optimize_orientation=False, optimize_color=False)
print("iters", config.scaled_total_iters(), "removals", config.removal_iterations(),
      "reseeds", config.reseed_iterations())
print("rates", config.effective_rates())

t0 = time.time()
res = run_task("decompose", TaskInputs(library=lib, target=target), config)
print(f"elapsed {time.time()-t0:.1f}s")
print("final losses", res.final_losses)
print("elements", len(res.discrete), "expected", len(truth))
match = match_elements(res.discrete, truth, max_center_distance=1.0)
print("matched", len(match["pairs"]), "fp", len(match["false_positives"]),
      "fn", len(match["false_negatives"]))
print("center errors", [round(e, 3) for e in match["center_errors"]])
print("depth order ok", depth_order_consistent(res.discrete, truth, match["pairs"], lib, canvas))
print("mean l2 discrete vs target", mean_l2(res.discrete_render, target))
print("bg recovered", res.element_set.background_color)
live = [t["live_elements"] for t in res.trace]
print("live trace:", live[::200])
loss = [t["loss"] for t in res.trace]
print("loss trace:", [round(l, 5) for l in loss[::200]])
