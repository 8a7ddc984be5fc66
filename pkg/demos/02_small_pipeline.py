"""End-to-end pipeline on a small grid: synthesize, train two seeds, post-process, score.

Takes about five minutes on one core. The desk-scale run uses the same code with
demos/desk_config.json:

    spreadcast -v pipeline --config demos/desk_config.json

Run:  python3 demos/02_small_pipeline.py [work_dir]
"""
import sys
import tempfile

from spreadcast import config
from spreadcast.workflow import run_pipeline

cfg = config.resolve({
    "data": {"grid_h": 16, "grid_w": 32, "members": 10, "years": 5, "day_stride": 3},
    "arch": {"width": 0.125, "ceil_mode": True},
    "train": {"epochs": 6},
    "pipeline": {"seeds": [0, 1], "mc_dropout": 5},
})
work = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="spreadcast-demo-")
report = run_pipeline(cfg, work)

print(f"outputs in {work}")
print(f"{'method':24s} {'RMSE':>8s} {'SSIM':>8s}")
for method, s in report.summary().items():
    print(f"{method:24s} {s['rmse']:8.3f} {s['ssim']:8.4f}")

print()
print("mean spread integral by lead time (truth vs seed 0)")
curves = report.curves()
for k, h in enumerate(report.lead_hours):
    if k % 3 == 0:
        print(f"{int(h):4d} h  truth {curves['truth'][k, 2]:7.2f}  model {curves['pix2pix3d_seed0'][k, 2]:7.2f}")
