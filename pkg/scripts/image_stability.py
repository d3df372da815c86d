"""Plain vs symmetric residual trunks on synthetic images: per-layer 4A-vs-32A divergence.

    python3 scripts/image_stability.py --out runs/image
    python3 scripts/image_stability.py --archs plain_mobile sym_mobile --out runs/mobile
"""
import sys

from _compare import parser, run

from stablequant.experiments import IMAGE_STABILITY

if __name__ == "__main__":
    args = parser(__doc__.splitlines()[0], ("plain_res", "sym_res")).parse_args()
    run(IMAGE_STABILITY, args)
    sys.exit(0)
