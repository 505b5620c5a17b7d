"""Parameter and MAC table for the decoder, context and backbone variants.

Run: python demos/cost_table.py [size]   (default 224, square input)
"""
import sys

from sgacnet import FULL_RUN, build, count_flops, count_params

VARIANTS = [
    ("R18 SE+SPA147 APC LD", {}),
    ("R18 SE+SPGE APC LD", {"afm": ("SPGE", "SE")}),
    ("R18 SE+SPA147 PPM NDM", {"context": "PPM", "decoder": "NDM"}),
    ("R34 SE+SPA147 APC LD", {"backbone": "R34-NBt1D"}),
]


def main(size=224):
    print(f"{'variant':<24}{'params (M)':>12}{'GMACs':>10}")
    for name, kw in VARIANTS:
        model, store = build(FULL_RUN.model.with_(**kw))
        params = count_params(store).params_total / 1e6
        macs = count_flops(model, (1, size, size)).macs_total / 1e9
        print(f"{name:<24}{params:>12.2f}{macs:>10.2f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 224)
