"""Write procedural base scenes and a sprite bank for ``scenediff synth``.

    python3 scripts/make_fixtures.py fixtures/ --bases 4 --size 64x128 --sprites 8
"""
import argparse

from scenediff.cli import parse_size
from scenediff.synth import write_procedural_fixtures


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("root")
    ap.add_argument("--bases", type=int, default=4)
    ap.add_argument("--size", default="64x128", help="HxW")
    ap.add_argument("--sprites", type=int, default=8)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()
    bases, bank = write_procedural_fixtures(args.root, args.bases, parse_size(args.size),
                                            args.sprites, args.seed)
    print(f"bases: {bases}\nbank:  {bank}")


if __name__ == "__main__":
    main()
