"""Real visual features vs uniform noise features vs the text-only baseline."""

from _common import parser, settings
from vglab import experiments as E


def main() -> None:
    args = parser(__doc__, "results/noise").parse_args()
    spec = E.PRESETS["noise"](settings(args, repetitions=3))
    report = E.run(spec, args.out, workers=args.workers)
    print(E.markdown_table(report))


if __name__ == "__main__":
    main()
