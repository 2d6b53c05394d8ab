"""Text-only vs dot-product vs multi-head fusion on the vision-keyed task."""

from _common import parser, settings
from vglab import experiments as E


def main() -> None:
    args = parser(__doc__, "results/table1").parse_args()
    spec = E.PRESETS["table1"](settings(args, repetitions=3))
    report = E.run(spec, args.out, workers=args.workers)
    print(E.markdown_table(report))


if __name__ == "__main__":
    main()
