"""Forget-gate and visual-transformer ablation of the multi-head model."""

from _common import parser, settings
from vglab import experiments as E


def main() -> None:
    args = parser(__doc__, "results/fg_vtf").parse_args()
    spec = E.PRESETS["fg_vtf"](settings(args, repetitions=3))
    report = E.run(spec, args.out, workers=args.workers)
    print(E.markdown_table(report))


if __name__ == "__main__":
    main()
