"""Fusion-location grid: single layers and multi-layer suffixes of one stack."""

from _common import parser, settings
from vglab import experiments as E


def main() -> None:
    p = parser(__doc__, "results/locations")
    p.add_argument("--stack", choices=("encoder", "decoder"), default="encoder")
    args = p.parse_args()
    spec, labels = E.location_grid(settings(args), args.stack, suffixes=True)
    report = E.run(spec, f"{args.out}/{args.stack}", workers=args.workers, labels=labels)
    print(E.markdown_table(report))


if __name__ == "__main__":
    main()
