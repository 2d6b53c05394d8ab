"""Train a forget-gate model and histogram its per-sample mean gate scores on the test split."""

from _common import parser, settings
from vglab import experiments as E
from vglab.data import split_corpus
from vglab.model import VGModel
from vglab.training import train


def main() -> None:
    p = parser(__doc__, "results/fg_hist")
    p.add_argument("--bins", type=int, default=20)
    args = p.parse_args()
    s = settings(args, forget_gate="true")
    corpus = E.build_corpus(s, s.seed)
    tr, va, te = split_corpus(corpus, s.split_ratios(), seed=s.seed)
    model = VGModel(s.model_config(len(corpus.vocab)))
    train(model, tr.samples, va.samples, s.schedule())
    res = E.fg_histogram(model, te.samples, bins=args.bins, out_dir=args.out)
    print(E.render_histogram(res["counts"], res["edges"]))


if __name__ == "__main__":
    main()
