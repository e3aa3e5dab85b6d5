"""Train the desk-scale transformer and write its in-context MSE curve next to the OLS and zero baselines."""
from _common import gen_cfg, model_cfg, parser, progress, train_cfg

from iccr import analysis, training

args = parser(__doc__).parse_args()
args.out.mkdir(parents=True, exist_ok=True)
mc, gc = model_cfg(args), gen_cfg(args)
final, trace = training.train(mc, gc, train_cfg(args), checkpoint_dir=args.out / "checkpoints", log=progress)
analysis.write_json(trace.to_dict(), args.out / "trace.json")

lengths = list(range(2, 51, 3))
ev = gc.replace(seed=gc.seed + 1)
rows = []
for name, model in [("transformer", (final.params, mc)), ("zero", analysis.zero_predictor)]:
    for r in analysis.eval_curve(model, ev, lengths, args.seqs).rows():
        rows.append({"predictor": name, **r})
for r in analysis.ols_baseline_curve(ev, [n for n in lengths if n >= 3], args.seqs).rows():
    rows.append({"predictor": "ols", **r})
analysis.write_csv(rows, args.out / "scaled_learning.csv")
for r in rows:
    if r["n"] in (5, 35):
        print(f"{r['predictor']:12s} n={r['n']:2d}  MSE {r['mse']:8.3f}  [{r['ci_lower']:.3f}, {r['ci_upper']:.3f}]")
