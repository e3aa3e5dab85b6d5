"""Train full, attention_only and mlp_only variants under one budget; compare MSE at 35 examples."""
from _common import gen_cfg, model_cfg, parser, progress, train_cfg

from iccr import analysis, training

args = parser(__doc__).parse_args()
args.out.mkdir(parents=True, exist_ok=True)
gc = gen_cfg(args)
rows = []
for variant in ("full", "attention_only", "mlp_only"):
    print(variant)
    mc = model_cfg(args, variant)
    final, _ = training.train(mc, gc, train_cfg(args), log=progress)
    m, lo, hi = analysis.eval_curve((final.params, mc), gc.replace(seed=gc.seed + 1), [35], args.seqs).at(35)
    rows.append({"variant": variant, "params": sum(v.size for v in final.params.values()),
                 "mse_35": m, "ci_lower": lo, "ci_upper": hi})
    print(f"  MSE@35 {m:.3f} [{lo:.3f}, {hi:.3f}]")
analysis.write_csv(rows, args.out / "ablation.csv")
