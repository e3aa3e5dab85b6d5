"""Pool-size sweep: train on finite latent pools and evaluate on fresh latents, with Ess per pool."""
from _common import gen_cfg, model_cfg, parser, progress, train_cfg

from iccr import analysis

p = parser(__doc__)
p.add_argument("--pools", default="1,4,16,64")
p.add_argument("--dists", default="uniform,normal")
args = p.parse_args()
args.out.mkdir(parents=True, exist_ok=True)
dists = args.dists.split(",")
rows = analysis.diversity_sweep([int(x) for x in args.pools.split(",")], dists, dists, model_cfg(args),
                                train_cfg(args), gen_cfg(args), seqs=args.seqs, own_pool=True, log=progress)
analysis.write_csv(rows, args.out / "diversity.csv")
for r in rows:
    print(f"{r.train_dist:8s} pool={r.pool:4d} Ess={r.ess:7.2f} eval={r.eval_dist:8s} "
          f"MSE {r.mse:8.3f} [{r.ci_lower:.3f}, {r.ci_upper:.3f}]")
