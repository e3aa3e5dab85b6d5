"""Probe a trained checkpoint for theta and rank heads by z-token attention to (x_z, y_z)."""
from pathlib import Path

from _common import parser

from iccr import analysis, datagen, training

p = parser(__doc__)
p.add_argument("checkpoint", type=Path)
p.add_argument("--z-values", default="8,15,34,42")
args = p.parse_args()
args.out.mkdir(parents=True, exist_ok=True)
ck = training.load_checkpoint(args.checkpoint)
model = (ck.params, ck.model_cfg)
gc = datagen.GenConfig(seed=args.seed)

for stream in ("post", "mid"):
    res = analysis.probe_layers(model, gc, "theta", stream=stream)
    null = analysis.probe_layers(model, gc, "theta", stream=stream, permute=True)
    analysis.write_json({"probe": res, "permuted": null}, args.out / f"probe_{stream}.json")
    print(stream, "adj R^2 by layer:", " ".join(f"{a:.3f}" for a in res.adj_r2),
          "| permuted max", f"{max(null.adj_r2):.3f}")

summ = analysis.detect_abduction_heads(model, gc, [int(z) for z in args.z_values.split(",")])
analysis.write_json(summ.to_dict(), args.out / "attn.json")
for l, h, m in summ.ranked[:5]:
    print(f"layer {l} head {h}: y_z mass {m:.3f}, x_z mass {summ.x_mass[l, h]:.3f}")
print("qualifying heads:", summ.qualifying or "none")
