"""Run the whole pipeline under one root directory and print per-stage wall time.

Stages: train the model, harvest activations, fit SAEs over a K_act sweep,
evaluate fidelity under both protocols, steer, analyse decoding orders,
auto-interpret one SAE, fine-tune and measure SAE transfer, then gather
plot tables. Every stage writes its own manifest under ``--root``.
"""

import argparse
import sys
import time
from pathlib import Path

from dlmlab import cli


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--root", type=Path, required=True)
    ap.add_argument("--config", type=Path, help="TOML config passed to every stage")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--k-act", default="8,16,32,64,80,128", help="SAE sweep budgets")
    ap.add_argument("--layer", type=int, default=2, help="layer used for steering and auto-interp")
    ap.add_argument("--k", type=int, default=32, help="budget used for steering, order and transfer")
    ap.add_argument("--finetune-steps", type=int, default=100)
    ap.add_argument("--corpus", type=Path, help="training text; generated if omitted")
    ap.add_argument("--force", action="store_true")
    args = ap.parse_args()

    root = args.root
    common = ["--seed", str(args.seed)] + (["--config", str(args.config)] if args.config else [])
    common += ["--force"] if args.force else []
    base, acts, saes = root / "base", root / "acts", root / "saes"
    dlm, train, held = base / "dlm.bin", base / "train.txt", base / "heldout.txt"
    sae = saes / f"sae_L{args.layer}_k{args.k}.bin"
    k = str(args.k)
    stages = [
        ("train-dlm", base, ["--corpus", args.corpus] if args.corpus else []),
        ("harvest", acts, ["--dlm", dlm, "--corpus", train]),
        ("train-sae", saes, ["--acts-dir", acts, "--k-act", args.k_act]),
        ("eval-fidelity", root / "fidelity", ["--dlm", dlm, "--sae-dir", saes, "--acts-dir", acts, "--corpus", held,
                                              "--k-act", args.k_act, "--protocol", "denoising",
                                              "--protocol", "rollout"]),
        ("steer", root / "steer", ["--dlm", dlm, "--sae", sae, "--acts", acts / f"acts_L{args.layer}_mask.bin",
                                   "--corpus", held]),
        ("decode-analyze", root / "order", ["--dlm", dlm, "--sae-dir", saes, "--corpus", held, "--k-act", k]),
        ("autointerp", root / "autointerp", ["--dlm", dlm, "--sae", sae, "--corpus", held]),
        ("finetune-dlm", root / "sft", ["--dlm", dlm, "--steps", str(args.finetune_steps)]),
        ("harvest", root / "sft_acts", ["--dlm", root / "sft" / "dlm.bin", "--corpus", train]),
        ("train-sae", root / "sft_saes", ["--acts-dir", root / "sft_acts", "--k-act", k]),
        ("transfer", root / "transfer", ["--target", root / "sft" / "dlm.bin", "--base-saes", saes,
                                         "--sft-saes", root / "sft_saes", "--acts-dir", acts, "--corpus", held,
                                         "--k-act", k]),
        ("plot-data", root / "plots", ["--inputs", root / "fidelity", root / "steer", root / "order",
                                       root / "transfer"]),
    ]
    total = 0.0
    for command, out, extra in stages:
        t0 = time.perf_counter()
        code = cli.main([command, "--out", str(out), *common, *map(str, extra)])
        dt = time.perf_counter() - t0
        total += dt
        print(f"{command:<15} {out.name:<12} exit {code}  {dt:7.1f}s", flush=True)
        if code != 0:
            return code
    print(f"total {total / 60:.1f} min")
    return 0


if __name__ == "__main__":
    sys.exit(main())
