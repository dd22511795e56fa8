"""Memorize four 32^3 phantoms with the full model and report train Dice.

    python scripts/run_overfit.py [--epochs 300] [--target 0.9] [--out overfit.agck]
"""
import argparse
import time

from agfanet.data import PhantomSpec, Sample, generate_phantom, normalize
from agfanet.metrics import count_components
from agfanet.model import build_network, named_config
from agfanet.training import TrainConfig, TrainRun, checkpoint_save, evaluate, predict, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=300)
    ap.add_argument("--target", type=float, default=0.9, help="stop once train Dice reaches this")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None, help="optional checkpoint path")
    args = ap.parse_args()

    data = []
    for i in range(4):
        s = generate_phantom(PhantomSpec(seed=i))
        data.append(Sample(normalize(s.volume), s.mask, s.id))
    cfg = named_config("agfa", 8)
    net = build_network(cfg, args.seed)
    t0 = time.perf_counter()

    def check(run, net):
        if run.next_epoch % 5:
            return False
        dice = evaluate(net, data).raw.dice
        print(f"epoch {run.next_epoch:4d}  loss {run.history[-1].total:.4f}  train dice {dice:.4f}  "
              f"{time.perf_counter() - t0:.0f}s", flush=True)
        return dice >= args.target

    run = train(TrainRun(cfg, TrainConfig(epochs=args.epochs, seed=args.seed)), data, net, on_epoch=check)
    res = evaluate(net, data)
    comps = [count_components(predict(net, s.volume, postprocess=True).values) for s in data]
    print(f"final: epochs {run.next_epoch}, dice {res.raw.dice:.4f} (post-processed {res.post.dice:.4f}), "
          f"components {comps}")
    if args.out:
        checkpoint_save(net, run, args.out)


if __name__ == "__main__":
    main()
