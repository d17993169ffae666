"""Post-training invertibility with and without the likelihood term.

Trains the desk-scale model (K=3, L=2, 32x32 synthetic pairs) twice on the
same data, once with the default NLL weight and once with lam=0, then reports
the round-trip error on every training image, the smallest invertible-conv
determinant and actnorm scale and the held-out STRESS/SRCC.

    python3 scripts/lambda_zero_experiment.py --epochs 30 --out lambda_zero.txt
"""

import argparse
import dataclasses
import logging
import time

import numpy as np

from cdflow import autodiff as ad
from cdflow.evaluation import evaluate
from cdflow.exceptions import CDFlowError
from cdflow.flow import FlowConfig, FlowModel, flow_forward, flow_inverse
from cdflow.metric import scale_distances
from cdflow.training import DESK_CONFIG, _stack_slice, gen_synthetic_dataset, split_dataset, train


def flow_metric(model):
    def batch_metric(A, B):
        out = []
        with ad.no_grad():
            for lo in range(0, len(A), 50):
                n = len(A[lo : lo + 50])
                s = flow_forward(np.concatenate([A[lo : lo + 50], B[lo : lo + 50]]), model)
                out.append(scale_distances(_stack_slice(s, 0, n), _stack_slice(s, n, 2 * n))[0].data)
        return np.concatenate(out)

    return batch_metric


def round_trip(model, X):
    worst = 0.0
    with ad.no_grad(), np.errstate(all="ignore"):
        for lo in range(0, len(X), 100):
            back = flow_inverse(flow_forward(X[lo : lo + 100], model), model)
            err = np.max(np.abs(back - X[lo : lo + 100]))
            worst = max(worst, float(err) if np.isfinite(err) else np.inf)
    return worst


def weight_stats(model):
    """Smallest |det W| and smallest actnorm scale magnitude over the flow."""
    dets = [abs(np.linalg.det(p.data)) for k, p in model.params.items() if k.endswith("invconv.weight")]
    scales = [np.min(np.abs(p.data)) for k, p in model.params.items() if k.endswith("actnorm.scale")]
    return min(dets), min(scales)


def run(lam, epochs, train_set, held_out):
    cfg = dataclasses.replace(DESK_CONFIG, lam=lam, epochs=epochs)
    model = FlowModel(FlowConfig(3, 2, 32, 2.0, (32, 32)), seed=0)
    t0 = time.perf_counter()
    try:
        result = train(train_set, cfg, model)
        status, means = "completed", result.epoch_means()
    except CDFlowError as exc:
        status, means = f"aborted: {exc}", []
    lines = [f"lam={lam:g}", f"  training {status} in {time.perf_counter() - t0:.0f} s"]
    if means:
        lines.append(f"  loss_ms first/last epoch {means[0]:.4f} / {means[-1]:.4f}")
    X = np.stack([p.image_a for p in train_set] + [p.image_b for p in train_set])
    lines.append(f"  round trip max error on {len(X)} training images {round_trip(model, X):.3e}")
    det, scale = weight_stats(model)
    lines.append(f"  min |det W| {det:.3e}, min |actnorm scale| {scale:.3e}")
    try:
        rep = evaluate(None, held_out, batch_metric=flow_metric(model))
        lines.append(f"  held-out STRESS {rep.stress:.3f}, SRCC {rep.srcc:.4f}")
    except (CDFlowError, FloatingPointError, ValueError) as exc:
        lines.append(f"  held-out evaluation failed: {exc}")
    return "\n".join(lines)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--epochs", type=int, default=DESK_CONFIG.epochs)
    ap.add_argument("--pairs", type=int, default=500)
    ap.add_argument("--out", help="also write the summary here")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    data = gen_synthetic_dataset(args.pairs, (32, 32), seed=0)
    train_set, held_out = split_dataset(data, 0.8, seed=0)
    text = "\n".join(run(lam, args.epochs, train_set, held_out) for lam in (DESK_CONFIG.lam, 0.0))
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")


if __name__ == "__main__":
    main()
