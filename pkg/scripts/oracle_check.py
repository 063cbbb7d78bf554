"""Generate sequences and track them with the groundtruth-fed head stub.

Any error here comes from crop geometry, windowing or decoding, never from learning.
"""

import argparse
from dataclasses import replace

from afsn.experiment import REFERENCE_SEQUENCE
from afsn.metrics import evaluate_ope, mean_report
from afsn.synth import generate_sequence
from afsn.tracker import OracleModel, TrackerConfig, track_sequence


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sequences", type=int, default=20)
    parser.add_argument("--seed", type=int, default=300)
    parser.add_argument("--gamma", type=float, default=TrackerConfig.gamma)
    args = parser.parse_args()

    reports = []
    for i in range(args.sequences):
        seq = generate_sequence(replace(REFERENCE_SEQUENCE, seed=args.seed + i))
        boxes = track_sequence(seq.frames, seq.truth[0], OracleModel(seq.truth), TrackerConfig(args.gamma))
        r = evaluate_ope(boxes, seq.truth)
        reports.append(r)
        print(f"seed={args.seed + i} auc={r.auc:.4f} precision_at_20={r.precision_at_20:.3f}")
    print(mean_report(reports).to_text(), end="")


if __name__ == "__main__":
    main()
