"""How the merge threshold shapes the store.

Sweeps the similarity threshold s for the threshold variant at a fixed
budget. Very low s collapses everything into one slot; very high s
degenerates to the plain budget-filling policy. The calibrated median
sits in the useful middle.
"""

from kmerge.bench import (
    GeneratorConfig,
    OrderingSpec,
    calibration_config,
    generate_suite,
    threshold_sweep,
)
from kmerge.engine import PolicyConfig
from kmerge.merging import RankPolicy
from kmerge.similarity import calibrate_threshold


def main():
    adapters, tasks = generate_suite(GeneratorConfig())
    held_out, _ = generate_suite(calibration_config())
    calibrated = calibrate_threshold(held_out)

    base = PolicyConfig(
        budget_k=8,
        variant="k_merge_pp",
        threshold_s=0.0,
        rank_policy=RankPolicy(target_rank=4),
    )
    values = [-1.0, 0.0, 0.05, calibrated, 0.5, 0.95, 2.0]
    table = threshold_sweep(adapters, tasks, base, values, OrderingSpec("random", 0))

    print(f"calibrated s = {calibrated:.4f}")
    print()
    print("s          final S   occupied   consistency")
    for row in table:
        tag = "  <- calibrated" if abs(row["s"] - calibrated) < 1e-12 else ""
        print(
            f"{row['s']:+8.4f}  {row['final_score']:8.4f}   {row['occupied']:5d}      "
            f"{row['consistency']:8.4f}{tag}"
        )


if __name__ == "__main__":
    main()
