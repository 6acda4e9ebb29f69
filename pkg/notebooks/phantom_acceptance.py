"""
aortaseg phantom acceptance run.

Trains the canonical four-class and two-class networks on six phantoms,
selects them on two more and tests them on the last two. Prints PASS or
FAIL for the accuracy targets, the two-class comparison and the
segmentation time of a full-size phantom.
"""

# import libraries
import logging
import sys

from aortaseg import TrainConfig, evaluate, make_dataset, segment, train
from aortaseg.metrics import summarise_reports
from aortaseg.volume import MERGED_NAME, class_names

logging.basicConfig(level=logging.INFO)

# Acceptance settings
CASES = 10
SEED = 2026
ITERATIONS = 10000
MIN_DICE = 0.85
MAX_ASSD_MM = 2.0
TWO_CLASS_MARGIN = 0.02
MAX_SECONDS = 300.0


def verdict(passed: bool) -> str:
    """PASS or FAIL."""
    return "PASS" if passed else "FAIL"


# Phantoms
# Cases 0-5 train, 6-7 validate and 8-9 are held out.
print("\nGenerating phantoms.")
phantoms = make_dataset(CASES, seed=SEED)
training = [p.pair for p in phantoms[:6]]
validation = [p.pair for p in phantoms[6:8]]
testing = phantoms[8:]

# Training
# Both networks see the same sub-image draws; the log keeps the loss of
# every iteration and the validation Dice every 500.
summaries = {}
for class_count in (4, 2):
    print(f"\nTraining the {class_count}-class network.")
    config = TrainConfig(
        iterations=ITERATIONS,
        batch_size=16,
        learning_rate=0.001,
        seed=SEED,
        validation_interval=500,
        class_count=class_count,
    )
    net, log = train(training, validation, config)
    curve = log.to_dataframe().dropna()
    print(curve.round(4).to_string())
    reports = []
    for case in testing:
        result = segment(net, case.volume)
        reports.append(evaluate(result.labels, case.labels))
        print(reports[-1])
    summaries[class_count] = summarise_reports(reports)

# Four-class accuracy
# The mean over the held-out phantoms must reach the Dice and ASSD targets
# for every aorta segment.
failures = 0
four = summaries[4]
print("\nFour-class network on held-out phantoms")
print(four.round(4))
for name in class_names(4)[1:]:
    dice, assd_mm = four.loc[name, "dice_mean"], four.loc[name, "assd_mean"]
    passed = dice >= MIN_DICE and assd_mm <= MAX_ASSD_MM
    failures += not passed
    print(
        f"{verdict(passed)} {name}: dice={dice:.4f} (>= {MIN_DICE}), "
        f"assd={assd_mm:.3f} mm (<= {MAX_ASSD_MM})"
    )

# Two-class comparison
# Both networks are scored on the merged thoracic aorta.
merged_two = summaries[2].loc[MERGED_NAME, "dice_mean"]
merged_four = four.loc[MERGED_NAME, "dice_mean"]
passed = merged_two >= merged_four - TWO_CLASS_MARGIN
failures += not passed
print(
    f"\n{verdict(passed)} two-class merged dice {merged_two:.4f} "
    f">= four-class {merged_four:.4f} - {TWO_CLASS_MARGIN}"
)

# Throughput
# Tri-planar segmentation of the default 128 x 96 x 96 phantom.
full_size = phantoms[0].volume
result = segment(net, full_size, threads=1)
passed = result.seconds < MAX_SECONDS
failures += not passed
print(
    f"{verdict(passed)} {full_size.dims} segmented in {result.seconds:.1f} s "
    f"(< {MAX_SECONDS:.0f} s)"
)

sys.exit(1 if failures else 0)
