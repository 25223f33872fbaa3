# %% [markdown]
# # COCO-style AP on a tiny hand-checked case, and dataset counts

# %%
import json
from pathlib import Path

from flowdet.data import dataset_stats, load_annotations
from flowdet.metrics import ap_evaluate, giou, iou

fixtures = Path(__file__).resolve().parent.parent / "tests" / "fixtures" if "__file__" in globals() \
    else Path("../tests/fixtures")

# %%
iou([0, 0, 2, 2], [1, 1, 3, 3]), giou([0, 0, 2, 2], [1, 1, 3, 3])

# %% [markdown]
# Three ground truths, five detections: a duplicate and a stray box pull the
# precision envelope down to 0.6 after the first hit.

# %%
fx = json.loads((fixtures / "ap_fixture.json").read_text())
rep = ap_evaluate(fx["detections"], fx["ground_truth"], fx["categories"])
rep.ap50, fx["hand_derivation"]["ap50"]

# %%
print(dataset_stats(load_annotations(fixtures / "eight_categories.json")).to_csv())
