"""Small constructors shared by the test modules."""

import numpy as np

from deskdetr.boxes import GroundTruthSet


def gt_set(boxes, labels=None, image_id=0):
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    labels = np.zeros(len(boxes), dtype=int) if labels is None else np.asarray(labels)
    return GroundTruthSet.from_arrays(boxes, labels, image_id)
