"""Landmark table shared by the synthetic corpus, the models and the reports.

Sides follow the subject's convention: ``_r`` landmarks sit on the subject's
right, which appears on the left half of a frontal image (negative x).
"""

import numpy as np

LANDMARK_NAMES = (
    "brow_outer_r",
    "brow_mid_r",
    "brow_inner_r",
    "brow_inner_l",
    "brow_mid_l",
    "brow_outer_l",
    "eye_outer_r",
    "eye_inner_r",
    "eye_inner_l",
    "eye_outer_l",
    "nose_saddle_r",
    "nose_saddle_l",
    "nose_corner_r",
    "nose_tip",
    "nose_corner_l",
    "mouth_corner_r",
    "lip_upper_outer",
    "mouth_corner_l",
    "lip_upper_inner",
    "lip_lower_inner",
    "lip_lower_outer",
    "chin_tip",
)

N_LANDMARKS = len(LANDMARK_NAMES)

# left <-> right involution used by horizontal flipping
MIRROR_MAP = np.array(
    [5, 4, 3, 2, 1, 0, 9, 8, 7, 6, 11, 10, 14, 13, 12, 17, 16, 15, 18, 19, 20, 21]
)

MIDLINE = (13, 16, 18, 19, 20, 21)
RIGHT_SIDE = (0, 1, 2, 6, 7, 10, 12, 15)
LEFT_SIDE = (3, 4, 5, 8, 9, 11, 14, 17)

# 14-landmark sets kept for rotated heads: midline plus the side facing the
# camera. Positive yaw turns the subject's left side away from the camera.
NEAR_SIDE_POSITIVE_YAW = tuple(sorted(MIDLINE + RIGHT_SIDE))
NEAR_SIDE_NEGATIVE_YAW = tuple(sorted(MIDLINE + LEFT_SIDE))

LANDMARK_GROUPS = {
    "inner_eye_corner": (7, 8),
    "outer_eye_corner": (6, 9),
    "nose_tip": (13,),
    "nose_corner": (12, 14),
    "mouth_corner": (15, 17),
    "chin_tip": (21,),
}


def landmark_names(ids=None):
    if ids is None:
        return list(LANDMARK_NAMES)
    return [LANDMARK_NAMES[i] for i in ids]
