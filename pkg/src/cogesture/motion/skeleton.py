from dataclasses import dataclass

import numpy as np

from .. import _kernels
from .rotation import rot6d_to_matrix_batch


@dataclass(frozen=True)
class Skeleton:
    names: tuple
    parents: tuple
    offsets: tuple  # rest-pose offset of each joint from its parent, meters

    @property
    def num_joints(self):
        return len(self.names)

    def index(self, name):
        return self.names.index(name)

    def joint_positions(self, motion):
        """World positions ``(K, J, 3)`` for a Motion on this skeleton."""
        rot = rot6d_to_matrix_batch(motion.joint_rotations)
        return _kernels.forward_kinematics(rot, np.array(self.parents), np.array(self.offsets),
                                           motion.root_displacement)


# pelvis is the root; legs hang below it, arms branch from the spine top
TOY_SKELETON = Skeleton(
    names=("pelvis", "l_hip", "r_hip", "spine", "l_shoulder", "l_elbow", "r_shoulder", "r_elbow"),
    parents=(-1, 0, 0, 0, 3, 4, 3, 6),
    offsets=(
        (0.0, 1.0, 0.0),
        (0.1, -0.05, 0.0),
        (-0.1, -0.05, 0.0),
        (0.0, 0.5, 0.0),
        (0.2, 0.0, 0.0),
        (0.28, 0.0, 0.0),
        (-0.2, 0.0, 0.0),
        (-0.28, 0.0, 0.0),
    ),
)

DEFAULT_PARTITION = {
    "upper": ("l_shoulder", "l_elbow", "r_shoulder", "r_elbow"),
    "lower": ("pelvis", "l_hip", "r_hip"),
    "torso": ("spine",),
}

LEFT_ARM = ("l_shoulder", "l_elbow")
RIGHT_ARM = ("r_shoulder", "r_elbow")


def toy_skeleton(num_joints=8):
    """The named 8-joint toy rig, or a generic chain for other joint counts."""
    if num_joints == 8:
        return TOY_SKELETON
    names = tuple(f"joint{j}" for j in range(num_joints))
    parents = tuple(range(-1, num_joints - 1))
    offsets = ((0.0, 1.0, 0.0),) + tuple((0.0, 0.15, 0.05) for _ in range(num_joints - 1))
    return Skeleton(names, parents, offsets)
