"""21-point hand skeleton: wrist plus four joints per finger."""

from __future__ import annotations

from dataclasses import dataclass

BONE_CLASSES = ("metacarpal", "proximal", "other")
JOINT_CLASSES = ("wrist", "MCP", "PIP", "DIP", "tip")
FINGER_NAMES = ("thumb", "index", "middle", "ring", "little")


@dataclass(frozen=True)
class HandSkeleton:
    """Keypoint layout used by triangulation, filtering and evaluation.

    Each finger is a 4-joint chain ordered from the knuckle outwards and rooted
    at the wrist. The thumb follows the same positional convention so its
    first bone is checked against the metacarpal limit.
    """

    keypoint_count: int
    wrist: int
    finger_groups: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        flat = [k for g in self.finger_groups for k in g]
        if len(self.finger_groups) != 5 or any(len(g) != 4 for g in self.finger_groups):
            raise ValueError("expected 5 finger groups of 4 keypoints")
        if len(set(flat)) != len(flat):
            raise ValueError("finger groups overlap")
        if self.wrist in flat:
            raise ValueError("wrist cannot belong to a finger group")
        if sorted(flat + [self.wrist]) != list(range(self.keypoint_count)):
            raise ValueError("skeleton must cover every keypoint exactly once")

    @property
    def bone_edges(self) -> list[tuple[int, int, str]]:
        edges = []
        for group in self.finger_groups:
            chain = (self.wrist,) + tuple(group)
            for depth, (parent, child) in enumerate(zip(chain[:-1], chain[1:])):
                edges.append((parent, child, BONE_CLASSES[min(depth, 2)]))
        return edges

    def joint_class(self, keypoint: int) -> str:
        if keypoint == self.wrist:
            return "wrist"
        for group in self.finger_groups:
            if keypoint in group:
                return JOINT_CLASSES[1 + group.index(keypoint)]
        raise ValueError(f"keypoint {keypoint} not in skeleton")

    def finger_of(self, keypoint: int) -> int | None:
        for i, group in enumerate(self.finger_groups):
            if keypoint in group:
                return i
        return None


HAND = HandSkeleton(
    keypoint_count=21,
    wrist=0,
    finger_groups=tuple(tuple(range(1 + 4 * f, 5 + 4 * f)) for f in range(5)),
)
