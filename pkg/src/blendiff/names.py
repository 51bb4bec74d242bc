"""Blendshape naming: the 32 lower-face ARKit-style channels and their mirror pairs."""

ARKIT_32 = (
    "jawForward", "jawLeft", "jawRight", "jawOpen", "mouthClose", "mouthFunnel",
    "mouthPucker", "mouthLeft", "mouthRight", "mouthSmileLeft", "mouthSmileRight",
    "mouthFrownLeft", "mouthFrownRight", "mouthDimpleLeft", "mouthDimpleRight",
    "mouthStretchLeft", "mouthStretchRight", "mouthRollLower", "mouthRollUpper",
    "mouthShrugLower", "mouthShrugUpper", "mouthPressLeft", "mouthPressRight",
    "mouthLowerDownLeft", "mouthLowerDownRight", "mouthUpperUpLeft", "mouthUpperUpRight",
    "cheekPuff", "cheekSquintLeft", "cheekSquintRight", "noseSneerLeft", "noseSneerRight",
)


def symmetric_pairs(names):
    """``(left, right)`` name pairs present in ``names`` (``...Left`` / ``...Right``)."""
    present = set(names)
    return [(n, n[:-4] + "Right") for n in names if n.endswith("Left") and n[:-4] + "Right" in present]


def pair_indices(names, pairs):
    index = {n: i for i, n in enumerate(names)}
    missing = [n for pair in pairs for n in pair if n not in index]
    if missing:
        raise KeyError(f"unknown blendshape names in symmetric pairs: {missing}")
    return [(index[a], index[b]) for a, b in pairs]
