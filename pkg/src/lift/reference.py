"""Published full-scale macro-F1 targets, kept for side-by-side reports.

These come from large pretrained backbones on the real corpora. The toy
backbone is not expected to reach them; reports show them next to measured
values and nothing asserts against them.
"""
from __future__ import annotations

SHOTS = (0, 1, 3)
DATASET_ORDER = ("annomi", "lrs", "talklife", "reddit", "cmv")

# (backbone, variant) -> dataset -> (0-shot, 1-shot, 3-shot)
MACRO_F1: dict[tuple[str, str], dict[str, tuple[float, float, float]]] = {
    ("OLMo-1B", "base"): {
        "annomi": (.250, .211, .262), "lrs": (.348, .332, .345), "talklife": (.044, .044, .040),
        "reddit": (.230, .221, .268), "cmv": (.462, .445, .430)},
    ("OLMo-1B", "lift"): {
        "annomi": (.252, .297, .316), "lrs": (.402, .415, .438), "talklife": (.085, .098, .101),
        "reddit": (.265, .285, .309), "cmv": (.468, .486, .501)},
    ("OLMo-7B", "base"): {
        "annomi": (.278, .336, .321), "lrs": (.401, .381, .410), "talklife": (.056, .050, .059),
        "reddit": (.275, .241, .259), "cmv": (.487, .478, .513)},
    ("OLMo-7B", "lift"): {
        "annomi": (.306, .346, .365), "lrs": (.551, .567, .578), "talklife": (.104, .121, .123),
        "reddit": (.283, .301, .333), "cmv": (.543, .545, .564)},
    ("LLaMA-8B", "base"): {
        "annomi": (.262, .428, .406), "lrs": (.424, .402, .435), "talklife": (.223, .221, .302),
        "reddit": (.283, .267, .324), "cmv": (.496, .507, .505)},
    ("LLaMA-8B", "lift"): {
        "annomi": (.311, .496, .526), "lrs": (.481, .489, .503), "talklife": (.262, .291, .346),
        "reddit": (.454, .498, .521), "cmv": (.552, .560, .571)},
    ("Qwen-14B", "base"): {
        "annomi": (.244, .411, .392), "lrs": (.407, .386, .418), "talklife": (.209, .201, .286),
        "reddit": (.272, .259, .314), "cmv": (.512, .524, .538)},
    ("Qwen-14B", "lift"): {
        "annomi": (.303, .485, .512), "lrs": (.463, .471, .486), "talklife": (.249, .272, .321),
        "reddit": (.438, .488, .505), "cmv": (.549, .562, .577)},
}

DEFAULT_BACKBONE = "OLMo-7B"


def reference_target(dataset: str, shots: int, backbone: str = DEFAULT_BACKBONE, variant: str = "lift") -> float | None:
    """Published macro-F1 for a cell, or ``None`` when there is no such cell."""
    row = MACRO_F1.get((backbone, variant), {})
    if dataset not in row or shots not in SHOTS:
        return None
    return row[dataset][SHOTS.index(shots)]
