"""Frame discovery and pairing across directories by filename stem."""

from pathlib import Path
from typing import Dict, List, Sequence, Union

from toolkit.errors import FrameSetError


def list_frames(directory: Union[str, Path], suffix: str) -> Dict[str, Path]:
    """Map stem -> path for every ``*suffix`` file directly inside ``directory``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FrameSetError(f"Frame directory not found: {directory}")
    return {p.stem: p for p in sorted(directory.glob(f"*{suffix}")) if p.is_file()}


def pair_frames(*frame_sets: Dict[str, Path], names: Sequence[str] = ()) -> List[str]:
    """Sorted stems shared by all sets; any asymmetry is an error listing what each side lacks."""
    if not frame_sets:
        return []
    names = list(names) or [f"set{i}" for i in range(len(frame_sets))]
    stems = [set(s) for s in frame_sets]
    union = set().union(*stems)
    problems = []
    for name, present in zip(names, stems):
        missing = sorted(union - present)
        if missing:
            problems.append(f"{name} lacks {missing}")
    if problems:
        raise FrameSetError("Frame sets differ: " + "; ".join(problems))
    return sorted(union)
