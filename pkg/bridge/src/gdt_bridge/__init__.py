from .baselines import ATARI_ACTION_COUNTS, SCORE_TABLE, resolve_task
from .gdtraj import Episode, pack_dataset
from .sources import SourceError, SourceSpec, export, segment_episodes

__all__ = [
    "ATARI_ACTION_COUNTS", "SCORE_TABLE", "resolve_task",
    "Episode", "pack_dataset",
    "SourceError", "SourceSpec", "export", "segment_episodes",
]
