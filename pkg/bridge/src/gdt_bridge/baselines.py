"""Published per-task baseline scores, kept as exact decimal strings.

The engine normalizes returns as 100 * (raw - random) / (expert - random);
these are the random and expert anchors it expects to find in dataset
metadata. They are stored as strings so the exported files carry the
published figures verbatim rather than a float round-trip of them.
"""

# game -> (random score, expert score)
SCORE_TABLE: dict[str, tuple[str, str]] = {
    "breakout": ("2", "30"),
    "qbert": ("164", "13455"),
    "pong": ("-21", "15"),
    "seaquest": ("68", "42055"),
    "halfcheetah": ("-280.2", "12135"),
    "hopper": ("-20.3", "3234.3"),
    "walker": ("1.6", "4592.3"),
}

ATARI_GAMES = ("breakout", "qbert", "pong", "seaquest")
D4RL_GAMES = ("halfcheetah", "hopper", "walker")

# Minimal ALE action-set sizes; replay data indexes into these.
ATARI_ACTION_COUNTS = {"breakout": 4, "pong": 6, "qbert": 6, "seaquest": 18}


def resolve_task(kind: str, task: str) -> tuple[str, str, str]:
    """Map a task name like "hopper-medium" to (game, random, expert).

    The game is the first dash-separated token, with the "2d" suffix of
    walker2d dropped so all Walker variants share one table row.
    """
    game = task.split("-", 1)[0].lower()
    if game.endswith("2d"):
        game = game[:-2]
    known = ATARI_GAMES if kind == "atari" else D4RL_GAMES
    if game not in known:
        raise KeyError(
            f"task {task!r} does not resolve to a known {kind} game; "
            f"known: {', '.join(known)}")
    random_score, expert_score = SCORE_TABLE[game]
    return game, random_score, expert_score
