"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    pass


class NumericFailure(ArithmeticError):
    pass


class FormatError(ValueError):
    """Malformed feature file. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class DegenerateLabels(RuntimeError):
    def __init__(self, video_id, stage):
        which = "any video" if video_id is None else f"video {video_id!r}"
        super().__init__(f"stage {stage}: no pseudo labels selected for {which}")
        self.video_id = video_id
        self.stage = stage


class UndefinedMetric(ValueError):
    pass
