"""Exception hierarchy.

Every error raised for bad input data derives from :class:`SplatForensicsError`
so the CLI can map it to exit code 1.
"""


class SplatForensicsError(Exception):
    pass


# scene model
class NonFiniteInputError(SplatForensicsError):
    pass


class ActivationRangeError(SplatForensicsError):
    pass


class EmptyMaskError(SplatForensicsError):
    pass


class MissingNormStatsError(SplatForensicsError):
    pass


class OutOfRangeError(SplatForensicsError):
    pass


# ply
class PlyError(SplatForensicsError):
    pass


class BadMagicError(PlyError):
    pass


class UnsupportedFormatError(PlyError):
    pass


class MissingPropertyError(PlyError):
    pass


class TruncatedBodyError(PlyError):
    def __init__(self, expected: int, actual: int):
        super().__init__(f"truncated body: expected {expected} bytes, got {actual}")
        self.expected = expected
        self.actual = actual


# codec
class CodecError(SplatForensicsError):
    pass


class CodeOutOfRangeError(CodecError):
    pass


class CorruptPngError(CodecError):
    pass


class ChannelCountMismatchError(CodecError):
    pass


class VersionUnsupportedError(CodecError):
    pass


# dataset
class EmptyInputError(SplatForensicsError):
    pass


class EmptyCaptionError(SplatForensicsError):
    pass


class BadMagnitudeError(SplatForensicsError):
    pass


class ManifestParseError(SplatForensicsError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


class DuplicateIdError(SplatForensicsError):
    def __init__(self, record_id: str, line: int):
        super().__init__(f"duplicate id {record_id!r} on line {line}")
        self.record_id = record_id
        self.line = line


# detector
class ShapeMismatchError(SplatForensicsError):
    pass


class NonFiniteActivationError(SplatForensicsError):
    def __init__(self, block: str):
        super().__init__(f"non-finite activation in block {block}")
        self.block = block


class GroupMapMismatchError(SplatForensicsError):
    pass


class EmptySceneError(SplatForensicsError):
    pass


class SingleClassTrainingSetError(SplatForensicsError):
    pass


class MaskMismatchError(SplatForensicsError):
    pass


class CheckpointError(SplatForensicsError):
    pass


# bench
class EmptyManifestError(SplatForensicsError):
    pass


class NoFakesForEditorError(SplatForensicsError):
    pass


class MissingPredictionError(SplatForensicsError):
    def __init__(self, ids):
        ids = sorted(ids)
        super().__init__(f"missing predictions for {len(ids)} id(s): {', '.join(ids[:10])}")
        self.ids = ids
