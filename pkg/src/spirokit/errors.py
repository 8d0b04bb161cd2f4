"""Exception hierarchy shared across the toolkit."""


class SpirokitError(Exception):
    """Base class for all toolkit errors."""


# --- cohort / ingestion ---

class MalformedRecord(SpirokitError):
    def __init__(self, line_no, reason):
        super().__init__(f"record {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class EmptyCohort(SpirokitError):
    pass


class UnlabeledSample(SpirokitError):
    pass


# --- signal / metric computation ---

class FlatSignal(SpirokitError):
    pass


class TooShort(SpirokitError):
    pass


class NonPositiveFvc(SpirokitError):
    pass


class NonPositiveMeasured(SpirokitError):
    pass


class OutOfRange(SpirokitError):
    pass


class MissingMetric(SpirokitError):
    pass


class LlnUndefined(SpirokitError):
    pass


class NoOfficialValues(SpirokitError):
    pass


class BadConfig(SpirokitError):
    pass


# --- neural ---

class TooShortForReceptiveField(SpirokitError):
    pass


class DimensionMismatch(SpirokitError):
    pass


class DivergedLoss(SpirokitError):
    pass


# --- knowledge ---

class EmptyCorpus(SpirokitError):
    pass


# --- prompts / endpoints ---

class TemplateError(SpirokitError):
    pass


class EndpointError(SpirokitError):
    def __init__(self, status, body=""):
        super().__init__(f"endpoint returned status {status}")
        self.status = status
        self.body = body


class EmptyResponse(SpirokitError):
    pass


class EndpointUnreachable(SpirokitError):
    pass


# --- evaluation ---

class InvalidJudgeResponse(SpirokitError):
    pass


class DegenerateLabels(SpirokitError):
    pass


class AllResamplesDegenerate(SpirokitError):
    pass
