"""Enumerations shared across the simulator, campaign engine and analysis."""

from enum import Enum


class Timing(str, Enum):
    DURING = "during"   # pulse after inference start (d > 0)
    BEFORE = "before"   # pulse before inference start (d < 0)

    @classmethod
    def from_delay(cls, delay_s: float) -> "Timing":
        if delay_s == 0:
            raise ValueError("delay_s must be non-zero; its sign selects the timing regime")
        return cls.DURING if delay_s > 0 else cls.BEFORE


class Mode(str, Enum):
    SYNC = "sync"
    ASYNC = "async"


class OutcomeKind(str, Enum):
    NO_FAULT = "no_fault"
    TRANSIENT_FLIP = "transient_flip"
    PERSISTENT = "persistent"
    HANG = "hang"


class Subregime(str, Enum):
    PARTIAL_COLLAPSE = "partial_collapse"
    SATURATED = "saturated_single_class"


class OutcomeClass(str, Enum):
    """Observed trial classes: unchanged, minor SDC, persistent collapse, device failure."""

    C0 = "C0"
    C1 = "C1"
    C2 = "C2"
    C3 = "C3"

    @property
    def index(self) -> int:
        return int(self.value[1])


CLASSES = (OutcomeClass.C0, OutcomeClass.C1, OutcomeClass.C2, OutcomeClass.C3)


def canonical_model(name: str) -> str:
    """Normalise 'ResNet-50', 'resnet_50', 'RESNET50' to 'resnet50'."""
    return name.strip().lower().replace("-", "").replace("_", "").replace(" ", "")


def parse_enum(enum_cls, text):
    if isinstance(text, enum_cls):
        return text
    raw = str(text).strip()
    for candidate in (raw, raw.lower(), raw.upper()):
        try:
            return enum_cls(candidate)
        except ValueError:
            pass
    choices = ", ".join(m.value for m in enum_cls)
    raise ValueError(f"invalid {enum_cls.__name__} {text!r}; expected one of: {choices}")
