"""Aspects and their class-specific words, plus the default description template."""

ASPECTS = ("scene", "surface", "width", "accessibility")

CLASS_WORDS = {
    "scene": ("field", "vehicles", "alley", "stall", "unknown"),
    "surface": ("normal", "broken", "soil", "unknown"),
    "width": ("normal", "narrow", "extremely narrow", "unknown"),
    "accessibility": ("easy", "hard", "extremely hard"),
}

DEFAULT_TEMPLATE = (
    "The road is in the [CLASS1] scene. The surface is [CLASS2] and the width "
    "is [CLASS3]. It is [CLASS4] to pass through."
)


def class_counts(aspects=ASPECTS):
    return tuple(len(CLASS_WORDS[a]) for a in aspects)


def word_index(aspect, word):
    try:
        return CLASS_WORDS[aspect].index(word)
    except (KeyError, ValueError):
        raise KeyError(f"{word!r} is not a class word of aspect {aspect!r}") from None
