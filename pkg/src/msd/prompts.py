"""Template prompts over the closed (content, style) vocabulary and rule-based rewriting."""

from __future__ import annotations

from .errors import UnknownTemplate

CONTENTS = ("walk", "run", "jump", "wave", "kick")
STYLES = ("neutral", "old", "proud", "angry", "depressed")

CONTENT_PHRASES = {
    "walk": "a person is walking",
    "run": "a person is running",
    "jump": "a person jumps",
    "wave": "a person waves",
    "kick": "a person is kicking",
}

# bidirectional adverb dictionary
STYLE_ADVERBS = {
    "neutral": "neutrally",
    "old": "like an old person",
    "proud": "proudly",
    "angry": "angrily",
    "depressed": "in depression",
}
ADVERB_STYLES = {v: k for k, v in STYLE_ADVERBS.items()}


def render_prompt(content: str, style: str) -> str:
    try:
        return f"{CONTENT_PHRASES[content]} {STYLE_ADVERBS[style]}"
    except KeyError as exc:
        raise UnknownTemplate(f"no template for ({content!r}, {style!r})") from exc


def parse_prompt(text: str) -> tuple[str, str]:
    """Inverse of :func:`render_prompt`."""
    for content, phrase in CONTENT_PHRASES.items():
        if not text.startswith(phrase + " "):
            continue
        style = ADVERB_STYLES.get(text[len(phrase) + 1 :])
        if style is not None:
            return content, style
    raise UnknownTemplate(f"text does not match any template: {text!r}")


def stylize_prompt(text: str, style: str) -> str:
    content, _ = parse_prompt(text)
    return render_prompt(content, style)


def neutralize_prompt(text: str) -> str:
    return stylize_prompt(text, "neutral")


def all_prompts() -> list[str]:
    return [render_prompt(c, s) for c in CONTENTS for s in STYLES]
