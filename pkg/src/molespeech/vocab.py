"""Single token-id space: text ids first, then semantic-speech ids.

Text ids cover the 16 renderable tone symbols, the three operator
characters used by the toy QA task, nine control ids, and a reserved
remainder. Each control id stands for one fixed English system prompt or
chat-format marker; the toy tokenizer is character-level, so a whole
system prompt is carried by its single id.
"""

from __future__ import annotations

from dataclasses import dataclass

from .audio import ALPHABET
from .errors import ConfigError

OPERATORS = "+=?"
CONTROL_NAMES = (
    "<bos>",
    "<eos>",
    "<pad>",
    "<user>",
    "<assistant>",
    "<speech>",
    "<sys_tts>",
    "<sys_qa>",
    "<sys_sqa>",
)
_MIN_TEXT = len(ALPHABET) + len(OPERATORS) + len(CONTROL_NAMES)


@dataclass(frozen=True)
class UnifiedVocab:
    n_text: int = 64
    n_semantic: int = 64

    def __post_init__(self):
        if self.n_text < _MIN_TEXT:
            raise ConfigError(f"n_text must be >= {_MIN_TEXT} to hold symbols, operators, and controls")
        if self.n_semantic < 1:
            raise ConfigError("n_semantic must be positive")

    @property
    def total(self) -> int:
        return self.n_text + self.n_semantic

    # Renderable symbols sit at [0, 16), operators right after, then controls.
    def char_id(self, ch: str) -> int:
        if ch in ALPHABET:
            return ALPHABET.index(ch)
        if ch in OPERATORS:
            return len(ALPHABET) + OPERATORS.index(ch)
        raise ConfigError(f"character {ch!r} has no token id")

    def control_id(self, name: str) -> int:
        return len(ALPHABET) + len(OPERATORS) + CONTROL_NAMES.index(name)

    @property
    def bos(self) -> int:
        return self.control_id("<bos>")

    @property
    def eos(self) -> int:
        return self.control_id("<eos>")

    @property
    def pad(self) -> int:
        return self.control_id("<pad>")

    @property
    def user(self) -> int:
        return self.control_id("<user>")

    @property
    def assistant(self) -> int:
        return self.control_id("<assistant>")

    @property
    def speech(self) -> int:
        return self.control_id("<speech>")

    @property
    def sys_tts(self) -> int:
        return self.control_id("<sys_tts>")

    @property
    def sys_qa(self) -> int:
        return self.control_id("<sys_qa>")

    @property
    def sys_sqa(self) -> int:
        return self.control_id("<sys_sqa>")

    @property
    def semantic_start(self) -> int:
        return self.n_text

    def is_semantic(self, token_id: int) -> bool:
        return self.n_text <= token_id < self.total

    def role(self, token_id: int) -> str:
        """Exactly one of: renderable, operator, control, reserved, semantic."""
        if not 0 <= token_id < self.total:
            raise ConfigError(f"token id {token_id} outside [0, {self.total})")
        if token_id < len(ALPHABET):
            return "renderable"
        if token_id < len(ALPHABET) + len(OPERATORS):
            return "operator"
        if token_id < _MIN_TEXT:
            return "control"
        if token_id < self.n_text:
            return "reserved"
        return "semantic"

    def encode_chars(self, text: str) -> list[int]:
        return [self.char_id(ch) for ch in text]

    def decode_chars(self, ids) -> str:
        out = []
        for t in ids:
            t = int(t)
            if t < len(ALPHABET):
                out.append(ALPHABET[t])
            elif t < len(ALPHABET) + len(OPERATORS):
                out.append(OPERATORS[t - len(ALPHABET)])
            else:
                raise ConfigError(f"token id {t} is not a character id")
        return "".join(out)


# Documented mapping from control ids to the English system prompts they
# abbreviate; functional role only (task selection), never tokenized.
SYSTEM_PROMPT_TEXT = {
    "<sys_tts>": "Transform the input written-form English text into non-language tokens that represent the corresponding speech in audio",
    "<sys_qa>": "You are a helpful AI assistant",
    "<sys_sqa>": "Answer the input text questions using non-language tokens that represent the corresponding speech",
}
