"""LaTeX-style token vocabulary and a parser for the toy expression grammar."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple, Union

from .errors import InputError

PAD, SOS, EOS = 0, 1, 2
RESERVED = ("<pad>", "<sos>", "<eos>")

DIGITS = tuple("0123456789")
LETTERS = ("a", "b", "c", "j", "n", "q", "x", "y")
OPERATORS = ("+", "-", "=")
STRUCTURAL = ("^", "_", "{", "}", "\\frac", "\\sqrt")

SYMBOLS = DIGITS + LETTERS + OPERATORS


class Vocabulary:
    """Token ↔ id bijection with reserved PAD/SOS/EOS ids."""

    def __init__(self, symbols: Iterable[str] = SYMBOLS + STRUCTURAL) -> None:
        self._tokens: List[str] = list(RESERVED)
        for token in symbols:
            if token in self._tokens:
                raise InputError(f"Duplicate token '{token}' in vocabulary.")
            self._tokens.append(token)
        self._ids: Dict[str, int] = {t: i for i, t in enumerate(self._tokens)}

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    @property
    def tokens(self) -> Tuple[str, ...]:
        return tuple(self._tokens)

    def id_of(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise InputError(f"Unknown token '{token}'.") from None

    def token_of(self, idx: int) -> str:
        if not 0 <= idx < len(self._tokens):
            raise InputError(f"Token id {idx} outside vocabulary of size {len(self)}.")
        return self._tokens[idx]

    def encode(self, tokens: Union[str, Sequence[str]]) -> List[int]:
        """Map tokens (or a space-separated string) to ids, without SOS/EOS."""

        return [self.id_of(t) for t in split_tokens(tokens)]

    def decode(self, ids: Iterable[int]) -> List[str]:
        """Map ids back to tokens, stopping at EOS and skipping PAD/SOS."""

        out: List[str] = []
        for idx in ids:
            idx = int(idx)
            if idx == EOS:
                break
            if idx in (PAD, SOS):
                continue
            out.append(self.token_of(idx))
        return out


def split_tokens(tokens: Union[str, Sequence[str]]) -> List[str]:
    if isinstance(tokens, str):
        return tokens.split()
    return list(tokens)


def join_tokens(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


# ----------------------------------------------------------------------
# Expression tree
# ----------------------------------------------------------------------
@dataclass(slots=True)
class Symbol:
    token: str


@dataclass(slots=True)
class Group:
    items: List["Node"] = field(default_factory=list)


@dataclass(slots=True)
class Script:
    base: "Node"
    kind: str
    group: Group


@dataclass(slots=True)
class Frac:
    numerator: Group
    denominator: Group


@dataclass(slots=True)
class Sqrt:
    body: Group


Node = Union[Symbol, Group, Script, Frac, Sqrt]


class _Parser:
    def __init__(self, tokens: Sequence[str]) -> None:
        self.tokens = list(tokens)
        self.pos = 0

    def peek(self) -> str | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def take(self, expected: str | None = None) -> str:
        token = self.peek()
        if token is None:
            raise InputError(f"Unexpected end of expression (expected '{expected or 'token'}').")
        if expected is not None and token != expected:
            raise InputError(f"Expected '{expected}' at position {self.pos}, found '{token}'.")
        self.pos += 1
        return token

    def expression(self, closing: str | None = None) -> Group:
        group = Group()
        while self.peek() is not None and self.peek() != closing:
            group.items.append(self.item())
        return group

    def group(self) -> Group:
        self.take("{")
        body = self.expression("}")
        self.take("}")
        return body

    def item(self) -> Node:
        node = self.atom()
        while self.peek() in ("^", "_"):
            kind = self.take()
            node = Script(node, kind, self.group())
        return node

    def atom(self) -> Node:
        token = self.peek()
        if token == "\\frac":
            self.take()
            return Frac(self.group(), self.group())
        if token == "\\sqrt":
            self.take()
            return Sqrt(self.group())
        if token == "{":
            return self.group()
        if token in ("^", "_", "}"):
            raise InputError(f"Unexpected '{token}' at position {self.pos}.")
        return Symbol(self.take())


def parse_tokens(tokens: Union[str, Sequence[str]]) -> Group:
    """Parse a token sequence into an expression tree.

    Scripts attach to the preceding atom; ``\\frac`` takes two braced groups
    and ``\\sqrt`` one.

    Raises
    ------
    InputError
        On unbalanced braces, a script without a base or a missing group.
    """

    parser = _Parser(split_tokens(tokens))
    tree = parser.expression()
    if parser.peek() is not None:
        raise InputError(f"Unexpected '{parser.peek()}' at position {parser.pos}.")
    return tree


def tree_depth(node: Node) -> int:
    """Structural nesting depth: scripts, fractions and radicals each add one."""

    if isinstance(node, Symbol):
        return 0
    if isinstance(node, Group):
        return max((tree_depth(n) for n in node.items), default=0)
    if isinstance(node, Script):
        return max(tree_depth(node.base), 1 + tree_depth(node.group))
    if isinstance(node, Frac):
        return 1 + max(tree_depth(node.numerator), tree_depth(node.denominator))
    return 1 + tree_depth(node.body)
