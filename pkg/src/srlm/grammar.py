"""Parser for skill-tagged reasoning documents.

A well-formed document is optional leading whitespace, one top-level
``<thoughts>`` block, then arbitrary trailing text.  Inside the block,
reasoning is free text interleaved with nine known skill tags, nested
arbitrarily with three structural rules:

* every open tag is closed by a matching close tag, stack-ordered;
* ``<reflection>`` may not open before some other reasoning content (a
  non-reflection tag, or a text span with non-whitespace characters)
  has appeared anywhere earlier in the block;
* ``<decomposition>`` may self-nest at most 3 deep, counting every
  enclosing decomposition node, contiguous or not.

Angle-bracket text that does not scan as a lowercase tag token is
literal text.  A lowercase tag token with an unknown name is an error,
not text.  Parsing is lossless: rendering the parse result reproduces
the input byte for byte.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Iterator

SKILLS = (
    "decomposition",
    "backward",
    "detail",
    "summary",
    "alternatives",
    "reflection",
    "analogy",
    "check",
    "other",
)

WRAPPER = "thoughts"
OPEN_WRAPPER = f"<{WRAPPER}>"
CLOSE_WRAPPER = f"</{WRAPPER}>"
MAX_DECOMPOSITION_DEPTH = 3

_TAG_TOKEN = re.compile(r"</?([a-z]+)>")


class RationaleError(Exception):
    """Base class for document parse failures; carries a character offset."""

    reason = "parse-error"

    def __init__(self, message: str, position: int):
        self.position = position
        super().__init__(f"{message} (offset {position})")


class UnbalancedTagError(RationaleError):
    reason = "unbalanced-tag"


class UnknownTagError(RationaleError):
    reason = "unknown-tag"

    def __init__(self, tag_name: str, position: int):
        self.tag_name = tag_name
        super().__init__(f"unknown tag <{tag_name}>", position)


class MissingEnvelopeError(RationaleError):
    reason = "missing-envelope"


class ReflectionOrderError(RationaleError):
    reason = "reflection-order"

    def __init__(self, position: int):
        super().__init__("<reflection> cannot open before other reasoning content", position)


class DepthExceededError(RationaleError):
    reason = "depth-exceeded"

    def __init__(self, position: int, depth: int):
        self.depth = depth
        super().__init__(
            f"<decomposition> nested {depth} deep, limit {MAX_DECOMPOSITION_DEPTH}", position
        )


@dataclass
class Node:
    """One tagged skill span: ordered text spans and child nodes."""

    skill: str
    content: list["str | Node"] = field(default_factory=list)

    @property
    def children(self) -> list["Node"]:
        return [part for part in self.content if isinstance(part, Node)]

    @property
    def text_spans(self) -> list[str]:
        return [part for part in self.content if isinstance(part, str)]


@dataclass
class RationaleTree:
    """Lossless parse of one document."""

    leading: str
    items: list["str | Node"]
    post_thoughts: str

    @property
    def top_level_skills(self) -> list[str]:
        return [part.skill for part in self.items if isinstance(part, Node)]


def parse_rationale(raw: str) -> RationaleTree:
    """Parse a document, or raise a RationaleError subclass with an offset."""
    body_start = len(raw) - len(raw.lstrip())
    leading = raw[:body_start]
    if not raw.startswith(OPEN_WRAPPER, body_start):
        raise MissingEnvelopeError(f"document must begin with {OPEN_WRAPPER}", body_start)

    items: list[str | Node] = []
    stack: list[Node] = []
    reasoning_seen = False
    pos = body_start + len(OPEN_WRAPPER)

    for match in _TAG_TOKEN.finditer(raw, pos):
        text = raw[pos : match.start()]
        if text:
            (stack[-1].content if stack else items).append(text)
            if text.strip():
                reasoning_seen = True
        pos = match.end()

        name = match.group(1)
        closing = match.group(0).startswith("</")
        if name == WRAPPER:
            if not closing:
                raise UnbalancedTagError("wrapper block reopened", match.start())
            if stack:
                raise UnbalancedTagError(
                    f"<{stack[-1].skill}> still open at {CLOSE_WRAPPER}", match.start()
                )
            return RationaleTree(leading=leading, items=items, post_thoughts=raw[pos:])
        if name not in SKILLS:
            raise UnknownTagError(name, match.start())

        if closing:
            if not stack:
                raise UnbalancedTagError(f"</{name}> with no open tag", match.start())
            if stack[-1].skill != name:
                raise UnbalancedTagError(
                    f"</{name}> closes <{stack[-1].skill}>", match.start()
                )
            node = stack.pop()
            (stack[-1].content if stack else items).append(node)
        else:
            if name == "reflection" and not reasoning_seen:
                raise ReflectionOrderError(match.start())
            if name == "decomposition":
                depth = 1 + sum(1 for open_node in stack if open_node.skill == "decomposition")
                if depth > MAX_DECOMPOSITION_DEPTH:
                    raise DepthExceededError(match.start(), depth)
            stack.append(Node(skill=name))
            if name != "reflection":
                reasoning_seen = True

    raise UnbalancedTagError("end of input before wrapper close", len(raw))


def render_node(node: Node) -> str:
    inner = "".join(
        part if isinstance(part, str) else render_node(part) for part in node.content
    )
    return f"<{node.skill}>{inner}</{node.skill}>"


def render_rationale(tree: RationaleTree) -> str:
    """Inverse of parse_rationale: reproduces the parsed input exactly."""
    inner = "".join(
        part if isinstance(part, str) else render_node(part) for part in tree.items
    )
    return f"{tree.leading}{OPEN_WRAPPER}{inner}{CLOSE_WRAPPER}{tree.post_thoughts}"


def iter_nodes(tree: RationaleTree) -> Iterator[Node]:
    """All skill nodes in document order, depth first."""
    pending = [part for part in tree.items if isinstance(part, Node)]
    while pending:
        node = pending.pop(0)
        yield node
        pending = node.children + pending


def skill_histogram(trees: Iterable[RationaleTree]) -> dict[str, int]:
    """Tag-occurrence counts over a batch of parsed documents, all skills keyed."""
    counts = {skill: 0 for skill in SKILLS}
    for tree in trees:
        for node in iter_nodes(tree):
            counts[node.skill] += 1
    return counts


def envelope_text(raw: str, tree: RationaleTree) -> str:
    """The wrapper block of ``raw`` including its open and close tags."""
    end = len(raw) - len(tree.post_thoughts)
    return raw[len(tree.leading) : end]
