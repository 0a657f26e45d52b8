"""Synthetic math-expression corpora: grammar sampling, rendering and augmentation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw

from .errors import ConfigError, DataError, InputError
from .imaging import read_pgm, to_uint8, write_pgm
from .tokens import (
    DIGITS,
    LETTERS,
    Frac,
    Group,
    Node,
    Script,
    Sqrt,
    Symbol,
    join_tokens,
    parse_tokens,
    split_tokens,
    tree_depth,
)

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test", "stress")
MANIFEST_NAME = "manifest.txt"


@dataclass(slots=True)
class GrammarConfig:
    """Bounds of the toy expression grammar."""

    max_tokens: int = 20
    max_depth: int = 2
    digits: Tuple[str, ...] = DIGITS
    letters: Tuple[str, ...] = LETTERS
    operators: Tuple[str, ...] = ("+", "-", "=")
    structure_prob: float = 0.35
    max_terms: int = 4

    def __post_init__(self) -> None:
        if self.max_tokens < 1:
            raise ConfigError(f"max_tokens must be positive, got {self.max_tokens}.")
        if self.max_depth < 0:
            raise ConfigError(f"max_depth must be nonnegative, got {self.max_depth}.")
        if not 0.0 <= self.structure_prob <= 1.0:
            raise ConfigError(f"structure_prob must lie in [0, 1], got {self.structure_prob}.")


@dataclass(slots=True)
class RenderConfig:
    glyph_size: int = 16
    height: int = 64
    width_multiple: int = 32
    script_shift: int = 8
    script_scale: float = 0.5
    jitter: int = 1
    margin: int = 4

    def __post_init__(self) -> None:
        if self.height < 2 * self.glyph_size:
            raise ConfigError(f"height {self.height} cannot hold {self.glyph_size}px glyphs.")
        if self.width_multiple < 1:
            raise ConfigError("width_multiple must be positive.")


@dataclass(slots=True)
class ExprSample:
    id: str
    tokens: List[str]
    image: np.ndarray | None = field(default=None, repr=False)

    @property
    def text(self) -> str:
        return join_tokens(self.tokens)


# ----------------------------------------------------------------------
# Grammar
# ----------------------------------------------------------------------
def _symbol(rng: np.random.Generator, cfg: GrammarConfig) -> str:
    pool = cfg.digits + cfg.letters
    return pool[int(rng.integers(len(pool)))]


def _braced(body: List[str]) -> List[str]:
    return ["{", *body, "}"]


def _term(rng: np.random.Generator, cfg: GrammarConfig, depth: int) -> List[str]:
    if depth >= cfg.max_depth or rng.random() >= cfg.structure_prob:
        return [_symbol(rng, cfg)]
    kind = int(rng.integers(4))
    if kind == 0:
        return [_symbol(rng, cfg), "^", *_braced(_expr(rng, cfg, depth + 1, max_terms=2))]
    if kind == 1:
        return [_symbol(rng, cfg), "_", *_braced(_expr(rng, cfg, depth + 1, max_terms=1))]
    if kind == 2:
        num = _expr(rng, cfg, depth + 1, max_terms=2)
        den = _expr(rng, cfg, depth + 1, max_terms=2)
        return ["\\frac", *_braced(num), *_braced(den)]
    return ["\\sqrt", *_braced(_expr(rng, cfg, depth + 1, max_terms=2))]


def _expr(rng: np.random.Generator, cfg: GrammarConfig, depth: int, *, max_terms: int) -> List[str]:
    out = _term(rng, cfg, depth)
    operators = cfg.operators if depth == 0 else tuple(op for op in cfg.operators if op != "=")
    for _ in range(int(rng.integers(max_terms))):
        out.append(operators[int(rng.integers(len(operators)))])
        out.extend(_term(rng, cfg, depth))
    return out


def _stress(rng: np.random.Generator, cfg: GrammarConfig) -> List[str]:
    base = cfg.letters[int(rng.integers(len(cfg.letters)))]
    script = _symbol(rng, cfg)
    ops = tuple(op for op in cfg.operators if op != "=") or cfg.operators
    out = [base, "^", "{", script, "}"]
    for _ in range(1 + int(rng.integers(2))):
        out += [ops[int(rng.integers(len(ops)))], base, "^", "{", script, "}"]
    return out


def sample_expression(seed, cfg: GrammarConfig | None = None, *, stress: bool = False) -> List[str]:
    """Draw a well-formed token sequence, deterministic in ``seed``.

    Stress mode emits the repeated-script pattern ``s ^ { e } op s ^ { e }``
    (two or three copies with the same ``s`` and ``e``) where attention tends
    to leak between look-alike regions.
    """

    cfg = cfg or GrammarConfig()
    rng = np.random.default_rng(seed)
    if stress:
        return _stress(rng, cfg)
    for _ in range(64):
        tokens = _expr(rng, cfg, 0, max_terms=cfg.max_terms)
        if len(tokens) <= cfg.max_tokens and tree_depth(parse_tokens(tokens)) <= cfg.max_depth:
            return tokens
    return [_symbol(rng, cfg)]


# ----------------------------------------------------------------------
# Glyphs
# ----------------------------------------------------------------------
def _arc(cx: float, cy: float, rx: float, ry: float, start: float = 0.0, stop: float = 360.0, n: int = 16):
    angles = np.radians(np.linspace(start, stop, n))
    return [(cx + rx * math.cos(a), cy + ry * math.sin(a)) for a in angles]


# Polylines in unit coordinates; y grows downwards.
GLYPHS: Dict[str, List[List[Tuple[float, float]]]] = {
    "0": [_arc(0.5, 0.5, 0.28, 0.4)],
    "1": [[(0.35, 0.25), (0.55, 0.1), (0.55, 0.9)]],
    "2": [[(0.2, 0.25), (0.4, 0.1), (0.7, 0.1), (0.8, 0.3), (0.2, 0.9), (0.8, 0.9)]],
    "3": [[(0.2, 0.1), (0.8, 0.1), (0.45, 0.45), (0.8, 0.65), (0.6, 0.9), (0.2, 0.85)]],
    "4": [[(0.65, 0.9), (0.65, 0.1), (0.15, 0.65), (0.85, 0.65)]],
    "5": [[(0.8, 0.1), (0.25, 0.1), (0.2, 0.45), (0.65, 0.45), (0.8, 0.7), (0.6, 0.9), (0.2, 0.85)]],
    "6": [[(0.7, 0.1), (0.3, 0.4), (0.2, 0.7), (0.4, 0.9), (0.7, 0.85), (0.75, 0.6), (0.5, 0.5), (0.25, 0.6)]],
    "7": [[(0.2, 0.1), (0.8, 0.1), (0.4, 0.9)]],
    "8": [_arc(0.5, 0.3, 0.2, 0.2), _arc(0.5, 0.7, 0.25, 0.2)],
    "9": [_arc(0.5, 0.32, 0.22, 0.22), [(0.72, 0.32), (0.6, 0.9)]],
    "a": [_arc(0.45, 0.65, 0.22, 0.25), [(0.67, 0.4), (0.67, 0.9)]],
    "b": [[(0.3, 0.1), (0.3, 0.9)], _arc(0.5, 0.68, 0.2, 0.22)],
    "c": [_arc(0.5, 0.65, 0.25, 0.25, 45.0, 315.0)],
    "j": [[(0.6, 0.4), (0.6, 0.9), (0.45, 1.0), (0.3, 0.9)], [(0.6, 0.2), (0.6, 0.26)]],
    "n": [[(0.25, 0.4), (0.25, 0.9)], [(0.25, 0.55), (0.45, 0.4), (0.7, 0.45), (0.7, 0.9)]],
    "q": [_arc(0.45, 0.6, 0.2, 0.22), [(0.65, 0.4), (0.65, 1.0)]],
    "x": [[(0.2, 0.4), (0.8, 0.9)], [(0.8, 0.4), (0.2, 0.9)]],
    "y": [[(0.2, 0.4), (0.5, 0.7)], [(0.8, 0.4), (0.35, 1.0)]],
    "+": [[(0.5, 0.25), (0.5, 0.75)], [(0.25, 0.5), (0.75, 0.5)]],
    "-": [[(0.25, 0.5), (0.75, 0.5)]],
    "=": [[(0.25, 0.4), (0.75, 0.4)], [(0.25, 0.6), (0.75, 0.6)]],
}


# ----------------------------------------------------------------------
# Layout
# ----------------------------------------------------------------------
@dataclass(slots=True)
class Placed:
    """A laid-out mark: a glyph box, a fraction bar or a radical stroke."""

    kind: str
    token: str
    box: Tuple[float, float, float, float]
    points: Tuple[Tuple[float, float], ...] = ()

    def shifted(self, dx: float, dy: float) -> "Placed":
        x0, y0, x1, y1 = self.box
        return Placed(
            self.kind,
            self.token,
            (x0 + dx, y0 + dy, x1 + dx, y1 + dy),
            tuple((x + dx, y + dy) for x, y in self.points),
        )

    def scaled(self, factor: float) -> "Placed":
        return Placed(
            self.kind,
            self.token,
            tuple(v * factor for v in self.box),  # type: ignore[arg-type]
            tuple((x * factor, y * factor) for x, y in self.points),
        )


@dataclass(slots=True)
class _Laid:
    marks: List[Placed]
    width: float
    top: float
    bottom: float

    def shifted(self, dx: float, dy: float) -> "_Laid":
        return _Laid([m.shifted(dx, dy) for m in self.marks], self.width, self.top + dy, self.bottom + dy)


def _layout_node(node: Node, size: float, cfg: RenderConfig) -> _Laid:
    """Lay ``node`` out with its left edge at x=0 and its centre line at y=0."""

    gap = max(1.0, size / 8.0)
    if isinstance(node, Symbol):
        if node.token not in GLYPHS:
            raise InputError(f"No glyph for token '{node.token}'.")
        half = size / 2.0
        return _Laid([Placed("glyph", node.token, (0.0, -half, size, half))], size + gap, -half, half)

    if isinstance(node, Group):
        marks: List[Placed] = []
        x = 0.0
        top, bottom = -size / 2.0, size / 2.0
        for item in node.items:
            laid = _layout_node(item, size, cfg).shifted(x, 0.0)
            marks.extend(laid.marks)
            x += laid.width
            top, bottom = min(top, laid.top), max(bottom, laid.bottom)
        return _Laid(marks, x, top, bottom)

    if isinstance(node, Script):
        base = _layout_node(node.base, size, cfg)
        small = size * cfg.script_scale
        shift = cfg.script_shift * size / cfg.glyph_size
        dy = -shift if node.kind == "^" else shift
        script = _layout_node(node.group, small, cfg).shifted(base.width - gap, dy)
        return _Laid(
            base.marks + script.marks,
            base.width - gap + script.width,
            min(base.top, script.top),
            max(base.bottom, script.bottom),
        )

    if isinstance(node, Frac):
        num = _layout_node(node.numerator, size, cfg)
        den = _layout_node(node.denominator, size, cfg)
        width = max(num.width, den.width) + gap
        num = num.shifted((width - num.width) / 2.0, -gap - num.bottom)
        den = den.shifted((width - den.width) / 2.0, gap - den.top)
        bar = Placed("bar", "\\frac", (0.0, 0.0, width - gap / 2.0, 0.0), ((0.0, 0.0), (width - gap / 2.0, 0.0)))
        return _Laid(num.marks + den.marks + [bar], width + gap, num.top, den.bottom)

    body = _layout_node(node.body, size, cfg)
    hook = size * 0.5
    body = body.shifted(hook, 0.0)
    top = body.top - gap
    points = ((0.0, 0.0), (hook * 0.4, body.bottom), (hook, top), (hook + body.width, top))
    radical = Placed("radical", "\\sqrt", (0.0, top, hook + body.width, body.bottom), points)
    return _Laid(body.marks + [radical], hook + body.width + gap, top, body.bottom)


def layout(tokens, cfg: RenderConfig | None = None) -> Tuple[List[Placed], int]:
    """Place every mark of ``tokens`` on the canvas; returns ``(marks, width)``.

    The whole layout is scaled down uniformly when it does not fit the
    configured height.

    Raises
    ------
    InputError
        For malformed sequences or tokens without a glyph.
    """

    cfg = cfg or RenderConfig()
    tree = parse_tokens(split_tokens(tokens))
    laid = _layout_node(tree, float(cfg.glyph_size), cfg)
    usable = cfg.height - 2 * cfg.margin
    factor = min(1.0, usable / max(laid.bottom - laid.top, 1.0))
    marks = [m.scaled(factor) for m in laid.marks]
    top, bottom = laid.top * factor, laid.bottom * factor
    dy = cfg.height / 2.0 - (top + bottom) / 2.0
    marks = [m.shifted(cfg.margin, dy) for m in marks]
    content = laid.width * factor + 2 * cfg.margin
    width = max(cfg.width_multiple, int(math.ceil(content / cfg.width_multiple)) * cfg.width_multiple)
    return marks, width


def _draw_mark(draw: ImageDraw.ImageDraw, mark: Placed, dx: float, dy: float) -> None:
    x0, y0, x1, y1 = mark.box
    size = max(x1 - x0, 1.0)
    if mark.kind == "glyph":
        width = max(1, int(round(size / 8.0)))
        for stroke in GLYPHS[mark.token]:
            points = [(x0 + dx + u * size, y0 + dy + v * (y1 - y0)) for u, v in stroke]
            draw.line(points, fill=255, width=width, joint="curve")
    else:
        draw.line([(x + dx, y + dy) for x, y in mark.points], fill=255, width=1)


def render(tokens, cfg: RenderConfig | None = None, seed=0) -> np.ndarray:
    """Render ``tokens`` as a ``[height×W]`` float image in ``[0, 1]``.

    Ink is bright on a zero background, so zero padding is background. Each
    glyph is shifted by an independent jitter of at most ``cfg.jitter`` px.
    """

    cfg = cfg or RenderConfig()
    marks, width = layout(tokens, cfg)
    rng = np.random.default_rng(seed)
    canvas = Image.new("L", (width, cfg.height), 0)
    draw = ImageDraw.Draw(canvas)
    for mark in marks:
        dx, dy = rng.integers(-cfg.jitter, cfg.jitter + 1, size=2) if cfg.jitter else (0, 0)
        _draw_mark(draw, mark, float(dx), float(dy))
    return np.asarray(canvas, dtype=np.float64) / 255.0


# ----------------------------------------------------------------------
# Augmentation
# ----------------------------------------------------------------------
def pad_to_multiple(image: np.ndarray, multiple: int = 16) -> np.ndarray:
    height, width = image.shape
    target_h = int(math.ceil(height / multiple)) * multiple
    target_w = int(math.ceil(width / multiple)) * multiple
    return np.pad(image, ((0, target_h - height), (0, target_w - width)), constant_values=0.0)


def resize_image(image: np.ndarray, factor: float) -> np.ndarray:
    """Aspect-preserving bilinear resize; the width follows the rounded height."""

    height, width = image.shape
    new_h = max(1, int(round(height * factor)))
    new_w = max(1, int(round(width * new_h / height)))
    if (new_h, new_w) == (height, width):
        return np.array(image, dtype=np.float64, copy=True)
    resized = Image.fromarray(to_uint8(image)).resize((new_w, new_h), Image.Resampling.BILINEAR)
    return np.asarray(resized, dtype=np.float64) / 255.0


def scale_augment(
    image: np.ndarray,
    seed,
    *,
    low: float = 0.7,
    high: float = 1.4,
    multiple: int = 16,
) -> np.ndarray:
    """Rescale by a factor drawn uniformly from ``[low, high]`` and re-pad to ``multiple``."""

    factor = float(np.random.default_rng(seed).uniform(low, high))
    return pad_to_multiple(resize_image(image, factor), multiple)


# ----------------------------------------------------------------------
# Corpora on disk
# ----------------------------------------------------------------------
def sample_seed(seed: int, split: str, index: int) -> int:
    """Per-sample seed derived from ``(seed, split, index)``."""

    state = np.random.SeedSequence([int(seed), SPLITS.index(split), int(index)]).generate_state(1)
    return int(state[0])


def make_sample(
    split: str,
    index: int,
    seed: int,
    grammar: GrammarConfig | None = None,
    render_cfg: RenderConfig | None = None,
) -> ExprSample:
    sub_seed = sample_seed(seed, split, index)
    tokens = sample_expression(sub_seed, grammar, stress=split == "stress")
    image = render(tokens, render_cfg, seed=sub_seed + 1)
    return ExprSample(f"{split}_{index:05d}", tokens, image)


def write_manifest(path: Path, samples: Sequence[ExprSample]) -> None:
    lines = [f"{s.id}\t{s.text}\n" for s in samples]
    path.write_text("".join(lines), encoding="utf-8")


def generate_corpus(
    out_dir: str | Path,
    counts: Mapping[str, int],
    seed: int = 7,
    *,
    grammar: GrammarConfig | None = None,
    render_cfg: RenderConfig | None = None,
) -> Dict[str, int]:
    """Write one directory per split with PGM images and a ``manifest.txt``.

    The output is byte-identical for a fixed ``(seed, counts)`` pair. Returns
    the number of samples written per split.
    """

    out_dir = Path(out_dir)
    written: Dict[str, int] = {}
    for split, count in counts.items():
        if split not in SPLITS:
            raise ConfigError(f"Unknown split '{split}'; expected one of {', '.join(SPLITS)}.")
        if count < 0:
            raise ConfigError(f"Sample count for '{split}' must be nonnegative, got {count}.")
        split_dir = out_dir / split
        split_dir.mkdir(parents=True, exist_ok=True)
        samples = []
        for i in range(count):
            sample = make_sample(split, i, seed, grammar, render_cfg)
            write_pgm(split_dir / f"{sample.id}.pgm", sample.image)
            sample.image = None
            samples.append(sample)
        write_manifest(split_dir / MANIFEST_NAME, samples)
        written[split] = count
        logger.info("wrote %d %s samples to %s", count, split, split_dir)
    return written


def load_corpus(data_dir: str | Path, split: str, *, with_images: bool = True) -> List[ExprSample]:
    """Read a split written by :func:`generate_corpus`.

    Raises
    ------
    DataError
        If the split directory, its manifest or an image is missing.
    """

    from .metrics import read_manifest

    split_dir = Path(data_dir) / split
    manifest = split_dir / MANIFEST_NAME
    if not manifest.is_file():
        raise DataError(f"No manifest for split '{split}' at '{manifest}'.")
    samples = []
    for sample_id, tokens in read_manifest(manifest).items():
        image = read_pgm(split_dir / f"{sample_id}.pgm") if with_images else None
        samples.append(ExprSample(sample_id, tokens, image))
    return samples
