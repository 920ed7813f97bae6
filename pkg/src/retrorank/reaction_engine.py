"""Template application on a synthetic string-rewrite grammar.

A template is `productPattern>>reactant1.reactant2`. Applying it to a product
string finds left-to-right non-overlapping occurrences of the product pattern;
each match splits the product into prefix/suffix context, the prefix attaching
to the first reactant pattern and the suffix to the last. The semantics are
invertible, so the corpus generator can emit records that forward-validate by
construction. This engine is a stand-in for real SMARTS application: a
chemistry backend can subclass ReactionEngine without touching callers.
"""

from __future__ import annotations

from dataclasses import dataclass


class MultiInputTemplate(ValueError):
    """Product side has multiple disconnected components; not applicable to a
    single product string."""


class EmptyComponent(ValueError):
    pass


class TemplateParseError(ValueError):
    pass


@dataclass(frozen=True)
class RewriteTemplate:
    template_id: int
    product_pattern: str
    reactant_patterns: tuple[str, ...]
    raw: str

    @property
    def is_multi_input(self) -> bool:
        return "." in self.product_pattern

    @classmethod
    def parse(cls, raw: str, template_id: int = -1) -> "RewriteTemplate":
        if ">>" not in raw:
            raise TemplateParseError(f"missing '>>' separator: {raw!r}")
        product_pattern, _, reactant_side = raw.partition(">>")
        if not product_pattern or not reactant_side:
            raise TemplateParseError(f"empty template side: {raw!r}")
        reactants = tuple(reactant_side.split("."))
        if any(not r for r in reactants):
            raise TemplateParseError(f"empty reactant pattern: {raw!r}")
        return cls(template_id, product_pattern, reactants, raw)


def make_template(
    template_id: int, product_pattern: str, reactant_patterns: tuple[str, ...]
) -> RewriteTemplate:
    raw = f"{product_pattern}>>{'.'.join(reactant_patterns)}"
    return RewriteTemplate(template_id, product_pattern, reactant_patterns, raw)


@dataclass(frozen=True)
class ReactantSetKey:
    canonical: str


def canonicalize(reactants: list[str] | tuple[str, ...]) -> ReactantSetKey:
    """Trim each component, sort ascending, join with '.'. Duplicates survive."""
    comps = [r.strip() for r in reactants]
    if not comps or any(not c for c in comps):
        raise EmptyComponent(f"empty reactant component in {reactants!r}")
    return ReactantSetKey(".".join(sorted(comps)))


def apply_template(
    t: RewriteTemplate, product: str, max_outcomes: int = 4
) -> list[list[str]]:
    """All reactant sets produced by rewriting `product` with `t`, one per
    left-to-right non-overlapping pattern occurrence, capped at max_outcomes."""
    if not product:
        raise ValueError("cannot apply a template to an empty product")
    if t.is_multi_input:
        raise MultiInputTemplate(t.raw)
    outcomes: list[list[str]] = []
    pat = t.product_pattern
    start = 0
    while len(outcomes) < max_outcomes:
        pos = product.find(pat, start)
        if pos < 0:
            break
        prefix, suffix = product[:pos], product[pos + len(pat):]
        qs = t.reactant_patterns
        if len(qs) == 1:
            reactants = [prefix + qs[0] + suffix]
        else:
            reactants = [prefix + qs[0], *qs[1:-1], qs[-1] + suffix]
        outcomes.append(reactants)
        start = pos + len(pat)
    return outcomes


def forward_validate(
    t: RewriteTemplate,
    product: str,
    reactants: list[str] | tuple[str, ...],
    max_outcomes: int = 4,
) -> tuple[bool, str | None]:
    """True iff some template application outcome regenerates `reactants`
    under canonical matching. False carries the reason."""
    try:
        key = canonicalize(reactants)
    except EmptyComponent:
        return False, "empty_component"
    try:
        outcomes = apply_template(t, product, max_outcomes)
    except MultiInputTemplate:
        return False, "multi_input"
    if not outcomes:
        return False, "no_match"
    for out in outcomes:
        if canonicalize(out) == key:
            return True, None
    return False, "mismatch"


class ReactionEngine:
    """Template application backend interface."""

    def apply(self, template: RewriteTemplate, product: str, max_outcomes: int):
        raise NotImplementedError

    def canonical_key(self, reactants) -> ReactantSetKey:
        raise NotImplementedError


class StringRewriteEngine(ReactionEngine):
    """Default synthetic backend; pure and deterministic."""

    def apply(self, template, product, max_outcomes):
        return apply_template(template, product, max_outcomes)

    def canonical_key(self, reactants):
        return canonicalize(reactants)
