"""Textual DSL for OBMDPs: parser and serializer.

Grammar (one file = one model, comments run from '#' to end of line):

    model     := decl+
    decl      := "nonterminal" NAME ("controlled" | "probabilistic") "{" rule+ "}"
    rule      := PROB "->" NAME* ";"          # probabilistic non-terminal
               | NAME "->" NAME* ";"          # controlled: action rule, prob 1
               | NAME "{" probrule+ "}"       # controlled: per-action distribution
    probrule  := PROB "->" NAME* ";"
    PROB      := INT "/" INT | "1"

An empty NAME* denotes the empty right-hand side and is written "-> ;".
The same grammar serves general-form and normal-form models; forms are
inferred from rule shapes, never declared.
"""

from __future__ import annotations

from fractions import Fraction

from .model import CONTROLLED, PROBABILISTIC, ModelError, NAME_RE, as_snf, make_obmdp

KEYWORDS = {"nonterminal", "controlled", "probabilistic"}


class DslError(ModelError):
    """Parse or validation failure, with source position."""

    def __init__(self, message, line, col):
        super().__init__(f"line {line}, column {col}: {message}")
        self.line = line
        self.col = col


class _Tok:
    __slots__ = ("kind", "text", "line", "col")

    def __init__(self, kind, text, line, col):
        self.kind = kind
        self.text = text
        self.line = line
        self.col = col


def _tokenize(text):
    toks = []
    line, col = 1, 1
    i = 0
    n = len(text)
    while i < n:
        c = text[i]
        if c == "\n":
            line += 1
            col = 1
            i += 1
        elif c in " \t\r":
            i += 1
            col += 1
        elif c == "#":
            while i < n and text[i] != "\n":
                i += 1
        elif c in "{};":
            toks.append(_Tok(c, c, line, col))
            i += 1
            col += 1
        elif text.startswith("->", i):
            toks.append(_Tok("arrow", "->", line, col))
            i += 2
            col += 2
        elif c.isdigit():
            j = i
            while j < n and text[j].isdigit():
                j += 1
            num = text[i:j]
            if j < n and text[j] == "/":
                k = j + 1
                while k < n and text[k].isdigit():
                    k += 1
                if k == j + 1:
                    raise DslError("malformed rational literal", line, col)
                toks.append(_Tok("prob", text[i:k], line, col))
                col += k - i
                i = k
            else:
                toks.append(_Tok("prob", num, line, col))
                col += j - i
                i = j
        elif c.isalpha() or c == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            word = text[i:j]
            toks.append(_Tok("name", word, line, col))
            col += j - i
            i = j
        else:
            raise DslError(f"unexpected character {c!r}", line, col)
    toks.append(_Tok("eof", "", line, col))
    return toks


class _Parser:
    def __init__(self, text):
        self.toks = _tokenize(text)
        self.pos = 0

    def peek(self):
        return self.toks[self.pos]

    def take(self, kind, what=None):
        tok = self.toks[self.pos]
        if tok.kind != kind:
            raise DslError(f"expected {what or kind}, found {tok.text or 'end of input'!r}",
                           tok.line, tok.col)
        self.pos += 1
        return tok

    def fail(self, message):
        tok = self.peek()
        raise DslError(message, tok.line, tok.col)

    def parse_model(self):
        decls = []
        while self.peek().kind != "eof":
            decls.append(self.parse_decl())
        if not decls:
            self.fail("empty model")
        return decls

    def parse_decl(self):
        kw = self.take("name", "'nonterminal'")
        if kw.text != "nonterminal":
            raise DslError("expected 'nonterminal'", kw.line, kw.col)
        name_tok = self.take("name", "a non-terminal name")
        name = name_tok.text
        if name in KEYWORDS or not NAME_RE.match(name):
            raise DslError(f"invalid non-terminal name {name!r}", name_tok.line, name_tok.col)
        kind_tok = self.take("name", "'controlled' or 'probabilistic'")
        if kind_tok.text not in (CONTROLLED, PROBABILISTIC):
            raise DslError("expected 'controlled' or 'probabilistic'",
                           kind_tok.line, kind_tok.col)
        kind = kind_tok.text
        self.take("{")
        rules = []
        while self.peek().kind != "}":
            rules.extend(self.parse_rule(name, kind))
        close = self.take("}")
        if not rules:
            raise DslError(f"{name}: declaration has no rules", close.line, close.col)
        return name, kind, rules

    def parse_rule(self, owner, kind):
        tok = self.peek()
        if tok.kind == "prob":
            if kind != PROBABILISTIC:
                self.fail(f"{owner}: controlled non-terminal needs an action label")
            prob = self.parse_prob()
            rhs = self.parse_rhs()
            return [(prob, None, rhs)]
        if tok.kind == "name":
            if kind != CONTROLLED:
                self.fail(f"{owner}: probabilistic non-terminal cannot have action rules")
            action = self.take("name").text
            nxt = self.peek()
            if nxt.kind == "arrow":
                rhs = self.parse_rhs()
                return [(Fraction(1), action, rhs)]
            if nxt.kind == "{":
                self.take("{")
                out = []
                while self.peek().kind != "}":
                    prob = self.parse_prob()
                    rhs = self.parse_rhs()
                    out.append((prob, action, rhs))
                self.take("}")
                if not out:
                    self.fail(f"{owner}: empty action block for {action!r}")
                return out
            self.fail("expected '->' or '{' after action name")
        self.fail("expected a rule")

    def parse_prob(self):
        tok = self.take("prob", "a probability")
        if "/" in tok.text:
            p, q = tok.text.split("/")
            value = Fraction(int(p), int(q))
        else:
            value = Fraction(int(tok.text))
        if not (0 < value <= 1):
            raise DslError(f"probability {tok.text} outside (0, 1]", tok.line, tok.col)
        return value

    def parse_rhs(self):
        self.take("arrow", "'->'")
        rhs = []
        while self.peek().kind == "name":
            rhs.append(self.take("name").text)
        self.take(";")
        return tuple(rhs)


def parse_obmdp(text):
    """Parse DSL source into a validated general-form Obmdp."""
    decls = _Parser(text).parse_model()
    try:
        return make_obmdp(decls)
    except DslError:
        raise
    except ModelError as exc:
        raise DslError(str(exc), 1, 1) from None


def parse_snf(text):
    """Parse DSL source and reinterpret it as SNF (forms inferred)."""
    return as_snf(parse_obmdp(text))


def _fmt_prob(p):
    return "1" if p == 1 else f"{p.numerator}/{p.denominator}"


def serialize_obmdp(m):
    """Render a model back to DSL text; parse(serialize(m)) == m structurally."""
    lines = []
    for i, name in enumerate(m.names):
        lines.append(f"nonterminal {name} {m.kinds[i]} {{")
        if m.kinds[i] == PROBABILISTIC:
            for r in m.rules[i]:
                lines.append(f"  {_fmt_prob(r.prob)} -> {_fmt_rhs(m, r)};")
        else:
            for a in m.actions(i):
                rs = m.rules_for(i, a)
                if len(rs) == 1 and rs[0].prob == 1:
                    lines.append(f"  {a} -> {_fmt_rhs(m, rs[0])};")
                else:
                    body = " ".join(f"{_fmt_prob(r.prob)} -> {_fmt_rhs(m, r)};" for r in rs)
                    lines.append(f"  {a} {{ {body} }}")
        lines.append("}")
    return "\n".join(lines) + "\n"


def _fmt_rhs(m, rule):
    return " ".join(m.names[j] for j in rule.rhs)
