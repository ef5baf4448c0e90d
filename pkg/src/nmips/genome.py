"""Unified integer chromosome encoding shared by all tasks of a PDE family.

Each chromosome is a fixed-length integer vector laid out as one main Karva
expression followed by ``num_adfs`` ADF bodies. Gene values are partitioned
into four segments (functions, ADF calls, terminals, ADF arguments) so the
same vector decodes against every task's symbol library.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

import numpy as np

# Arities of every operation that can appear in a tree. The search libraries
# only draw from add/sub/mul/sin/exp/log; div, cos and pow exist so that
# derivative trees stay closed under differentiation.
FUNCTION_ARITY: dict[str, int] = {
    "add": 2,
    "sub": 2,
    "mul": 2,
    "div": 2,
    "pow": 2,
    "sin": 1,
    "cos": 1,
    "exp": 1,
    "log": 1,
}

#: terminal entry marking a tunable constant placeholder
CONST_TOKEN = "?"

Chromosome = np.ndarray  # 1-D int64 vector of genome length


class GenomeError(ValueError):
    """Structural violation of an encoding or chromosome invariant."""


@dataclass(frozen=True)
class SymbolLibrary:
    """Ordered function and terminal sets of one task.

    Ordering is fixed so the gene -> symbol mapping is deterministic.
    Terminals are variable names plus ``CONST_TOKEN`` placeholders.
    """

    functions: tuple[str, ...]
    terminals: tuple[str, ...]

    def __post_init__(self):
        for f in self.functions:
            if f not in FUNCTION_ARITY:
                raise GenomeError(f"unknown function symbol {f!r}")
        if not self.terminals:
            raise GenomeError("library needs at least one terminal")

    @property
    def variables(self) -> tuple[str, ...]:
        return tuple(t for t in self.terminals if t != CONST_TOKEN)

    @property
    def max_arity(self) -> int:
        return max(FUNCTION_ARITY[f] for f in self.functions) if self.functions else 1


@dataclass(frozen=True)
class EncodingSpec:
    """Segment bounds and lengths of the unified encoding space.

    Genes in [0, A) are functions, [A, B) ADF calls, [B, C) terminals and
    [C, D) ADF input arguments. The tail length follows from the head length
    and the maximum arity so that breadth-first decoding can never run out
    of genes.
    """

    head_len: int
    tail_len: int
    num_adfs: int
    num_adf_args: int
    bound_a: int
    bound_b: int
    bound_c: int
    bound_d: int
    max_arity: int
    per_task_fn_counts: tuple[int, ...]
    per_task_term_counts: tuple[int, ...]

    def __post_init__(self):
        a, b, c, d = self.bound_a, self.bound_b, self.bound_c, self.bound_d
        if not (0 < a <= b <= c < d):
            raise GenomeError(f"segment bounds out of order: A={a} B={b} C={c} D={d}")
        if self.tail_len != self.head_len * (self.max_arity - 1) + 1:
            raise GenomeError("tail length violates l = h*(v-1)+1")
        if self.num_adfs > 0 and self.num_adf_args > self.max_arity:
            # An ADF call consumes num_adf_args child genes, so the Karva
            # sufficiency guarantee needs it bounded by the max arity.
            raise GenomeError("num_adf_args must not exceed max_arity")

    @property
    def unit_len(self) -> int:
        return self.head_len + self.tail_len

    @property
    def genome_len(self) -> int:
        return (1 + self.num_adfs) * self.unit_len


def build_encoding_space(
    tasks: Sequence,
    head_len: int = 10,
    num_adfs: int = 1,
    num_adf_args: int = 2,
) -> EncodingSpec:
    """Construct the shared encoding space covering every task's library."""
    if not tasks:
        raise GenomeError("need at least one task")
    if head_len < 1:
        raise GenomeError("head_len must be >= 1")
    libs = [t.library for t in tasks]
    for lib in libs:
        if not lib.terminals:
            raise GenomeError("a task has zero terminals")
    all_fns = set().union(*(lib.functions for lib in libs))
    max_arity = max(FUNCTION_ARITY[f] for f in all_fns) if all_fns else 1
    a = max(len(lib.functions) for lib in libs)
    b = a + num_adfs
    c = b + max(len(lib.terminals) for lib in libs)
    d = c + num_adf_args
    if num_adfs > 0 and num_adf_args == 0:
        d = c + 1  # keep C < D; the argument segment is never sampled
    if num_adfs == 0:
        d = c + 1
    return EncodingSpec(
        head_len=head_len,
        tail_len=head_len * (max_arity - 1) + 1,
        num_adfs=num_adfs,
        num_adf_args=num_adf_args,
        bound_a=a,
        bound_b=b,
        bound_c=c,
        bound_d=d,
        max_arity=max_arity,
        per_task_fn_counts=tuple(len(lib.functions) for lib in libs),
        per_task_term_counts=tuple(len(lib.terminals) for lib in libs),
    )


def scale_gene(gene: int, lower: int, upper: int, count: int) -> int:
    """Map a gene from its segment [lower, upper) onto an index in [0, count)."""
    if not lower <= gene < upper:
        raise GenomeError(f"gene {gene} outside segment [{lower}, {upper})")
    if count < 1:
        raise GenomeError("count must be >= 1")
    return (gene - lower) * count // (upper - lower)


# ---------------------------------------------------------------------------
# per-position legal gene sets
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _position_table(spec: EncodingSpec) -> tuple[tuple[np.ndarray, ...], ...]:
    """Legal gene values for every position, grouped per unit as (head, tail).

    Main head may hold any segment (ADF arguments are remapped to terminals
    at decode time). Main tail holds terminals only. The head of ADF ``i``
    excludes calls to itself and lower-indexed ADFs so inlining terminates;
    ADF tails hold terminals and ADF arguments.
    """
    a, b, c, d = spec.bound_a, spec.bound_b, spec.bound_c, spec.bound_d
    units = [(np.arange(d), np.arange(b, c))]
    for i in range(spec.num_adfs):
        head = np.concatenate([np.arange(a), np.arange(a + i + 1, d)])
        tail_hi = d if spec.num_adf_args > 0 else c
        units.append((head, np.arange(b, tail_hi)))
    return tuple(units)


def legal_gene_values(spec: EncodingSpec, position: int) -> np.ndarray:
    """Sorted array of legal gene values at one genome position."""
    unit, offset = divmod(position, spec.unit_len)
    head, tail = _position_table(spec)[unit]
    return head if offset < spec.head_len else tail


def random_chromosome(spec: EncodingSpec, rng: np.random.Generator) -> Chromosome:
    """Sample a chromosome uniformly over each position's legal value set."""
    genes = np.empty(spec.genome_len, dtype=np.int64)
    for pos in range(spec.genome_len):
        legal = legal_gene_values(spec, pos)
        genes[pos] = legal[rng.integers(len(legal))]
    return genes


def validate_chromosome(genes: Chromosome, spec: EncodingSpec) -> None:
    """Raise GenomeError when any gene falls outside its legal set."""
    if genes.shape != (spec.genome_len,):
        raise GenomeError(
            f"chromosome length {genes.shape} != genome length {spec.genome_len}"
        )
    for pos in range(spec.genome_len):
        legal = legal_gene_values(spec, pos)
        g = genes[pos]
        lo, hi = legal[0], legal[-1]
        ok = lo <= g <= hi and (legal.shape[0] == hi - lo + 1 or g in legal)
        if not ok:
            raise GenomeError(f"gene {g} at position {pos} outside its legal set")


def repair_genes(raw: np.ndarray, spec: EncodingSpec) -> Chromosome:
    """Round a real-valued vector and map each entry into its legal gene set.

    Values already legal are kept. Others are wrapped by modulo into the
    position's segment; an illegal ADF reference is wrapped into the callable
    ADF range, or into the terminal segment when no callable ADF exists.
    """
    if raw.shape != (spec.genome_len,):
        raise GenomeError("raw vector length mismatch")
    a, b, c, d = spec.bound_a, spec.bound_b, spec.bound_c, spec.bound_d
    vals = np.rint(np.asarray(raw, dtype=float))
    vals = np.where(np.isfinite(vals), vals, 0.0)
    # clamp to something representable before the integer conversion
    vals = np.clip(vals, -1e15, 1e15)
    genes = vals.astype(np.int64)
    out = np.empty_like(genes)
    h, ul = spec.head_len, spec.unit_len
    for pos, g in enumerate(genes):
        unit, offset = divmod(pos, ul)
        if offset >= h:  # tail: terminals (plus ADF args inside an ADF body)
            hi = d if (unit > 0 and spec.num_adf_args > 0) else c
            out[pos] = b + (g - b) % (hi - b)
            continue
        g = g % d
        if unit > 0 and a <= g < b:
            i = unit - 1
            j = g - a
            if j <= i:  # illegal self/backward ADF call
                n_legal = spec.num_adfs - i - 1
                if n_legal > 0:
                    g = a + i + 1 + j % n_legal
                else:
                    g = b + (g - a) % (c - b)
        out[pos] = g
    return out


# ---------------------------------------------------------------------------
# expression trees
# ---------------------------------------------------------------------------

class Node:
    """One expression-tree node; immutable after construction."""

    __slots__ = ("op", "args", "val")

    def __init__(self, op: str, args: tuple = (), val=None):
        self.op = op
        self.args = args
        self.val = val

    def __eq__(self, other):
        if not isinstance(other, Node):
            return NotImplemented
        return self.op == other.op and self.val == other.val and self.args == other.args

    def __hash__(self):
        return hash((self.op, self.val, len(self.args)))

    def __repr__(self):
        if self.args:
            return f"{self.op}({', '.join(map(repr, self.args))})"
        return f"{self.op}:{self.val}"


def fn(name: str, *args: Node) -> Node:
    if len(args) != FUNCTION_ARITY[name]:
        raise GenomeError(f"{name} expects {FUNCTION_ARITY[name]} arguments")
    return Node(name, tuple(args))


def var(name: str) -> Node:
    return Node("var", (), name)


def const(index: int) -> Node:
    return Node("const", (), index)


def lit(value: float) -> Node:
    return Node("lit", (), float(value))


@dataclass(eq=False)
class ExprTree:
    """Decoded expression with its tunable constants.

    ``constants`` is shared by reference with derivative trees so tuning the
    expression updates every view of it.
    """

    root: Node
    constants: list[float]
    var_names: tuple[str, ...]
    _cache: dict = field(default_factory=dict, repr=False)

    def __eq__(self, other):
        if not isinstance(other, ExprTree):
            return NotImplemented
        return (
            self.root == other.root
            and self.constants == other.constants
            and self.var_names == other.var_names
        )

    def copy(self) -> "ExprTree":
        """Structural copy with an independent constants vector."""
        return ExprTree(self.root, list(self.constants), self.var_names)

    def n_nodes(self) -> int:
        count = 0
        stack = [self.root]
        while stack:
            n = stack.pop()
            count += 1
            stack.extend(n.args)
        return count


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

def _classify(gene: int, spec: EncodingSpec, lib: SymbolLibrary, in_main: bool):
    """Gene -> symbol for one task: ('fn', name) | ('adf', j) | ('term', name) | ('arg', g)."""
    a, b, c, d = spec.bound_a, spec.bound_b, spec.bound_c, spec.bound_d
    if gene < a:
        idx = scale_gene(gene, 0, a, len(lib.functions))
        return ("fn", lib.functions[idx])
    if gene < b:
        return ("adf", int(gene - a))
    if gene < c:
        idx = scale_gene(gene, b, c, len(lib.terminals))
        return ("term", lib.terminals[idx])
    if in_main:
        # ADF arguments are meaningless in the main body: wrap to a terminal.
        g2 = b + (gene - b) % (c - b)
        idx = scale_gene(g2, b, c, len(lib.terminals))
        return ("term", lib.terminals[idx])
    return ("arg", int(gene - c))


def _symbol_arity(sym, spec: EncodingSpec) -> int:
    kind, payload = sym
    if kind == "fn":
        return FUNCTION_ARITY[payload]
    if kind == "adf":
        return spec.num_adf_args
    return 0


def _build_unit(unit_genes, spec, lib, in_main):
    """Breadth-first Karva decode of one unit into a raw node tree."""
    syms = [_classify(int(g), spec, lib, in_main) for g in unit_genes]
    pos = 0

    def make(sym):
        kind, payload = sym
        if kind == "fn":
            return Node(payload, ())
        if kind == "adf":
            return Node("adfcall", (), payload)
        if kind == "arg":
            return Node("adfarg", (), payload)
        return Node("term", (), payload)

    root = make(syms[pos])
    pos += 1
    level = [root] if _symbol_arity(syms[0], spec) > 0 else []
    while level:
        nxt = []
        for node in level:
            need = FUNCTION_ARITY.get(node.op, spec.num_adf_args)
            children = []
            for _ in range(need):
                sym = syms[pos]
                child = make(sym)
                pos += 1
                children.append(child)
                if _symbol_arity(sym, spec) > 0:
                    nxt.append(child)
            node.args = tuple(children)
        level = nxt
    return root


def _copy_subtree(node: Node) -> Node:
    if not node.args:
        return Node(node.op, (), node.val)
    return Node(node.op, tuple(_copy_subtree(a) for a in node.args), node.val)


def _instantiate(genes, spec, lib, unit, arg_subtrees, constants):
    """Decode one unit, inlining ADF calls and substituting argument subtrees."""
    lo = unit * spec.unit_len
    raw = _build_unit(genes[lo: lo + spec.unit_len], spec, lib, in_main=unit == 0)

    def resolve(node: Node) -> Node:
        if node.op == "adfcall":
            j = node.val
            if unit > 0 and j <= unit - 1:
                raise GenomeError(f"ADF {unit - 1} illegally calls ADF {j}")
            call_args = [resolve(a) for a in node.args]
            return _instantiate(genes, spec, lib, j + 1, call_args, constants)
        if node.op == "adfarg":
            return _copy_subtree(arg_subtrees[node.val])
        if node.op == "term":
            if node.val == CONST_TOKEN:
                constants.append(1.0)
                return const(len(constants) - 1)
            return var(node.val)
        return Node(node.op, tuple(resolve(a) for a in node.args))

    return resolve(raw)


def decode(genes: Chromosome, spec: EncodingSpec, task) -> ExprTree:
    """Decode a chromosome into the task-specific, fully inlined tree.

    Deterministic and total on valid chromosomes; unused trailing genes are
    ignored per Karva semantics. Every constant placeholder allocates a fresh
    tunable constant initialized to 1.0.
    """
    lib = task.library
    constants: list[float] = []
    root = _instantiate(genes, spec, lib, 0, None, constants)
    return ExprTree(root, constants, lib.variables)


# ---------------------------------------------------------------------------
# infix serialization
# ---------------------------------------------------------------------------

_PREC = {"add": 1, "sub": 1, "mul": 2, "div": 2}


def _fmt(value: float) -> str:
    s = f"{value:.17g}"
    return f"({s})" if s.startswith("-") else s


def to_infix(tree: ExprTree) -> str:
    """Parenthesized infix text; constants at 17 significant digits."""

    def render(node: Node, ctx: int) -> str:
        op = node.op
        if op == "var":
            return node.val
        if op == "lit":
            return _fmt(node.val)
        if op == "const":
            return _fmt(tree.constants[node.val])
        if op == "pow":
            return f"({render(node.args[0], 0)})^({render(node.args[1], 0)})"
        if op in ("sin", "cos", "exp", "log"):
            return f"{op}({render(node.args[0], 0)})"
        sym = {"add": "+", "sub": "-", "mul": "*", "div": "/"}[op]
        prec = _PREC[op]
        left = render(node.args[0], prec - 1)
        right = render(node.args[1], prec)
        s = f"{left} {sym} {right}"
        return f"({s})" if prec <= ctx else s

    return render(tree.root, 0)


class ParseError(ValueError):
    """Syntax or symbol error while parsing infix text."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


_KNOWN_FUNCTIONS = ("sin", "cos", "exp", "log", "pow")
_DEFAULT_VARS = ("x", "y", "z", "t")


def parse_expr(text: str, variables: Iterable[str] = _DEFAULT_VARS) -> ExprTree:
    """Parse infix text over +, -, *, /, ^, sin/cos/exp/log and x,y,z,t.

    Numeric literals become tunable constants so parsed expressions behave
    like decoded ones.
    """
    variables = tuple(variables)
    tokens: list[tuple[str, object, int]] = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        if ch in "+-*/^(),":
            tokens.append(("op", ch, i))
            i += 1
            continue
        if ch.isdigit() or ch == ".":
            j = i
            while j < n and (text[j].isdigit() or text[j] == "."):
                j += 1
            if j < n and text[j] in "eE":
                k = j + 1
                if k < n and text[k] in "+-":
                    k += 1
                if k < n and text[k].isdigit():
                    j = k
                    while j < n and text[j].isdigit():
                        j += 1
            try:
                value = float(text[i:j])
            except ValueError:
                raise ParseError(f"bad number {text[i:j]!r}", i) from None
            tokens.append(("num", value, i))
            i = j
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(("name", text[i:j], i))
            i = j
            continue
        raise ParseError(f"unexpected character {ch!r}", i)
    tokens.append(("end", None, n))

    constants: list[float] = []
    pos = 0

    def peek():
        return tokens[pos]

    def take():
        nonlocal pos
        tok = tokens[pos]
        pos += 1
        return tok

    def expect(symbol):
        kind, val, at = take()
        if kind != "op" or val != symbol:
            raise ParseError(f"expected {symbol!r}", at)

    def parse_sum() -> Node:
        node = parse_term()
        while peek()[0] == "op" and peek()[1] in "+-":
            _, sym, _ = take()
            rhs = parse_term()
            node = fn("add" if sym == "+" else "sub", node, rhs)
        return node

    def parse_term() -> Node:
        node = parse_unary()
        while peek()[0] == "op" and peek()[1] in "*/":
            _, sym, _ = take()
            rhs = parse_unary()
            node = fn("mul" if sym == "*" else "div", node, rhs)
        return node

    def parse_unary() -> Node:
        kind, val, at = peek()
        if kind == "op" and val == "-":
            take()
            return fn("mul", lit(-1.0), parse_unary())
        if kind == "op" and val == "+":
            take()
            return parse_unary()
        return parse_power()

    def parse_power() -> Node:
        base = parse_atom()
        if peek()[0] == "op" and peek()[1] == "^":
            take()
            return fn("pow", base, parse_unary())
        return base

    def parse_atom() -> Node:
        kind, val, at = take()
        if kind == "num":
            constants.append(float(val))
            return const(len(constants) - 1)
        if kind == "name":
            if val in _KNOWN_FUNCTIONS:
                expect("(")
                args = [parse_sum()]
                while peek()[0] == "op" and peek()[1] == ",":
                    take()
                    args.append(parse_sum())
                expect(")")
                if val == "pow":
                    if len(args) != 2:
                        raise ParseError("pow takes two arguments", at)
                    return fn("pow", *args)
                if len(args) != 1:
                    raise ParseError(f"{val} takes one argument", at)
                return fn(val, args[0])
            if val in variables:
                return var(val)
            raise ParseError(f"unknown symbol {val!r}", at)
        if kind == "op" and val == "(":
            node = parse_sum()
            expect(")")
            return node
        raise ParseError("expected a value", at)

    root = parse_sum()
    kind, _, at = peek()
    if kind != "end":
        raise ParseError("trailing input", at)
    used = tuple(v for v in variables if _uses_var(root, v))
    return ExprTree(root, constants, used if used else variables)


def _uses_var(node: Node, name: str) -> bool:
    if node.op == "var" and node.val == name:
        return True
    return any(_uses_var(a, name) for a in node.args)
