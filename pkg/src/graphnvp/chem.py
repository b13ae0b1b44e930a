"""Restricted kekulized-SMILES input/output and chemistry-level checks.

The accepted grammar covers uppercase atoms (C, N, O, F, S, Cl), default
single bonds with ``=`` and ``#`` for double/triple, parenthesized branches,
ring closures with digits 1-9, and ``.`` as a fragment separator for
disconnected structures.  No charges, isotopes, stereo markers, or aromatic
lowercase; aromatic input must be kekulized beforehand.

Canonical strings come from iterative neighborhood refinement with full
tie-breaking (branch on every tied atom, keep the lexicographically smallest
serialization), so isomorphic molecules always map to the same text.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ChemError, DatasetError, SmilesParseError
from .graphs import GraphSpec, MolecularGraph

log = logging.getLogger(__name__)

# Maximum total bond order per atom symbol; shared by both bundled vocabularies.
DEFAULT_VALENCES = {"C": 4, "N": 3, "O": 2, "F": 1, "S": 6, "Cl": 1}

_BOND_TEXT = {1: "", 2: "=", 3: "#"}
_ATOM_TOKENS = ("Cl", "C", "N", "O", "F", "S")  # two-character symbols first


@dataclass(frozen=True)
class ValenceTable:
    """Map from atom symbol to its maximum total bond order."""

    max_order: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_VALENCES))

    def limit(self, symbol: str) -> int:
        try:
            return self.max_order[symbol]
        except KeyError:
            raise ChemError(f"no valence entry for atom symbol {symbol!r}") from None


@dataclass
class Molecule:
    """Atom/bond list bridging SMILES text and padded graph tensors.

    Bonds are ``(i, j, order)`` triples with ``order`` in {1, 2, 3}.  The
    constructor is permissive (an empty molecule is representable so decoded
    junk can be inspected); :meth:`validate` enforces the invariants.
    """

    atoms: list[str]
    bonds: list[tuple[int, int, int]]

    def validate(self) -> "Molecule":
        if len(self.atoms) < 1:
            raise ChemError("molecule needs at least one atom")
        seen = set()
        for i, j, order in self.bonds:
            if not (0 <= i < len(self.atoms) and 0 <= j < len(self.atoms)):
                raise ChemError(f"bond ({i}, {j}) references a missing atom")
            if i == j:
                raise ChemError(f"atom {i} bonded to itself")
            if order not in (1, 2, 3):
                raise ChemError(f"bond order {order} not in 1..3")
            pair = (min(i, j), max(i, j))
            if pair in seen:
                raise ChemError(f"duplicate bond between atoms {pair[0]} and {pair[1]}")
            seen.add(pair)
        return self

    def neighbor_map(self) -> list[list[tuple[int, int]]]:
        """Per-atom list of (neighbor index, bond order)."""
        nbrs: list[list[tuple[int, int]]] = [[] for _ in self.atoms]
        for i, j, order in self.bonds:
            nbrs[i].append((j, order))
            nbrs[j].append((i, order))
        return nbrs

    def components(self) -> list[list[int]]:
        """Connected components as sorted atom-index lists."""
        nbrs = self.neighbor_map()
        unseen = set(range(len(self.atoms)))
        comps = []
        while unseen:
            root = min(unseen)
            stack, comp = [root], []
            unseen.discard(root)
            while stack:
                a = stack.pop()
                comp.append(a)
                for b, _ in nbrs[a]:
                    if b in unseen:
                        unseen.discard(b)
                        stack.append(b)
            comps.append(sorted(comp))
        return comps


@dataclass(frozen=True)
class ValidityReport:
    ok: bool
    atom_count: int
    violations: tuple[str, ...]
    connected: bool


def check_validity(molecule: Molecule, table: ValenceTable | None = None) -> ValidityReport:
    """Valence check: every atom's summed bond order within its table limit.

    Disconnected molecules count as valid; connectivity is reported
    separately.  An empty molecule is invalid.
    """
    table = table or ValenceTable()
    violations = []
    if len(molecule.atoms) < 1:
        violations.append("molecule has no atoms")
    totals = [0] * len(molecule.atoms)
    for i, j, order in molecule.bonds:
        totals[i] += order
        totals[j] += order
    for idx, symbol in enumerate(molecule.atoms):
        limit = table.limit(symbol)
        if totals[idx] > limit:
            violations.append(f"atom {idx} ({symbol}) has bond order {totals[idx]} > {limit}")
    connected = len(molecule.components()) <= 1
    return ValidityReport(
        ok=not violations,
        atom_count=len(molecule.atoms),
        violations=tuple(violations),
        connected=connected,
    )


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def _match_atom(text: str, i: int) -> str | None:
    for token in _ATOM_TOKENS:
        if text.startswith(token, i):
            return token
    return None


def parse_smiles_lite(text: str) -> Molecule:
    """Parse restricted SMILES text into a :class:`Molecule`.

    Raises :class:`SmilesParseError` with the byte offset of the offending
    character for unmatched parentheses, unmatched ring digits, unknown atom
    symbols, and dangling bond symbols.
    """
    atoms: list[str] = []
    bonds: list[tuple[int, int, int]] = []
    bonded_pairs: set[tuple[int, int]] = set()
    prev: int | None = None
    pending: tuple[int, int] | None = None  # (order, offset)
    branch_stack: list[tuple[int, int]] = []  # (atom index, '(' offset)
    open_rings: dict[str, tuple[int, int | None, int]] = {}  # digit -> (atom, order, offset)
    dangling_dot: int | None = None

    def add_bond(i: int, j: int, order: int, offset: int) -> None:
        pair = (min(i, j), max(i, j))
        if i == j:
            raise SmilesParseError("ring closure bonds an atom to itself", offset)
        if pair in bonded_pairs:
            raise SmilesParseError("ring closure duplicates an existing bond", offset)
        bonded_pairs.add(pair)
        bonds.append((i, j, order))

    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "(":
            if prev is None:
                raise SmilesParseError("branch start without a preceding atom", i)
            if pending is not None:
                raise SmilesParseError("bond symbol with no following atom", pending[1])
            branch_stack.append((prev, i))
            i += 1
        elif ch == ")":
            if pending is not None:
                raise SmilesParseError("bond symbol with no following atom", pending[1])
            if not branch_stack:
                raise SmilesParseError("unmatched ')'", i)
            prev = branch_stack.pop()[0]
            i += 1
        elif ch in "=#":
            if prev is None:
                raise SmilesParseError("bond symbol without a preceding atom", i)
            if pending is not None:
                raise SmilesParseError("two bond symbols in a row", i)
            pending = (2 if ch == "=" else 3, i)
            i += 1
        elif ch.isdigit():
            if ch == "0":
                raise SmilesParseError("ring closure digits are 1-9", i)
            if prev is None:
                raise SmilesParseError("ring digit without a preceding atom", i)
            if ch in open_rings:
                other, opened_order, _ = open_rings.pop(ch)
                closing_order = pending[0] if pending is not None else None
                if (
                    opened_order is not None
                    and closing_order is not None
                    and opened_order != closing_order
                ):
                    raise SmilesParseError("ring closure bond orders disagree", i)
                order = opened_order or closing_order or 1
                add_bond(other, prev, order, i)
            else:
                open_rings[ch] = (prev, pending[0] if pending is not None else None, i)
            pending = None
            i += 1
        elif ch == ".":
            if pending is not None:
                raise SmilesParseError("bond symbol with no following atom", pending[1])
            if branch_stack:
                raise SmilesParseError("fragment separator inside a branch", i)
            if prev is None:
                raise SmilesParseError("fragment separator without a preceding atom", i)
            prev = None
            dangling_dot = i
            i += 1
        else:
            symbol = _match_atom(text, i)
            if symbol is None:
                raise SmilesParseError(f"unknown atom symbol {ch!r}", i)
            idx = len(atoms)
            atoms.append(symbol)
            if prev is not None:
                add_bond(prev, idx, pending[0] if pending is not None else 1, i)
            pending = None
            dangling_dot = None
            prev = idx
            i += len(symbol)

    if pending is not None:
        raise SmilesParseError("bond symbol with no following atom", pending[1])
    if dangling_dot is not None:
        raise SmilesParseError("fragment separator with no following atom", dangling_dot)
    if branch_stack:
        raise SmilesParseError("unmatched '('", branch_stack[-1][1])
    if open_rings:
        first = min(offset for _, _, offset in open_rings.values())
        raise SmilesParseError("unmatched ring closure digit", first)
    if not atoms:
        raise SmilesParseError("empty SMILES string", 0)
    return Molecule(atoms, bonds).validate()


# ---------------------------------------------------------------------------
# canonical writing
# ---------------------------------------------------------------------------


def _refine(colors: list[int], nbrs: list[list[tuple[int, int]]], members: list[int]) -> list[int]:
    """Iterate neighborhood refinement until the partition stabilizes."""
    while True:
        keys = {
            a: (colors[a], tuple(sorted((order, colors[b]) for b, order in nbrs[a])))
            for a in members
        }
        ranked = {key: rank for rank, key in enumerate(sorted(set(keys.values())))}
        new = list(colors)
        for a in members:
            new[a] = ranked[keys[a]]
        if all(new[a] == colors[a] for a in members):
            return new
        colors = new


def _serialize(
    molecule: Molecule,
    members: list[int],
    rank: dict[int, int],
    nbrs: list[list[tuple[int, int]]],
) -> str:
    """Emit one SMILES string for a component under a discrete atom ranking."""
    root = min(members, key=lambda a: rank[a])

    # Pass 1: preorder DFS (children in rank order, matching emission order)
    # fixes the spanning tree; every non-tree edge becomes a ring closure.
    children: dict[int, list[int]] = {a: [] for a in members}
    ring_bonds: dict[int, list[tuple[int, int]]] = {a: [] for a in members}
    seen_edges: set[tuple[int, int]] = set()
    visited = {root}

    def walk(atom: int) -> None:
        for other, order in sorted(nbrs[atom], key=lambda e: rank[e[0]]):
            edge = (min(atom, other), max(atom, other))
            if edge in seen_edges:
                continue
            seen_edges.add(edge)
            if other in visited:
                ring_bonds[atom].append((other, order))
                ring_bonds[other].append((atom, order))
            else:
                visited.add(other)
                children[atom].append(other)
                walk(other)

    walk(root)

    # Pass 2: emit text; ring digits allocated at the opening end.
    out: list[str] = []
    digit_for: dict[tuple[int, int], str] = {}
    free_digits = [str(d) for d in range(1, 10)]
    emitted: set[int] = set()

    def emit(atom: int) -> None:
        out.append(molecule.atoms[atom])
        emitted.add(atom)
        closings = []
        openings = []
        for other, order in ring_bonds[atom]:
            edge = (min(atom, other), max(atom, other))
            if other in emitted:
                closings.append((digit_for[edge], edge))
            else:
                openings.append((rank[other], edge, order))
        for digit, edge in sorted(closings):
            out.append(digit)
            free_digits.append(digit)
            free_digits.sort()
        for _, edge, order in sorted(openings):
            if not free_digits:
                raise ChemError("more than 9 simultaneously open ring closures")
            digit = free_digits.pop(0)
            digit_for[edge] = digit
            out.append(_BOND_TEXT[order] + digit)
        kids = children[atom]
        for child in kids[:-1]:
            out.append("(")
            out.append(_bond_text_between(molecule, atom, child, nbrs))
            emit(child)
            out.append(")")
        if kids:
            out.append(_bond_text_between(molecule, atom, kids[-1], nbrs))
            emit(kids[-1])

    emit(root)
    return "".join(out)


def _bond_text_between(molecule, a, b, nbrs) -> str:
    for other, order in nbrs[a]:
        if other == b:
            return _BOND_TEXT[order]
    raise ChemError(f"no bond between atoms {a} and {b}")


def _canonical_component(molecule: Molecule, members: list[int]) -> str:
    nbrs = molecule.neighbor_map()
    n = len(molecule.atoms)
    initial = {
        a: (
            molecule.atoms[a],
            len(nbrs[a]),
            tuple(sorted(order for _, order in nbrs[a])),
        )
        for a in members
    }
    ranked = {key: r for r, key in enumerate(sorted(set(initial.values())))}
    colors = [0] * n
    for a in members:
        colors[a] = ranked[initial[a]]
    colors = _refine(colors, nbrs, members)

    best: list[str | None] = [None]

    def search(colors: list[int]) -> None:
        cells: dict[int, list[int]] = {}
        for a in members:
            cells.setdefault(colors[a], []).append(a)
        tied = [c for c, atoms in sorted(cells.items()) if len(atoms) > 1]
        if not tied:
            rank = {a: colors[a] for a in members}
            text = _serialize(molecule, members, rank, nbrs)
            if best[0] is None or text < best[0]:
                best[0] = text
            return
        cell = cells[tied[0]]
        for chosen in cell:
            branched = list(colors)
            # Give the chosen atom a strictly smaller color, then re-refine.
            for a in members:
                branched[a] = colors[a] * 2 + (0 if a == chosen else 1)
            search(_refine(branched, nbrs, members))

    search(colors)
    assert best[0] is not None
    return best[0]


def write_smiles_canonical(molecule: Molecule) -> str:
    """Deterministic text form: identical for every atom relabeling.

    Disconnected molecules serialize as '.'-joined component strings in
    sorted order.  Raises :class:`ChemError` for invalid molecules.
    """
    molecule.validate()
    report = check_validity(molecule)
    if not report.ok:
        raise ChemError("cannot canonicalize an invalid molecule: " + "; ".join(report.violations))
    pieces = [_canonical_component(molecule, comp) for comp in molecule.components()]
    return ".".join(sorted(pieces))


# ---------------------------------------------------------------------------
# graph conversion
# ---------------------------------------------------------------------------


def to_graph(molecule: Molecule, spec: GraphSpec) -> MolecularGraph:
    """Pad a molecule to the spec's node count with virtual atoms and bonds."""
    molecule.validate()
    n = spec.num_nodes
    if len(molecule.atoms) > n:
        raise ChemError(f"molecule with {len(molecule.atoms)} atoms exceeds spec size {n}")
    features = np.zeros(spec.feature_shape())
    for idx, symbol in enumerate(molecule.atoms):
        try:
            col = spec.atom_vocab.index(symbol)
        except ValueError:
            raise ChemError(f"atom symbol {symbol!r} not in spec vocabulary") from None
        if col == spec.virtual_atom:
            raise ChemError("molecules may not contain the virtual atom symbol")
        features[idx, col] = 1.0
    features[len(molecule.atoms):, spec.virtual_atom] = 1.0

    adjacency = np.zeros(spec.adjacency_shape())
    adjacency[:, :, spec.virtual_bond] = 1.0
    for i, j, order in molecule.bonds:
        channel = order - 1
        adjacency[i, j, :] = 0.0
        adjacency[j, i, :] = 0.0
        adjacency[i, j, channel] = 1.0
        adjacency[j, i, channel] = 1.0
    return MolecularGraph(spec, adjacency, features).validate()


def from_graph(graph: MolecularGraph) -> Molecule:
    """Drop virtual padding; may return an empty or invalid molecule."""
    graph.validate()
    spec = graph.spec
    kinds = graph.features.argmax(axis=1)
    real = [i for i in range(spec.num_nodes) if kinds[i] != spec.virtual_atom]
    compact = {node: idx for idx, node in enumerate(real)}
    atoms = [spec.atom_vocab[kinds[i]] for i in real]
    bonds = []
    for a in real:
        for b in real:
            if a >= b:
                continue
            channel = int(graph.adjacency[a, b].argmax())
            if channel != spec.virtual_bond:
                bonds.append((compact[a], compact[b], channel + 1))
    return Molecule(atoms, bonds)


# ---------------------------------------------------------------------------
# dataset loading
# ---------------------------------------------------------------------------


def load_dataset(path, spec: GraphSpec, strict: bool = True) -> list[MolecularGraph]:
    """Load a newline-delimited SMILES file into padded graphs.

    Blank lines and lines starting with '#' are skipped.  In strict mode the
    first bad line aborts with its line number; in lenient mode bad lines are
    skipped with a warning.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot read dataset {path}: {exc}") from exc
    graphs: list[MolecularGraph] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            molecule = parse_smiles_lite(line)
            report = check_validity(molecule)
            if not report.ok:
                raise ChemError("; ".join(report.violations))
            graphs.append(to_graph(molecule, spec))
        except (ChemError, SmilesParseError) as exc:
            if strict:
                raise DatasetError(f"{path.name} line {lineno}: {exc}") from exc
            log.warning("%s line %d skipped: %s", path.name, lineno, exc)
    return graphs


def bundled_corpus_path(name: str) -> Path:
    """Filesystem path of a corpus shipped with the package (qm9lite, zinclite)."""
    ref = resources.files("graphnvp").joinpath("data").joinpath(f"{name}.smi")
    if not ref.is_file():
        raise DatasetError(f"no bundled corpus named {name!r}")
    return Path(str(ref))
