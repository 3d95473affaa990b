"""SMILES parsing into heavy-atom molecular graphs, ring perception and Murcko scaffolds.

Supported grammar: organic-subset atoms (B C N O P S F Cl Br I and aromatic
b c n o p s), bracket atoms ``[isotope? symbol chirality? Hn? charge? :class?]``,
branches, ring closures ``1``-``9`` and ``%nn``, bond symbols ``- = # :`` and the
directional markers ``/`` and ``\\`` (read as single bonds).  Isotopes, chirality
and atom classes are parsed and thrown away.  Dot-separated fragments are
parsed and only the largest one (by heavy-atom count) is kept.

Implicit hydrogens on organic-subset atoms follow this rule.  Let ``s`` be the
sum of incident bond orders with single, aromatic = 1, double = 2, triple = 3.

* non-aromatic atom: ``v`` = smallest standard valence >= ``s``;
  ``implicit_h = v - s`` (0 when ``s`` exceeds every listed valence).
* aromatic atom: ``v`` = smallest standard valence >= ``s``;
  ``implicit_h = max(0, v - s - 1)``.  The extra 1 is the atom's share of the
  delocalised pi system (half of the two aromatic half-bonds, rounded down).

So ``c`` in benzene has one H, ring-fusion ``c`` none, ``n``/``o``/``s`` none.
Pyrrole-type nitrogens must be written ``[nH]``.  Bracket atoms carry exactly
the hydrogens they state.  Explicit hydrogen atoms (``[H]``, ``[2H]``) bonded to
one heavy atom are folded into that atom's hydrogen count.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from enum import IntEnum

import numpy as np


class SmilesError(ValueError):
    """Raised when a SMILES string cannot be turned into a Molecule."""


class BondOrder(IntEnum):
    SINGLE = 1
    DOUBLE = 2
    TRIPLE = 3
    AROMATIC = 4

    @property
    def valence(self) -> int:
        return 1 if self is BondOrder.AROMATIC else int(self)

    @property
    def symbol(self) -> str:
        return {1: "-", 2: "=", 3: "#", 4: ":"}[int(self)]


# symbol -> (atomic number, standard valences); valences are only used for
# organic-subset atoms, bracket atoms state their hydrogens explicitly.
ELEMENTS: dict[str, tuple[int, tuple[int, ...]]] = {
    "H": (1, (1,)),
    "Li": (3, (1,)),
    "B": (5, (3,)),
    "C": (6, (4,)),
    "N": (7, (3,)),
    "O": (8, (2,)),
    "F": (9, (1,)),
    "Na": (11, (1,)),
    "Mg": (12, (2,)),
    "Al": (13, (3,)),
    "Si": (14, (4,)),
    "P": (15, (3, 5)),
    "S": (16, (2, 4, 6)),
    "Cl": (17, (1,)),
    "K": (19, (1,)),
    "Ca": (20, (2,)),
    "Fe": (26, (2, 3)),
    "Cu": (29, (1, 2)),
    "Zn": (30, (2,)),
    "Ge": (32, (4,)),
    "As": (33, (3, 5)),
    "Se": (34, (2, 4, 6)),
    "Br": (35, (1,)),
    "Sn": (50, (2, 4)),
    "Te": (52, (2, 4, 6)),
    "I": (53, (1,)),
}
ORGANIC_SUBSET = ("Cl", "Br", "B", "C", "N", "O", "P", "S", "F", "I")
AROMATIC_ORGANIC = ("b", "c", "n", "o", "p", "s")
AROMATIC_BRACKET = ("se", "as", "te", "b", "c", "n", "o", "p", "s")

_BRACKET_RE = re.compile(
    r"^(?P<isotope>\d+)?"
    r"(?P<symbol>[A-Z][a-z]?|se|as|te|[bcnops])"
    r"(?P<chiral>@{1,2}(?:TH[12]|AL[12]|SP[123]|TB\d{1,2}|OH\d{1,2})?)?"
    r"(?P<hcount>H\d?)?"
    r"(?P<charge>[+-]\d*|\+\++|--+)?"
    r"(?::(?P<klass>\d+))?$"
)


@dataclass(frozen=True)
class Atom:
    element: str
    atomic_number: int
    formal_charge: int = 0
    aromatic: bool = False
    implicit_h: int = 0
    in_ring: bool = False
    degree: int = 0


@dataclass(frozen=True)
class Bond:
    begin: int
    end: int
    order: BondOrder
    in_ring: bool = False

    @property
    def endpoints(self) -> tuple[int, int]:
        return (self.begin, self.end)


@dataclass(frozen=True)
class Molecule:
    atoms: tuple[Atom, ...]
    bonds: tuple[Bond, ...]
    source_smiles: str = ""

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    def neighbors(self) -> list[list[tuple[int, Bond]]]:
        """Adjacency list: for each atom, (neighbor index, bond) pairs in bond order."""
        adj: list[list[tuple[int, Bond]]] = [[] for _ in self.atoms]
        for bond in self.bonds:
            adj[bond.begin].append((bond.end, bond))
            adj[bond.end].append((bond.begin, bond))
        return adj

    def bond_array(self) -> np.ndarray:
        """Undirected bond list as an (n_bonds, 2) integer array."""
        if not self.bonds:
            return np.zeros((0, 2), dtype=np.int64)
        return np.array([b.endpoints for b in self.bonds], dtype=np.int64)


@dataclass
class _RawAtom:
    element: str
    aromatic: bool
    bracket: bool
    charge: int = 0
    hcount: int = 0


def _parse_charge(text: str | None) -> int:
    if not text:
        return 0
    if len(text) > 1 and text[1:].isdigit():
        value = int(text[1:])
    else:
        value = len(text)
    return value if text[0] == "+" else -value


def _parse_bracket(content: str, smiles: str) -> _RawAtom:
    m = _BRACKET_RE.match(content)
    if m is None:
        raise SmilesError(f"cannot parse bracket atom [{content}] in {smiles!r}")
    symbol = m.group("symbol")
    aromatic = symbol[0].islower()
    element = symbol.capitalize() if aromatic else symbol
    if element not in ELEMENTS or (aromatic and symbol not in AROMATIC_BRACKET):
        raise SmilesError(f"unknown atom symbol {symbol!r} in {smiles!r}")
    hcount_text = m.group("hcount")
    hcount = 0
    if hcount_text:
        hcount = int(hcount_text[1:]) if len(hcount_text) > 1 else 1
    charge = _parse_charge(m.group("charge"))
    if not -4 <= charge <= 4:
        raise SmilesError(f"charge {charge:+d} out of range [-4, 4] in {smiles!r}")
    return _RawAtom(element, aromatic, True, charge, hcount)


def _implicit_hydrogens(element: str, aromatic: bool, bond_sum: int) -> int:
    valences = ELEMENTS[element][1]
    target = next((v for v in valences if v >= bond_sum), None)
    if target is None:
        return 0
    if aromatic:
        return max(0, target - bond_sum - 1)
    return target - bond_sum


def _tokenize_and_build(smiles: str) -> tuple[list[_RawAtom], list[tuple[int, int, BondOrder | None]]]:
    atoms: list[_RawAtom] = []
    # (a, b, explicit order or None -> decided from aromaticity later)
    bonds: list[tuple[int, int, BondOrder | None]] = []
    stack: list[int] = []
    prev: int | None = None
    pending: BondOrder | None = None
    pending_set = False
    rings: dict[int, tuple[int, BondOrder | None]] = {}
    i, n = 0, len(smiles)

    def add_atom(raw: _RawAtom) -> None:
        nonlocal prev, pending, pending_set
        idx = len(atoms)
        atoms.append(raw)
        if prev is not None:
            bonds.append((prev, idx, pending))
        elif pending_set:
            raise SmilesError(f"bond symbol without a preceding atom in {smiles!r}")
        prev = idx
        pending, pending_set = None, False

    while i < n:
        ch = smiles[i]
        if ch == "[":
            j = smiles.find("]", i)
            if j < 0:
                raise SmilesError(f"unterminated bracket atom in {smiles!r}")
            add_atom(_parse_bracket(smiles[i + 1 : j], smiles))
            i = j + 1
            continue
        two = smiles[i : i + 2]
        if two in ("Cl", "Br"):
            add_atom(_RawAtom(two, False, False))
            i += 2
            continue
        if ch in ORGANIC_SUBSET:
            add_atom(_RawAtom(ch, False, False))
        elif ch in AROMATIC_ORGANIC:
            add_atom(_RawAtom(ch.upper(), True, False))
        elif ch == "(":
            if prev is None:
                raise SmilesError(f"branch opened without an atom in {smiles!r}")
            stack.append(prev)
        elif ch == ")":
            if not stack:
                raise SmilesError(f"unbalanced parentheses in {smiles!r}")
            if pending_set:
                raise SmilesError(f"dangling bond symbol before ')' in {smiles!r}")
            prev = stack.pop()
        elif ch in "-=#:/\\":
            if pending_set:
                raise SmilesError(f"consecutive bond symbols in {smiles!r}")
            pending = {
                "-": BondOrder.SINGLE,
                "/": BondOrder.SINGLE,
                "\\": BondOrder.SINGLE,
                "=": BondOrder.DOUBLE,
                "#": BondOrder.TRIPLE,
                ":": BondOrder.AROMATIC,
            }[ch]
            pending_set = True
        elif ch.isdigit() or ch == "%":
            if ch == "%":
                digits = smiles[i + 1 : i + 3]
                if len(digits) != 2 or not digits.isdigit():
                    raise SmilesError(f"malformed %nn ring closure in {smiles!r}")
                label = int(digits)
                i += 2
            else:
                label = int(ch)
            if prev is None:
                raise SmilesError(f"ring closure without an atom in {smiles!r}")
            if label in rings:
                other, order = rings.pop(label)
                if pending_set and order is not None and order != pending:
                    raise SmilesError(f"conflicting ring-closure bond orders in {smiles!r}")
                if other == prev:
                    raise SmilesError(f"ring closure onto the same atom in {smiles!r}")
                bonds.append((other, prev, pending if pending_set else order))
            else:
                rings[label] = (prev, pending if pending_set else None)
            pending, pending_set = None, False
        elif ch == ".":
            if pending_set:
                raise SmilesError(f"bond symbol before '.' in {smiles!r}")
            prev = None
        elif ch in " \t\r\n":
            break
        else:
            raise SmilesError(f"unknown atom symbol {ch!r} in {smiles!r}")
        i += 1

    if stack:
        raise SmilesError(f"unbalanced parentheses in {smiles!r}")
    if rings:
        raise SmilesError(f"unmatched ring-closure digit(s) {sorted(rings)} in {smiles!r}")
    if pending_set:
        raise SmilesError(f"trailing bond symbol in {smiles!r}")
    return atoms, bonds


def _components(n: int, edges: list[tuple[int, int]]) -> list[int]:
    parent = list(range(n))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a, b in edges:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    return [find(a) for a in range(n)]


def parse_smiles(text: str) -> Molecule:
    """Parse ``text`` into a Molecule with rings perceived.

    Raises SmilesError for syntax errors, unknown symbols, charges outside
    [-4, 4] and inputs that leave no heavy atoms.
    """
    if not text or not text.strip():
        raise SmilesError("empty SMILES")
    if not text.isascii():
        raise SmilesError(f"non-ASCII SMILES {text!r}")
    smiles = text.strip()
    raw_atoms, raw_bonds = _tokenize_and_build(smiles)

    seen: set[tuple[int, int]] = set()
    bonds: list[tuple[int, int, BondOrder]] = []
    for a, b, order in raw_bonds:
        key = (min(a, b), max(a, b))
        if key in seen:
            raise SmilesError(f"parallel bond between atoms {a} and {b} in {smiles!r}")
        seen.add(key)
        both_aromatic = raw_atoms[a].aromatic and raw_atoms[b].aromatic
        if order is None:
            order = BondOrder.AROMATIC if both_aromatic else BondOrder.SINGLE
        elif order is BondOrder.AROMATIC and not both_aromatic:
            raise SmilesError(f"aromatic bond between non-aromatic atoms in {smiles!r}")
        bonds.append((a, b, order))

    # implicit hydrogens, computed on the full graph (explicit H atoms included)
    bond_sum = [0] * len(raw_atoms)
    for a, b, order in bonds:
        bond_sum[a] += order.valence
        bond_sum[b] += order.valence
    hydrogens = []
    for k, raw in enumerate(raw_atoms):
        if raw.bracket:
            hydrogens.append(raw.hcount)
        else:
            hydrogens.append(_implicit_hydrogens(raw.element, raw.aromatic, bond_sum[k]))

    # fold explicit hydrogen atoms with at most one neighbour into that neighbour
    degree = [0] * len(raw_atoms)
    for a, b, _ in bonds:
        degree[a] += 1
        degree[b] += 1
    drop = {k for k, raw in enumerate(raw_atoms) if raw.element == "H" and degree[k] <= 1}
    for a, b, _ in bonds:
        if a in drop and b not in drop:
            hydrogens[b] += 1
        elif b in drop and a not in drop:
            hydrogens[a] += 1
    heavy = [k for k in range(len(raw_atoms)) if k not in drop]
    heavy_bonds = [(a, b, o) for a, b, o in bonds if a not in drop and b not in drop]

    # keep the largest fragment; ties go to the one appearing first
    roots = _components(len(raw_atoms), [(a, b) for a, b, _ in heavy_bonds])
    sizes: dict[int, int] = {}
    for k in heavy:
        sizes[roots[k]] = sizes.get(roots[k], 0) + 1
    if not sizes:
        raise SmilesError(f"no heavy atoms left after fragment selection in {smiles!r}")
    best = max(sizes, key=lambda r: (sizes[r], -r))
    keep = [k for k in heavy if roots[k] == best]
    remap = {old: new for new, old in enumerate(keep)}
    kept_bonds = [(remap[a], remap[b], o) for a, b, o in heavy_bonds if a in remap]

    final_degree = [0] * len(keep)
    for a, b, _ in kept_bonds:
        final_degree[a] += 1
        final_degree[b] += 1
    atoms = tuple(
        Atom(
            element=raw_atoms[old].element,
            atomic_number=ELEMENTS[raw_atoms[old].element][0],
            formal_charge=raw_atoms[old].charge,
            aromatic=raw_atoms[old].aromatic,
            implicit_h=hydrogens[old],
            degree=final_degree[new],
        )
        for new, old in enumerate(keep)
    )
    mol = perceive_rings(
        Molecule(atoms, tuple(Bond(a, b, o) for a, b, o in kept_bonds), source_smiles=text)
    )
    for k, atom in enumerate(mol.atoms):
        if atom.aromatic and not atom.in_ring:
            raise SmilesError(f"aromatic atom {k} ({atom.element}) is not in a ring in {smiles!r}")
    return mol


def _bridges(n: int, bonds: tuple[Bond, ...]) -> set[int]:
    """Indices of bridge bonds (Tarjan low-link, iterative)."""
    adj: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    for k, bond in enumerate(bonds):
        adj[bond.begin].append((bond.end, k))
        adj[bond.end].append((bond.begin, k))
    disc = [-1] * n
    low = [0] * n
    bridges: set[int] = set()
    timer = 0
    for root in range(n):
        if disc[root] >= 0:
            continue
        disc[root] = low[root] = timer
        timer += 1
        # (node, bond index used to enter, iterator position)
        stack = [(root, -1, 0)]
        while stack:
            node, via, pos = stack[-1]
            if pos < len(adj[node]):
                stack[-1] = (node, via, pos + 1)
                nxt, k = adj[node][pos]
                if k == via:
                    continue
                if disc[nxt] < 0:
                    disc[nxt] = low[nxt] = timer
                    timer += 1
                    stack.append((nxt, k, 0))
                else:
                    low[node] = min(low[node], disc[nxt])
            else:
                stack.pop()
                if stack:
                    parent = stack[-1][0]
                    low[parent] = min(low[parent], low[node])
                    if low[node] > disc[parent]:
                        bridges.add(via)
    return bridges


def perceive_rings(mol: Molecule) -> Molecule:
    """Flag atoms and bonds lying on a cycle; a bond is a ring bond iff it is not a bridge."""
    bridges = _bridges(mol.n_atoms, mol.bonds)
    bonds = tuple(replace(b, in_ring=k not in bridges) for k, b in enumerate(mol.bonds))
    ring_atoms = set()
    for b in bonds:
        if b.in_ring:
            ring_atoms.update(b.endpoints)
    atoms = tuple(replace(a, in_ring=k in ring_atoms) for k, a in enumerate(mol.atoms))
    return Molecule(atoms, bonds, mol.source_smiles)


def murcko_scaffold(mol: Molecule) -> Molecule:
    """Ring systems plus linkers: repeatedly strip non-ring atoms of degree 1.

    Degrees are recomputed on the remaining graph but hydrogen counts are
    inherited unchanged from ``mol``, so an atom that lost a substituent keeps
    a record of the substitution site in its fingerprint invariants.
    Acyclic molecules give an empty scaffold.
    """
    alive = [True] * mol.n_atoms
    degree = [a.degree for a in mol.atoms]
    adj = mol.neighbors()
    frontier = [k for k, a in enumerate(mol.atoms) if degree[k] <= 1 and not a.in_ring]
    while frontier:
        nxt = []
        for k in frontier:
            if not alive[k]:
                continue
            alive[k] = False
            for other, _ in adj[k]:
                if alive[other]:
                    degree[other] -= 1
                    if degree[other] <= 1 and not mol.atoms[other].in_ring:
                        nxt.append(other)
        frontier = nxt
    keep = [k for k in range(mol.n_atoms) if alive[k]]
    if not any(mol.atoms[k].in_ring for k in keep):
        return Molecule((), (), mol.source_smiles)
    remap = {old: new for new, old in enumerate(keep)}
    atoms = tuple(
        replace(mol.atoms[k], degree=degree[k]) for k in keep
    )
    bonds = tuple(
        Bond(remap[b.begin], remap[b.end], b.order, b.in_ring)
        for b in mol.bonds
        if b.begin in remap and b.end in remap
    )
    return Molecule(atoms, bonds, mol.source_smiles)


def _atom_token(atom: Atom) -> str:
    symbol = atom.element.lower() if atom.aromatic else atom.element
    h = "" if atom.implicit_h == 0 else ("H" if atom.implicit_h == 1 else f"H{atom.implicit_h}")
    q = atom.formal_charge
    charge = "" if q == 0 else (f"{'+' if q > 0 else '-'}{abs(q) if abs(q) > 1 else ''}")
    return f"[{symbol}{h}{charge}]"


def to_smiles(mol: Molecule, root: int = 0, rng: np.random.Generator | None = None) -> str:
    """Write a non-canonical SMILES by depth-first traversal from ``root``.

    Every atom is written in brackets with its hydrogen count and every bond
    symbol is explicit, so re-parsing reproduces the same graph.  With ``rng``
    the neighbour visiting order is shuffled, which yields randomized atom
    orderings of the same molecule.
    """
    if mol.n_atoms == 0:
        return ""
    adj = mol.neighbors()
    order_of = {}
    if rng is not None:
        for k in range(mol.n_atoms):
            perm = rng.permutation(len(adj[k]))
            adj[k] = [adj[k][p] for p in perm]

    # first pass: DFS tree, ring-closure bonds are the non-tree ones
    visited = [False] * mol.n_atoms
    tree_children: list[list[tuple[int, Bond]]] = [[] for _ in range(mol.n_atoms)]
    closures: list[list[tuple[int, Bond]]] = [[] for _ in range(mol.n_atoms)]
    used_bonds: set[tuple[int, int]] = set()
    stack = [(root, -1)]
    counter = 0
    while stack:
        node, parent = stack.pop()
        if visited[node]:
            continue
        visited[node] = True
        order_of[node] = counter
        counter += 1
        if parent >= 0:
            for other, bond in adj[parent]:
                if other == node:
                    tree_children[parent].append((node, bond))
                    used_bonds.add((min(node, parent), max(node, parent)))
                    break
        for other, _ in reversed(adj[node]):
            if not visited[other]:
                stack.append((other, node))
    for bond in mol.bonds:
        key = (min(bond.begin, bond.end), max(bond.begin, bond.end))
        if key not in used_bonds:
            a, b = sorted(bond.endpoints, key=lambda x: order_of[x])
            closures[a].append((b, bond))

    labels: dict[tuple[int, int], int] = {}
    free = list(range(1, 100))
    out: list[str] = []

    def label_text(num: int) -> str:
        return str(num) if num < 10 else f"%{num:02d}"

    def emit(node: int) -> None:
        out.append(_atom_token(mol.atoms[node]))
        # close rings opened by earlier atoms
        for key, num in sorted(labels.items(), key=lambda kv: kv[1]):
            if node in key and key[1] == node:
                bond = next(b for o, b in adj[node] if o == key[0])
                out.append(bond.order.symbol + label_text(num))
                del labels[key]
                free.append(num)
                free.sort()
        for other, bond in closures[node]:
            num = free.pop(0)
            labels[(node, other)] = num
            out.append(label_text(num))
        children = tree_children[node]
        for idx, (child, bond) in enumerate(children):
            last = idx == len(children) - 1
            if not last:
                out.append("(")
            out.append(bond.order.symbol)
            emit(child)
            if not last:
                out.append(")")

    emit(root)
    return "".join(out)
