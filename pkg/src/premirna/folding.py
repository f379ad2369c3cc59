"""Simplified secondary-structure prediction.

Energy model: every base pair contributes a fixed score by pair type
(G-C, A-U, G-U) and every pair that closes a loop, i.e. a pair (i, j)
whose interior is *not* exactly the stacked pair (i+1, j-1), pays a loop
opening penalty. Hairpin loops hold at least ``min_loop`` unpaired bases.
The optimum over non-crossing pairings is found by an O(n^3)
Nussinov-style recursion with two tables:

    W[i, j]  best energy of the interval i..j, nothing forced
    V[i, j]  best energy of i..j given that i pairs with j

    V[i, j] = s(i, j) + min(V[i+1, j-1], penalty + W[i+1, j-1])
    W[i, j] = min(W[i+1, j], min_k V[i, k] + W[k+1, j])

Traceback prefers the pairing branch, then the leftmost split.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from premirna.sequence_io import ALPHABET, RnaSequence

_INF = 1e30
_TIE = 1e-9
_CODE = {b: i for i, b in enumerate(ALPHABET)}


@dataclass(frozen=True)
class EnergyModel:
    """Pair scores and loop penalty, in kcal/mol-like units."""

    gc: float = -3.0
    au: float = -2.0
    gu: float = -1.0
    loop_penalty: float = 0.5
    min_loop: int = 3

    def score_table(self) -> np.ndarray:
        t = np.zeros((4, 4), dtype=np.float64)
        a, c, g, u = (_CODE[b] for b in "ACGU")
        t[g, c] = t[c, g] = self.gc
        t[a, u] = t[u, a] = self.au
        t[g, u] = t[u, g] = self.gu
        return t

    def pairable(self) -> np.ndarray:
        a, c, g, u = (_CODE[b] for b in "ACGU")
        t = np.zeros((4, 4), dtype=np.bool_)
        for x, y in ((g, c), (a, u), (g, u)):
            t[x, y] = t[y, x] = True
        return t


DEFAULT_MODEL = EnergyModel()


@dataclass(frozen=True)
class SecondaryStructure:
    sequence: str
    dot_bracket: str
    pairs: tuple
    energy: float
    stem_count: int
    loop_count: int
    hairpin_count: int
    hairpin_length: int
    loop_length: int
    max_consecutive_pairs: int
    stems: tuple = field(default=(), repr=False)
    tree_edges: tuple = field(default=(), repr=False)

    @property
    def length(self) -> int:
        return len(self.sequence)


def encode_bases(bases: str) -> np.ndarray:
    return np.fromiter((_CODE[b] for b in bases), dtype=np.int64, count=len(bases))


@numba.njit(cache=True)
def _fill(codes, score, pairable, penalty, min_loop):
    n = codes.shape[0]
    W = np.zeros((n + 1, n + 1))
    V = np.full((n + 1, n + 1), _INF)
    for d in range(1, n):
        for i in range(0, n - d):
            j = i + d
            if d > min_loop and pairable[codes[i], codes[j]]:
                best = penalty + W[i + 1, j - 1]
                inner = V[i + 1, j - 1]
                if inner < _INF and inner < best:
                    best = inner
                V[i, j] = score[codes[i], codes[j]] + best
            w = W[i + 1, j]
            for k in range(i + min_loop + 1, j + 1):
                vk = V[i, k]
                if vk < _INF:
                    c = vk + W[k + 1, j]
                    if c < w:
                        w = c
            W[i, j] = w
    return W, V


@numba.njit(cache=True)
def _traceback(W, V, codes, score, penalty, min_loop):
    n = codes.shape[0]
    partner = np.full(n, -1, dtype=np.int64)
    # stack entries: (kind, i, j); kind 0 = W interval, 1 = V pair
    stack = np.empty((2 * n + 2, 3), dtype=np.int64)
    top = 0
    if n > 0:
        stack[0, 0] = 0
        stack[0, 1] = 0
        stack[0, 2] = n - 1
        top = 1
    while top > 0:
        top -= 1
        kind = stack[top, 0]
        i = stack[top, 1]
        j = stack[top, 2]
        if i >= j:
            continue
        if kind == 1:
            partner[i] = j
            partner[j] = i
            target = V[i, j] - score[codes[i], codes[j]]
            inner = V[i + 1, j - 1]
            if inner < _INF and abs(inner - target) <= _TIE:
                stack[top, 0] = 1
            else:
                stack[top, 0] = 0
            stack[top, 1] = i + 1
            stack[top, 2] = j - 1
            top += 1
            continue
        target = W[i, j]
        chosen = -1
        for k in range(i + min_loop + 1, j + 1):
            vk = V[i, k]
            if vk < _INF and abs(vk + W[k + 1, j] - target) <= _TIE:
                chosen = k
                break
        if chosen < 0:
            stack[top, 0] = 0
            stack[top, 1] = i + 1
            stack[top, 2] = j
            top += 1
        else:
            stack[top, 0] = 1
            stack[top, 1] = i
            stack[top, 2] = chosen
            top += 1
            stack[top, 0] = 0
            stack[top, 1] = chosen + 1
            stack[top, 2] = j
            top += 1
    return partner


@numba.njit(cache=True)
def _sample(W, V, codes, score, penalty, min_loop, n_samples, temperature, seed):
    n = codes.shape[0]
    np.random.seed(seed)
    out = np.full((n_samples, n), -1, dtype=np.int64)
    stack = np.empty((2 * n + 2, 3), dtype=np.int64)
    weights = np.empty(n + 2)
    for s in range(n_samples):
        top = 0
        if n > 0:
            stack[0, 0] = 0
            stack[0, 1] = 0
            stack[0, 2] = n - 1
            top = 1
        while top > 0:
            top -= 1
            kind = stack[top, 0]
            i = stack[top, 1]
            j = stack[top, 2]
            if i >= j:
                continue
            if kind == 1:
                out[s, i] = j
                out[s, j] = i
                sij = score[codes[i], codes[j]]
                base = V[i, j]
                w_open = np.exp(-(sij + penalty + W[i + 1, j - 1] - base) / temperature)
                w_stack = 0.0
                inner = V[i + 1, j - 1]
                if inner < _INF:
                    w_stack = np.exp(-(sij + inner - base) / temperature)
                u = np.random.random() * (w_open + w_stack)
                stack[top, 0] = 1 if u < w_stack else 0
                stack[top, 1] = i + 1
                stack[top, 2] = j - 1
                top += 1
                continue
            base = W[i, j]
            total = np.exp(-(W[i + 1, j] - base) / temperature)
            weights[0] = total
            m = 1
            for k in range(i + min_loop + 1, j + 1):
                vk = V[i, k]
                wk = 0.0
                if vk < _INF:
                    wk = np.exp(-(vk + W[k + 1, j] - base) / temperature)
                weights[m] = wk
                total += wk
                m += 1
            u = np.random.random() * total
            acc = 0.0
            pick = -1
            last = 0
            for q in range(m):
                if weights[q] > 0.0:
                    last = q
                acc += weights[q]
                if pick < 0 and u < acc and weights[q] > 0.0:
                    pick = q
            if pick < 0:
                pick = last
            if pick == 0:
                stack[top, 0] = 0
                stack[top, 1] = i + 1
                stack[top, 2] = j
                top += 1
            else:
                k = i + min_loop + pick
                stack[top, 0] = 1
                stack[top, 1] = i
                stack[top, 2] = k
                top += 1
                stack[top, 0] = 0
                stack[top, 1] = k + 1
                stack[top, 2] = j
                top += 1
    return out


def _bases(seq) -> str:
    return seq.bases if isinstance(seq, RnaSequence) else seq


def fold_tables(seq, model: EnergyModel = DEFAULT_MODEL):
    """Return ``(codes, W, V)`` DP tables for ``seq``."""
    codes = encode_bases(_bases(seq))
    W, V = _fill(codes, model.score_table(), model.pairable(), model.loop_penalty, model.min_loop)
    return codes, W, V


def mfe(seq, model: EnergyModel = DEFAULT_MODEL) -> float:
    """Minimum energy only; skips traceback and structure statistics."""
    codes, W, _ = fold_tables(seq, model)
    return float(W[0, len(codes) - 1]) if len(codes) else 0.0


def fold(seq, model: EnergyModel = DEFAULT_MODEL) -> SecondaryStructure:
    """Minimum-energy secondary structure of ``seq`` under ``model``."""
    bases = _bases(seq)
    codes, W, V = fold_tables(bases, model)
    partner = _traceback(W, V, codes, model.score_table(), model.loop_penalty, model.min_loop)
    energy = float(W[0, len(bases) - 1]) if bases else 0.0
    return describe(bases, partner, energy)


def sample_structures(seq, n_samples: int, temperature: float = 1.0, seed: int = 0,
                      model: EnergyModel = DEFAULT_MODEL, tables=None) -> np.ndarray:
    """Draw ``n_samples`` structures by stochastic traceback of the fold tables.

    At each branch of the recursion an option is picked with weight
    ``exp(-(E_option - E_best) / temperature)``, where ``E_option`` is the
    best energy reachable through that option. Returns an
    ``(n_samples, L)`` partner array (-1 = unpaired).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    codes, W, V = tables if tables is not None else fold_tables(seq, model)
    return _sample(W, V, codes, model.score_table(), model.loop_penalty, model.min_loop,
                   int(n_samples), float(temperature), int(seed) & 0xFFFFFFFF)


def partner_from_pairs(n: int, pairs) -> np.ndarray:
    partner = np.full(n, -1, dtype=np.int64)
    for i, j in pairs:
        partner[i] = j
        partner[j] = i
    return partner


def pairs_from_partner(partner) -> tuple:
    return tuple((i, int(j)) for i, j in enumerate(partner) if j > i)


def dot_bracket_from_pairs(n: int, pairs) -> str:
    chars = ["."] * n
    for i, j in pairs:
        chars[i] = "("
        chars[j] = ")"
    return "".join(chars)


def pairs_from_dot_bracket(db: str) -> tuple:
    stack, pairs = [], []
    for k, ch in enumerate(db):
        if ch == "(":
            stack.append(k)
        elif ch == ")":
            if not stack:
                raise ValueError(f"unbalanced ')' at {k}")
            pairs.append((stack.pop(), k))
        elif ch != ".":
            raise ValueError(f"invalid dot-bracket character {ch!r}")
    if stack:
        raise ValueError("unbalanced '('")
    return tuple(sorted(pairs))


def structure_energy(seq, pairs, model: EnergyModel = DEFAULT_MODEL) -> float:
    """Energy of an explicit pairing under ``model`` (no validity checks)."""
    bases = _bases(seq)
    table = model.score_table()
    partner = partner_from_pairs(len(bases), pairs)
    e = 0.0
    for i, j in pairs:
        e += table[_CODE[bases[i]], _CODE[bases[j]]]
        if not (j - i > 2 and partner[i + 1] == j - 1):
            e += model.loop_penalty
    return float(e)


def describe(bases: str, partner, energy: float) -> SecondaryStructure:
    """Build a SecondaryStructure with all derived counts from a partner array."""
    n = len(bases)
    partner = np.asarray(partner)
    pairs = pairs_from_partner(partner)

    stems = []
    for i, j in pairs:
        if i > 0 and j + 1 < n and partner[i - 1] == j + 1:
            continue  # continues the stem opened by (i-1, j+1)
        length = 1
        while i + length < j - length and partner[i + length] == j - length:
            length += 1
        stems.append((i, j, length))

    enclosed = np.zeros(n, dtype=bool)
    for i, j in pairs:
        enclosed[i + 1:j] = True
    loop_count = 0
    prev_loop = False
    for k in range(n):
        in_loop = partner[k] < 0 and enclosed[k]
        if in_loop and not prev_loop:
            loop_count += 1
        prev_loop = in_loop

    hairpins = [(i, j) for i, j in pairs if np.all(partner[i + 1:j] < 0)]
    loop_length = sum(j - i - 1 for i, j in hairpins)
    hairpin_length = max(j for _, j in pairs) - pairs[0][0] + 1 if pairs else 0

    # coarse tree: node 0 is the exterior loop, node t+1 the loop closed by stem t
    stem_of_inner = {}
    for t, (i, j, length) in enumerate(stems):
        stem_of_inner[i + length - 1] = t
    edges = []
    open_stack = []
    stem_index = {(i, j): t for t, (i, j, _) in enumerate(stems)}
    for k in range(n):
        j = partner[k]
        if j > k:
            if (k, j) in stem_index:
                # innermost open pair is necessarily the last pair of its stem
                parent = stem_of_inner[open_stack[-1]] + 1 if open_stack else 0
                edges.append((parent, stem_index[(k, j)] + 1))
            open_stack.append(k)
        elif 0 <= j < k:
            open_stack.pop()

    return SecondaryStructure(
        sequence=bases,
        dot_bracket=dot_bracket_from_pairs(n, pairs),
        pairs=pairs,
        energy=float(energy),
        stem_count=len(stems),
        loop_count=loop_count,
        hairpin_count=len(hairpins),
        hairpin_length=int(hairpin_length),
        loop_length=int(loop_length),
        max_consecutive_pairs=max((s[2] for s in stems), default=0),
        stems=tuple(stems),
        tree_edges=tuple(edges),
    )


def pairing_stats(ss: SecondaryStructure) -> dict[str, float]:
    """Pair-type counts and stem/loop statistics of a structure."""
    counts = {"AU": 0, "GC": 0, "GU": 0}
    for i, j in ss.pairs:
        key = "".join(sorted(ss.sequence[i] + ss.sequence[j]))
        counts[{"AU": "AU", "CG": "GC", "GU": "GU"}[key]] += 1
    n_pairs = len(ss.pairs)
    ih = ss.hairpin_length
    return {
        "|A-U|": float(counts["AU"]),
        "|G-C|": float(counts["GC"]),
        "|G-U|": float(counts["GU"]),
        "total_bases": float(2 * n_pairs),
        "stems": float(ss.stem_count),
        "loops": float(ss.loop_count),
        "Avg_BP_Stem": n_pairs / ss.stem_count if ss.stem_count else 0.0,
        "IH": float(ih),
        "IL": float(ss.loop_length),
        "IC": float(ss.max_consecutive_pairs),
        "%L": ss.loop_length / ih if ih else 0.0,
    }
