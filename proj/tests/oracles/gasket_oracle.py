"""Independent brute-force oracle for gasket energies and Kusuoka cell masses.

Builds V_m by enumerating addresses, then finds the harmonic extension by a
global exact least-energy solve (Gaussian elimination over Fractions on the
full graph Laplacian), not by the cell-wise rule used in the library.
"""
from fractions import Fraction as Fr
from itertools import product
import sys

P = [(Fr(0), Fr(0)), (Fr(1), Fr(0)), (Fr(1, 2), Fr(1, 2))]  # y in units of sqrt(3)


def fmap(w, x):
    for i in reversed(w):
        x = ((x[0] + P[i][0]) / 2, (x[1] + P[i][1]) / 2)
    return x


def build(m):
    ids, cells = {}, {}
    for w in product(range(3), repeat=m):
        tri = []
        for i in range(3):
            pt = fmap(w, P[i])
            ids.setdefault(pt, len(ids))
            tri.append(ids[pt])
        cells[w] = tri
    edges = set()
    for tri in cells.values():
        for a, b in ((0, 1), (0, 2), (1, 2)):
            edges.add(tuple(sorted((tri[a], tri[b]))))
    return ids, cells, sorted(edges)


def solve(A, b):
    n = len(b)
    M = [row[:] + [b[i]] for i, row in enumerate(A)]
    for c in range(n):
        p = next(r for r in range(c, n) if M[r][c] != 0)
        M[c], M[p] = M[p], M[c]
        for r in range(n):
            if r != c and M[r][c] != 0:
                f = M[r][c] / M[c][c]
                M[r] = [x - f * y for x, y in zip(M[r], M[c])]
    return [M[i][n] / M[i][i] for i in range(n)]


def harmonic(m, bnd):
    ids, cells, edges = build(m)
    n = len(ids)
    corner = {ids[P[i]]: bnd[i] for i in range(3)}
    free = [v for v in range(n) if v not in corner]
    pos = {v: k for k, v in enumerate(free)}
    A = [[Fr(0)] * len(free) for _ in free]
    b = [Fr(0)] * len(free)
    for x, y in edges:
        for u, v in ((x, y), (y, x)):
            if u in pos:
                A[pos[u]][pos[u]] += 1
                if v in pos:
                    A[pos[u]][pos[v]] -= 1
                else:
                    b[pos[u]] += corner[v]
    sol = solve(A, b)
    val = [None] * n
    for v, c in corner.items():
        val[v] = c
    for v, k in pos.items():
        val[v] = sol[k]
    return ids, cells, edges, val


def energy(m, edges, val):
    return Fr(5, 3) ** m * sum((val[x] - val[y]) ** 2 for x, y in edges)


def cell_energy(m, tri, val):
    a, b, c = (val[i] for i in tri)
    return Fr(5, 3) ** m * ((a - b) ** 2 + (a - c) ** 2 + (b - c) ** 2)


if __name__ == "__main__":
    m = int(sys.argv[1]) if len(sys.argv) > 1 else 2
    ids, cells, edges, h = harmonic(1, [1, 0, 0])
    inv = {v: k for k, v in ids.items()}
    print("level1 ext of (1,0,0):", {tuple(map(str, inv[v])): str(h[v]) for v in range(len(h))})
    for lvl in range(0, 4):
        ids, cells, edges, h = harmonic(lvl, [1, 0, 0])
        print("m", lvl, "V", len(ids), "E", len(edges), "C", len(cells), "energy", energy(lvl, edges, h))
    tabs = [harmonic(m, [int(i == j) for j in range(3)]) for i in range(3)]
    ids, cells, edges, _ = tabs[0]
    mu = {}
    for w, tri in cells.items():
        mu[w] = sum(cell_energy(m, tri, t[3]) for t in tabs) / 3
        parts = [cell_energy(m, tri, t[3]) for t in tabs]
        print("".join(str(i + 1) for i in w), "mu", mu[w], "mu_i", *parts)
    print("total", sum(mu.values()))
    p1 = ids[P[0]]
    print("rho(p1)", sum(mu[w] for w, t in cells.items() if p1 in t) / sum(Fr(1, 3**m) for w, t in cells.items() if p1 in t))
