"""Reference values frozen into the C++ tests. Run once: python3 oracles.py

Written without the C++ code in view: mt19937_64 from the published
recurrence, alpha from the pairwise value formulation (no coincidence
matrix), tau-b via scipy.
"""
import itertools
import math

from scipy.stats import kendalltau

M64 = (1 << 64) - 1


class MT19937_64:
    n, m = 312, 156

    def __init__(self, seed):
        self.mt = [0] * self.n
        self.mt[0] = seed & M64
        for i in range(1, self.n):
            prev = self.mt[i - 1]
            self.mt[i] = (6364136223846793005 * (prev ^ (prev >> 62)) + i) & M64
        self.idx = self.n

    def _twist(self):
        upper, lower = 0xFFFFFFFF80000000, 0x7FFFFFFF
        for i in range(self.n):
            x = (self.mt[i] & upper) | (self.mt[(i + 1) % self.n] & lower)
            xa = x >> 1
            if x & 1:
                xa ^= 0xB5026F5AA96619E9
            self.mt[i] = self.mt[(i + self.m) % self.n] ^ xa
        self.idx = 0

    def __call__(self):
        if self.idx >= self.n:
            self._twist()
        y = self.mt[self.idx]
        self.idx += 1
        y ^= (y >> 29) & 0x5555555555555555
        y ^= (y << 17) & 0x71D67FFFEDA60000
        y ^= (y << 37) & 0xFFF7EEE000000000
        y ^= y >> 43
        return y & M64


def check_mt():
    g = MT19937_64(5489)
    for _ in range(9999):
        g()
    assert g() == 9981545732273789042, "mt19937_64 oracle broken"


def target_draw(predicted, labels, seed):
    cands = [l for l in labels if l != predicted]
    return cands[MT19937_64(seed)() % len(cands)]


def alpha(units, level):
    """units: list of lists of values (missing already dropped)."""
    units = [u for u in units if len(u) >= 2]
    pool = [v for u in units for v in u]
    n = len(pool)
    counts = {}
    for v in pool:
        counts[v] = counts.get(v, 0) + 1
    ranks = sorted(counts)

    def d2(a, b):
        if level == "interval":
            return (a - b) ** 2
        if level == "nominal":
            return 0.0 if a == b else 1.0
        lo, hi = min(a, b), max(a, b)
        s = sum(counts[g] for g in ranks if lo <= g <= hi) - (counts[a] + counts[b]) / 2
        return s * s

    do = 0.0
    for u in units:
        do += sum(d2(a, b) for a, b in itertools.permutations(u, 2)) / (len(u) - 1)
    do /= n
    de = sum(d2(a, b) for a, b in itertools.permutations(pool, 2)) / (n * (n - 1))
    return 1.0 - do / de


def columns(grid):
    return [[v for v in col if v is not None] for col in zip(*grid)]


def check_alpha():
    # Krippendorff's canonical 4-observer x 12-unit reliability data.
    N = None
    data = [
        [1, 2, 3, 3, 2, 1, 4, 1, 2, N, N, N],
        [1, 2, 3, 3, 2, 2, 4, 1, 2, 5, N, 3],
        [N, 3, 3, 3, 2, 3, 4, 2, 2, 5, 1, N],
        [1, 2, 3, 3, 2, 4, 4, 1, 2, 5, 1, N],
    ]
    u = columns(data)
    assert round(alpha(u, "nominal"), 3) == 0.743
    assert round(alpha(u, "ordinal"), 3) == 0.815
    assert round(alpha(u, "interval"), 3) == 0.849


# 3 raters x 10 items, Likert 1-6, two missing cells.
GRID = [
    [5, 4, 6, 3, 2, 5, 4, 1, 6, 3],
    [5, 5, 6, 2, 2, 4, 4, 2, 5, None],
    [4, 4, 5, 3, 1, 5, None, 1, 6, 3],
]

if __name__ == "__main__":
    check_mt()
    check_alpha()
    print("target World/seed7:", target_draw("World", ["World", "Sports", "Business", "Sci/Tech"], 7))
    print("target World/seed0..4:", [target_draw("World", ["World", "Sports", "Business", "Sci/Tech"], s) for s in range(5)])
    print("alpha grid ordinal: %.17g" % alpha(columns(GRID), "ordinal"))
    print("alpha grid interval: %.17g" % alpha(columns(GRID), "interval"))
    print("alpha canonical ordinal: %.17g" % alpha(columns([
        [1, 2, 3, 3, 2, 1, 4, 1, 2, None, None, None],
        [1, 2, 3, 3, 2, 2, 4, 1, 2, 5, None, 3],
        [None, 3, 3, 3, 2, 3, 4, 2, 2, 5, 1, None],
        [1, 2, 3, 3, 2, 4, 4, 1, 2, 5, 1, None]]), "ordinal"))
    print("tau-b (1,2,3,4)/(1,3,2,4):", kendalltau([1, 2, 3, 4], [1, 3, 2, 4]).statistic)
    # attribution ranks the decisive word third, LOO puts all mass on it
    attr = [3, 2, 1, 0, 0, 0, 0, 0, 0, 0]
    loo = [0, 0, 0.8, 0, 0, 0, 0, 0, 0, 0]
    print("tau-b attr vs loo: %.17g" % kendalltau(attr, loo).statistic)
    # interaction game: v = 0.2 + 0.3[a] + 0.5[a and b]
    def v(S):
        return 0.2 + 0.3 * ("a" in S) + 0.5 * ("a" in S and "b" in S)
    P = ["a", "b", "c"]
    phi = {}
    for p in P:
        tot = 0.0
        for r in range(3):
            for S in itertools.combinations([q for q in P if q != p], r):
                w = math.factorial(len(S)) * math.factorial(3 - len(S) - 1) / math.factorial(3)
                tot += w * (v(set(S) | {p}) - v(set(S)))
        phi[p] = tot
    print("shapley interaction:", phi)
