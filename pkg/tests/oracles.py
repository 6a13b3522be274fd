"""Independent reference computations used by the tests.

Nothing here imports the package; each function is a direct, slow
transcription of the textbook formula.
"""
import math


def _grams(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def brute_cider_d(candidate, refs, ref_sets_of_corpus, sigma=6.0, length_penalty=True, scale=10.0):
    """CIDEr-D straight from its definition.

    ``ref_sets_of_corpus`` is the list of reference sets (one per image)
    defining document frequencies.
    """
    N = len(ref_sets_of_corpus)
    if len(candidate) == 0:
        return 0.0

    def df(g):
        n = len(g)
        return sum(1 for refset in ref_sets_of_corpus if any(g in _grams(r, n) for r in refset))

    def tfidf(tokens, n):
        grams = _grams(tokens, n)
        vec = {}
        for g in set(grams):
            vec[g] = grams.count(g) * (math.log(N) - math.log(max(1.0, df(g))))
        return vec

    per_ref = []
    for ref in refs:
        per_n = []
        for n in range(1, 5):
            vc, vr = tfidf(candidate, n), tfidf(ref, n)
            num = sum(min(vc[g], vr.get(g, 0.0)) * vr.get(g, 0.0) for g in vc)
            nc = math.sqrt(sum(v * v for v in vc.values()))
            nr = math.sqrt(sum(v * v for v in vr.values()))
            val = num / (nc * nr) if nc > 0 and nr > 0 else num
            if length_penalty:
                val *= math.exp(-((len(candidate) - len(ref)) ** 2) / (2 * sigma ** 2))
            per_n.append(val)
        per_ref.append(sum(per_n) / 4)
    return scale * sum(per_ref) / len(refs)


def finite_difference(f, x, h=1e-6):
    """Central differences of scalar f with respect to every entry of array x (in place, restored)."""
    import numpy as np

    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    import numpy as np

    a, b = np.asarray(a, float), np.asarray(b, float)
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / denom) if denom > 0 else 0.0
