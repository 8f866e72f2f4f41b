"""Independent brute-force oracles, written before the operations they check.

Pure-python double loops only; no shared code with the engine's vector math.
"""

import math


def cosine(a, b) -> float:
    num = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    return num / (na * nb)


def mean_cosine_to_reference(panel_vectors, reference_vector) -> float:
    total = 0.0
    for vec in panel_vectors:
        total += cosine(vec, reference_vector)
    return total / len(panel_vectors)


def ci_scale(s: float) -> float:
    return 100.0 * (s + 1.0) / 2.0


def pairwise_mean_cosine(vectors) -> float:
    n = len(vectors)
    total = 0.0
    count = 0
    for i in range(n):
        for j in range(i + 1, n):
            total += cosine(vectors[i], vectors[j])
            count += 1
    return total / count
