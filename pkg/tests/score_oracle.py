"""Per-element evaluation of the bitwise score, no 64-bit words involved."""


def bits_of(word: int):
    return [(word >> j) & 1 for j in range(64)]


def brute_score(basis, planes) -> float:
    """sum_i lambda_i sum_k 2**(8-k) sum_j nu_ij * b_kj with nu in {-1, +1}."""
    total = 0.0
    for lam, nu_word in basis:
        nu = [2 * b - 1 for b in bits_of(nu_word)]
        acc = 0
        for k, plane in enumerate(planes, start=1):
            b = bits_of(plane)
            acc += (1 << (8 - k)) * sum(n * e for n, e in zip(nu, b))
        total += lam * acc
    return total
