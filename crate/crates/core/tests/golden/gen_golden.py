#!/usr/bin/env python3
"""Independent reference for the index-map generator.

Writes one FHIX file per (T, gamma, seed) and prints the xoshiro256** test
vectors used by the Rust tests. Run from this directory.
"""
import struct

M = (1 << 64) - 1


def splitmix64(x):
    z = (x + 0x9E3779B97F4A7C15) & M
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & M
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & M
    return z ^ (z >> 31)


def rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & M


class Xoshiro:
    def __init__(self, seed):
        s = []
        state = seed
        for _ in range(4):
            s.append(splitmix64(state))
            state = (state + 0x9E3779B97F4A7C15) & M
        self.s = s

    def next(self):
        s = self.s
        result = (rotl((s[1] * 5) & M, 7) * 9) & M
        t = (s[1] << 17) & M
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = rotl(s[3], 45)
        return result

    def below(self, n):
        threshold = (2**64 - n) % n
        while True:
            r = self.next()
            if r >= threshold:
                return r % n


def index_map(t, num, den, seed):
    rng = Xoshiro(seed)
    rs = list(range(t))
    for i in range(t - 1, 0, -1):
        j = rng.below(i + 1)
        rs[i], rs[j] = rs[j], rs[i]
    return [(e * num) // den for e in rs]


if __name__ == "__main__":
    for t in (8, 16, 64):
        for den in (2, 4):
            for seed in (0, 1, 42):
                idx = index_map(t, 1, den, seed)
                with open(f"idx_t{t}_g1-{den}_s{seed}.fhix", "wb") as f:
                    f.write(b"FHIX" + struct.pack("<IQ", 1, len(idx)))
                    f.write(struct.pack(f"<{len(idx)}I", *idx))
    r = Xoshiro(0)
    print("xoshiro256** seed 0:", [r.next() for _ in range(4)])
    r = Xoshiro(42)
    print("xoshiro256** seed 42:", [r.next() for _ in range(4)])
    print("splitmix64(0 ^ i) for i in 0..4:", [splitmix64(i) for i in range(4)])
    print("idx t=8 g=1/2 seed=42:", index_map(8, 1, 2, 42))
