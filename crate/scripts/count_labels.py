#!/usr/bin/env python3
"""Count labels in an IDX1 label file by reading raw bytes.

Usage: count_labels.py FILE [FILE ...]   (plain or .gz)

Prints one line per file: the item count, then `label:count` pairs.
"""
import gzip
import struct
import sys
from collections import Counter


def read(path):
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


for path in sys.argv[1:]:
    data = read(path)
    magic, n = struct.unpack(">II", data[:8])
    if magic != 0x801:
        sys.exit(f"{path}: bad magic {magic:#x}")
    body = data[8:]
    if len(body) != n:
        sys.exit(f"{path}: header says {n} labels, file has {len(body)}")
    counts = Counter(body)
    print(n, " ".join(f"{k}:{counts[k]}" for k in sorted(counts)))
