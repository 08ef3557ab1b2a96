"""Writes golden16.fcil and golden16.csv with the struct module only."""
import struct

DIM = 3
TABLE = [(0, 0), (1, 0), (2, 1), (3, 1)]

rows = []
for i in range(16):
    label = i % 4
    task = label // 2
    feats = [0.25 * i - 1.5, 0.125 - 0.5 * label, 2.0 ** -(i % 5)]
    rows.append((feats, label, task))

with open("golden16.fcil", "wb") as f:
    f.write(b"FCIL")
    f.write(struct.pack("<IIQII", 1, DIM, len(rows), len(TABLE), 2))
    for c, t in TABLE:
        f.write(struct.pack("<II", c, t))
    for feats, label, task in rows:
        f.write(struct.pack("<" + "f" * DIM, *feats))
        f.write(struct.pack("<II", label, task))

with open("golden16.csv", "w") as f:
    f.write("label,task," + ",".join(f"f{j}" for j in range(DIM)) + "\n")
    for feats, label, task in rows:
        f.write(f"{label},{task}," + ",".join(repr(v) for v in feats) + "\n")
