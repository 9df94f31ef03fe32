"""Writes the binary test fixtures with an encoder independent of the crate."""
import struct
import zlib


def tensor(name, shape, vals):
    b = struct.pack('<H', len(name)) + name.encode() + struct.pack('<B', len(shape))
    b += b''.join(struct.pack('<I', d) for d in shape)
    b += b''.join(struct.pack('<f', v) for v in vals)
    return b


def vals(n, offset):
    return [((i * 5 + offset) % 17) / 8.0 - 1.0 for i in range(n)]


tensors = [
    ("cnn.stage0.weight", [2, 1, 3, 3], vals(18, 0)),
    ("cnn.stage0.bias", [2], vals(2, 1)),
    ("fc.weight", [2, 2], vals(4, 2)),
    ("fc.bias", [2], vals(2, 3)),
    ("srnn.U", [2, 2], vals(4, 4)),
]
body = b'SRNN' + struct.pack('<I', 1) + struct.pack('<I', len(tensors))
body += b''.join(tensor(*t) for t in tensors)
with open('vanilla_micro.srnn', 'wb') as f:
    f.write(body + struct.pack('<I', zlib.crc32(body) & 0xffffffff))

records = []
for r, label in enumerate([7, 0, 9]):
    pixels = bytes(((r * 31 + i * 7) % 256) for i in range(3072))
    records.append(bytes([label]) + pixels)
valid = b''.join(records)
with open('cifar_valid.bin', 'wb') as f:
    f.write(valid)
with open('cifar_truncated.bin', 'wb') as f:
    f.write(valid[:-1])
bad = bytearray(valid)
bad[3073] = 12
with open('cifar_bad_label.bin', 'wb') as f:
    f.write(bytes(bad))
