"""Problem instances: generation, in-memory containers and the binary file format.

File layout (little endian)::

    magic      6 bytes   b"POPCO1"
    tag        u8        0=tsp 1=cvrp 2=kp 3=toy
    count      u32
    n          u32       cities / customers / items; 3 (actions) for toy
    seed       u64
    capacity   f64       kp: bag capacity, cvrp: 1.0, otherwise 0
    divisor    u32       cvrp demand divisor D, otherwise 0
    payload    f64 arrays, C order, in FIELDS[tag] order
    crc32      u32       of the payload bytes

Payload shapes: tsp ``coords (count, n, 2)``; cvrp ``depot (count, 2)``,
``coords (count, n, 2)``, ``demands (count, n)``; kp ``values (count, n)``,
``weights (count, n)``; toy ``high_side (count,)`` (0 = Left, 1 = Right) and
``payoffs (count, 3)`` as (low, medium, high).
"""

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import CorruptFile, InvalidArgument
from .rng import philox

MAGIC = b"POPCO1"
HEADER = struct.Struct("<6sBIIQdI")
TAGS = ("tsp", "cvrp", "kp", "toy")
TOY_PAYOFFS = (0.0, 2.0, 3.0)
LEFT, RIGHT, UP = 0, 1, 2

FIELDS = {
    "tsp": ("coords",),
    "cvrp": ("depot", "coords", "demands"),
    "kp": ("values", "weights"),
    "toy": ("high_side", "payoffs"),
}


def _shapes(tag, count, n):
    return {
        "tsp": {"coords": (count, n, 2)},
        "cvrp": {"depot": (count, 2), "coords": (count, n, 2), "demands": (count, n)},
        "kp": {"values": (count, n), "weights": (count, n)},
        "toy": {"high_side": (count,), "payoffs": (count, 3)},
    }[tag]


@dataclass(frozen=True)
class TspInstance:
    coords: np.ndarray

    tag = "tsp"

    @property
    def n(self):
        return len(self.coords)


@dataclass(frozen=True)
class CvrpInstance:
    depot: np.ndarray
    coords: np.ndarray
    demands: np.ndarray
    capacity: float = 1.0

    tag = "cvrp"

    @property
    def n(self):
        return len(self.coords)


@dataclass(frozen=True)
class KpInstance:
    values: np.ndarray
    weights: np.ndarray
    capacity: float = 25.0

    tag = "kp"

    @property
    def n(self):
        return len(self.values)


@dataclass(frozen=True)
class ToyInstance:
    high_side: int
    payoffs: tuple = TOY_PAYOFFS

    tag = "toy"
    n = 3

    def payoff(self, action):
        low, medium, high = self.payoffs
        if action == UP:
            return medium
        return high if action == self.high_side else low


@dataclass(eq=False)
class InstanceSet:
    tag: str
    count: int
    n: int
    seed: int
    arrays: dict
    capacity: float = 0.0
    demand_divisor: int = 0

    def __post_init__(self):
        if self.tag not in TAGS:
            raise InvalidArgument(f"unknown problem tag {self.tag!r}")
        expected = _shapes(self.tag, self.count, self.n)
        if set(self.arrays) != set(expected):
            raise InvalidArgument(f"{self.tag} set needs fields {sorted(expected)}")
        for name, shape in expected.items():
            arr = np.ascontiguousarray(self.arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise InvalidArgument(f"{name}: shape {arr.shape}, expected {shape}")
            self.arrays[name] = arr

    def __len__(self):
        return self.count

    def __eq__(self, other):
        if not isinstance(other, InstanceSet):
            return NotImplemented
        head = (self.tag, self.count, self.n, self.seed, self.capacity, self.demand_divisor)
        if head != (other.tag, other.count, other.n, other.seed, other.capacity, other.demand_divisor):
            return False
        return all(np.array_equal(self.arrays[k], other.arrays[k]) for k in FIELDS[self.tag])

    def __getitem__(self, i):
        a = self.arrays
        if isinstance(i, slice):
            idx = range(self.count)[i]
            sub = {k: v[i] for k, v in a.items()}
            return InstanceSet(self.tag, len(idx), self.n, self.seed, sub, self.capacity, self.demand_divisor)
        if not -self.count <= i < self.count:
            raise IndexError(i)
        if self.tag == "tsp":
            return TspInstance(a["coords"][i])
        if self.tag == "cvrp":
            return CvrpInstance(a["depot"][i], a["coords"][i], a["demands"][i], self.capacity)
        if self.tag == "kp":
            return KpInstance(a["values"][i], a["weights"][i], self.capacity)
        return ToyInstance(int(a["high_side"][i]), tuple(float(x) for x in a["payoffs"][i]))

    def __iter__(self):
        return (self[i] for i in range(self.count))

    def to_bytes(self):
        payload = b"".join(self.arrays[k].astype("<f8").tobytes() for k in FIELDS[self.tag])
        head = HEADER.pack(MAGIC, TAGS.index(self.tag), self.count, self.n, self.seed,
                           float(self.capacity), self.demand_divisor)
        return head + payload + struct.pack("<I", zlib.crc32(payload))

    @classmethod
    def from_bytes(cls, buf):
        if len(buf) < HEADER.size + 4:
            raise CorruptFile("file too short for header")
        magic, tag, count, n, seed, capacity, divisor = HEADER.unpack_from(buf)
        if magic != MAGIC:
            raise CorruptFile(f"bad magic {magic!r}")
        if tag >= len(TAGS):
            raise CorruptFile(f"bad tag byte {tag}")
        tag = TAGS[tag]
        shapes = _shapes(tag, count, n)
        sizes = [int(np.prod(shapes[k])) * 8 for k in FIELDS[tag]]
        payload = buf[HEADER.size:-4]
        if len(payload) != sum(sizes):
            raise CorruptFile(f"payload is {len(payload)} bytes, header implies {sum(sizes)}")
        (crc,) = struct.unpack("<I", buf[-4:])
        if crc != zlib.crc32(payload):
            raise CorruptFile("payload checksum mismatch")
        arrays, off = {}, 0
        for k, size in zip(FIELDS[tag], sizes):
            arrays[k] = np.frombuffer(payload, dtype="<f8", count=size // 8, offset=off).reshape(shapes[k]).copy()
            off += size
        return cls(tag, count, n, seed, arrays, capacity, divisor)


def save_instances(instances, path):
    with open(path, "wb") as f:
        f.write(instances.to_bytes())


def load_instances(path):
    with open(path, "rb") as f:
        return InstanceSet.from_bytes(f.read())


def _check_count_seed(count, seed):
    if count < 1:
        raise InvalidArgument(f"count must be >= 1, got {count}")
    if not 0 <= seed < 2**64:
        raise InvalidArgument("seed must fit in an unsigned 64-bit integer")


def generate_tsp(n, count, seed):
    if n < 2:
        raise InvalidArgument(f"TSP needs n >= 2, got {n}")
    _check_count_seed(count, seed)
    coords = np.empty((count, n, 2))
    for i in range(count):
        coords[i] = philox(seed, "tsp", i).random((n, 2))
    return InstanceSet("tsp", count, n, seed, {"coords": coords})


def generate_cvrp(n, demand_divisor, count, seed):
    if n < 1:
        raise InvalidArgument(f"CVRP needs n >= 1, got {n}")
    if demand_divisor < 9:
        raise InvalidArgument(f"demand divisor {demand_divisor} < 9 lets a demand exceed capacity 1")
    _check_count_seed(count, seed)
    depot = np.empty((count, 2))
    coords = np.empty((count, n, 2))
    demands = np.empty((count, n))
    for i in range(count):
        g = philox(seed, "cvrp", i)
        depot[i] = g.random(2)
        coords[i] = g.random((n, 2))
        demands[i] = g.integers(1, 10, size=n) / demand_divisor
    return InstanceSet("cvrp", count, n, seed, {"depot": depot, "coords": coords, "demands": demands},
                       capacity=1.0, demand_divisor=demand_divisor)


def generate_kp(n, capacity, count, seed):
    if n < 1:
        raise InvalidArgument(f"KP needs n >= 1, got {n}")
    if not capacity > 0:
        raise InvalidArgument(f"capacity must be positive, got {capacity}")
    _check_count_seed(count, seed)
    values = np.empty((count, n))
    weights = np.empty((count, n))
    for i in range(count):
        g = philox(seed, "kp", i)
        values[i] = g.random(n)
        weights[i] = g.random(n)
    return InstanceSet("kp", count, n, seed, {"values": values, "weights": weights}, capacity=float(capacity))


def generate_toy(count, seed):
    _check_count_seed(count, seed)
    side = np.array([philox(seed, "toy", i).integers(2) for i in range(count)], dtype=np.float64)
    payoffs = np.tile(np.array(TOY_PAYOFFS), (count, 1))
    return InstanceSet("toy", count, 3, seed, {"high_side": side, "payoffs": payoffs})


def generate(tag, n, count, seed, capacity=25.0, demand_divisor=None):
    """Dispatch on problem tag; CVRP divisor defaults to the full-scale rule (50 up to n=100)."""
    if tag == "tsp":
        return generate_tsp(n, count, seed)
    if tag == "cvrp":
        if demand_divisor is None:
            demand_divisor = default_divisor(n)
        return generate_cvrp(n, demand_divisor, count, seed)
    if tag == "kp":
        return generate_kp(n, capacity, count, seed)
    if tag == "toy":
        return generate_toy(count, seed)
    raise InvalidArgument(f"unknown problem tag {tag!r}")


def default_divisor(n):
    if n <= 100:
        return 50
    if n <= 125:
        return 55
    return 60


def stack(instances):
    """Build an InstanceSet (seed 0) from a list of same-shape instances."""
    first = instances[0]
    tag = first.tag
    if tag == "tsp":
        arrays = {"coords": np.stack([x.coords for x in instances])}
        return InstanceSet(tag, len(instances), first.n, 0, arrays)
    if tag == "cvrp":
        arrays = {"depot": np.stack([x.depot for x in instances]),
                  "coords": np.stack([x.coords for x in instances]),
                  "demands": np.stack([x.demands for x in instances])}
        return InstanceSet(tag, len(instances), first.n, 0, arrays, capacity=first.capacity)
    if tag == "kp":
        arrays = {"values": np.stack([x.values for x in instances]),
                  "weights": np.stack([x.weights for x in instances])}
        return InstanceSet(tag, len(instances), first.n, 0, arrays, capacity=first.capacity)
    arrays = {"high_side": np.array([x.high_side for x in instances], dtype=float),
              "payoffs": np.array([x.payoffs for x in instances], dtype=float)}
    return InstanceSet(tag, len(instances), 3, 0, arrays)
