"""Synthetic multi-condition worlds and triplet datasets.

A world is a matrix of instances whose similarity depends on which condition
you ask about: each condition owns a disjoint block of coordinates holding a
perturbed one-hot attribute code. Two instances are similar under condition k
iff their codes in block k agree, which gives evaluation a known ground truth.

The dataset file format (UTF-8, line-delimited, diffable):

    #condsim-triplets v1 n_instances=<N> dim=<D> conditions=<K> values=<V> \
free=<F> noise=<s> world_seed=<ws> sample_seed=<ss> split=<tag> triplets=<T>
    I <idx> <f_1> ... <f_D>          (N lines, idx ascending from 0)
    T <x> <y> <z> <cond|->           (T lines; '-' = unlabeled)

Floats carry 17 significant digits so a round-trip is the identity.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from condsim.errors import ConfigError, DataError, ParseError

MAGIC = "#condsim-triplets v1"


def fmt17(v):
    return format(float(v), ".17g")


@dataclass
class World:
    """Instance matrix plus the attribute codes that generated it.

    Block k spans columns [k*n_values, (k+1)*n_values); the code of instance i
    under condition k is recoverable as the argmax of that block.
    """

    x: np.ndarray
    codes: np.ndarray
    n_values: int
    n_free: int
    noise: float
    seed: int

    @property
    def n_instances(self):
        return self.x.shape[0]

    @property
    def dim(self):
        return self.x.shape[1]

    @property
    def n_conditions(self):
        return self.codes.shape[1]

    def block(self, k):
        return slice(k * self.n_values, (k + 1) * self.n_values)

    def attr(self, i, k):
        return int(self.codes[i, k])

    def __eq__(self, other):
        if not isinstance(other, World):
            return NotImplemented
        return (
            np.array_equal(self.x, other.x)
            and np.array_equal(self.codes, other.codes)
            and self.n_values == other.n_values
            and self.n_free == other.n_free
            and self.noise == other.noise
            and self.seed == other.seed
        )


@dataclass(frozen=True)
class Triplet:
    """Anchor x, target neighbor y, impostor z (indices); optional condition."""

    x: int
    y: int
    z: int
    cond: Optional[int] = None


@dataclass
class TripletDataset:
    world: World
    triplets: list
    split: str = "train"
    seed: int = 0

    def __len__(self):
        return len(self.triplets)

    def labeled(self):
        return all(t.cond is not None for t in self.triplets)

    def index_arrays(self):
        """(x, y, z, cond) index arrays; cond is None if any label is missing."""
        xs = np.array([t.x for t in self.triplets], dtype=np.intp)
        ys = np.array([t.y for t in self.triplets], dtype=np.intp)
        zs = np.array([t.z for t in self.triplets], dtype=np.intp)
        if self.labeled() and self.triplets:
            cond = np.array([t.cond for t in self.triplets], dtype=np.intp)
        else:
            cond = None
        return xs, ys, zs, cond

    def __eq__(self, other):
        if not isinstance(other, TripletDataset):
            return NotImplemented
        return (
            self.world == other.world
            and self.triplets == other.triplets
            and self.split == other.split
            and self.seed == other.seed
        )


def gen_world(n_instances, n_conditions, n_values, n_free=0, noise=0.1, seed=0):
    """Deterministically synthesize a world with recoverable attribute codes.

    Block values are one-hot(code) + N(0, noise); any block whose argmax no
    longer equals its code is redrawn, so recoverability holds by construction.
    Free coordinates are N(0, 1) distractors.
    """
    if n_instances < 1 or n_conditions < 1 or n_values < 1:
        raise ConfigError(
            "n_instances, n_conditions and n_values must all be >= 1"
        )
    if n_free < 0:
        raise ConfigError("n_free must be >= 0")
    if noise < 0.0:
        raise ConfigError("noise must be >= 0")

    rng = np.random.default_rng(seed)
    codes = rng.integers(0, n_values, size=(n_instances, n_conditions))
    x = np.zeros((n_instances, n_conditions * n_values + n_free))
    eye = np.eye(n_values)
    for k in range(n_conditions):
        block = eye[codes[:, k]] + noise * rng.standard_normal(
            (n_instances, n_values)
        )
        bad = np.flatnonzero(np.argmax(block, axis=1) != codes[:, k])
        while bad.size:
            block[bad] = eye[codes[bad, k]] + noise * rng.standard_normal(
                (bad.size, n_values)
            )
            bad = bad[np.argmax(block[bad], axis=1) != codes[bad, k]]
        x[:, k * n_values : (k + 1) * n_values] = block
    if n_free:
        x[:, n_conditions * n_values :] = rng.standard_normal(
            (n_instances, n_free)
        )
    return World(
        x=x,
        codes=codes,
        n_values=n_values,
        n_free=n_free,
        noise=noise,
        seed=seed,
    )


def sample_triplets(
    world, n_per_condition, seed, split="train", labeled=True
):
    """Sample exactly ``n_per_condition`` valid triplets from every condition.

    A triplet under condition k pairs the anchor with a same-code target and a
    different-code impostor, all drawn uniformly. Raises :class:`DataError`
    when a condition has fewer than two attribute values among the instances.
    """
    if n_per_condition < 0:
        raise ConfigError("n_per_condition must be >= 0")
    rng = np.random.default_rng(seed)
    triplets = []
    for k in range(world.n_conditions):
        col = world.codes[:, k]
        present = np.unique(col)
        if present.size < 2:
            raise DataError(
                f"condition {k} has a single attribute value; "
                "no impostor can be sampled"
            )
        same = {int(v): np.flatnonzero(col == v) for v in present}
        diff = {int(v): np.flatnonzero(col != v) for v in present}
        for _ in range(n_per_condition):
            xi = int(rng.integers(world.n_instances))
            while same[int(col[xi])].size < 2:
                xi = int(rng.integers(world.n_instances))
            pool = same[int(col[xi])]
            yi = int(pool[rng.integers(pool.size)])
            while yi == xi:
                yi = int(pool[rng.integers(pool.size)])
            dpool = diff[int(col[xi])]
            zi = int(dpool[rng.integers(dpool.size)])
            triplets.append(Triplet(xi, yi, zi, k if labeled else None))
    return TripletDataset(world=world, triplets=triplets, split=split, seed=seed)


def reverse(t):
    """Swap target neighbor and impostor; the condition label is preserved."""
    return Triplet(t.x, t.z, t.y, t.cond)


def check_valid(world, t):
    """True iff the triplet satisfies its own condition label by construction."""
    if t.cond is None:
        raise DataError("cannot check validity of an unlabeled triplet")
    k = t.cond
    return (
        t.x != t.y
        and t.x != t.z
        and t.y != t.z
        and world.attr(t.x, k) == world.attr(t.y, k)
        and world.attr(t.x, k) != world.attr(t.z, k)
    )


def save_dataset(ds, path):
    w = ds.world
    lines = [
        f"{MAGIC} n_instances={w.n_instances} dim={w.dim}"
        f" conditions={w.n_conditions} values={w.n_values} free={w.n_free}"
        f" noise={fmt17(w.noise)} world_seed={w.seed} sample_seed={ds.seed}"
        f" split={ds.split} triplets={len(ds.triplets)}"
    ]
    for i in range(w.n_instances):
        vals = " ".join(fmt17(v) for v in w.x[i])
        lines.append(f"I {i} {vals}")
    for t in ds.triplets:
        cond = "-" if t.cond is None else str(t.cond)
        lines.append(f"T {t.x} {t.y} {t.z} {cond}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _header_value(fields, key, lineno, convert):
    if key not in fields:
        raise ParseError(f"line {lineno}: header is missing '{key}='")
    try:
        return convert(fields[key])
    except ValueError:
        raise ParseError(
            f"line {lineno}: bad value for header key '{key}': {fields[key]!r}"
        ) from None


def load_dataset(path):
    with open(path, "r", encoding="utf-8") as fh:
        raw = fh.read().splitlines()
    if not raw or not raw[0].startswith(MAGIC):
        raise ParseError("line 1: not a condsim triplet file (bad magic)")
    fields = {}
    for token in raw[0][len(MAGIC) :].split():
        if "=" not in token:
            raise ParseError(f"line 1: malformed header token {token!r}")
        key, _, val = token.partition("=")
        fields[key] = val
    n = _header_value(fields, "n_instances", 1, int)
    dim = _header_value(fields, "dim", 1, int)
    n_conditions = _header_value(fields, "conditions", 1, int)
    n_values = _header_value(fields, "values", 1, int)
    n_free = _header_value(fields, "free", 1, int)
    noise = _header_value(fields, "noise", 1, float)
    world_seed = _header_value(fields, "world_seed", 1, int)
    sample_seed = _header_value(fields, "sample_seed", 1, int)
    split = _header_value(fields, "split", 1, str)
    n_triplets = _header_value(fields, "triplets", 1, int)
    if n < 1 or dim != n_conditions * n_values + n_free:
        raise ParseError("line 1: inconsistent world dimensions in header")

    x = np.zeros((n, dim))
    for i in range(n):
        lineno = 2 + i
        if lineno - 1 >= len(raw):
            raise ParseError(f"line {lineno}: file truncated inside instances")
        parts = raw[lineno - 1].split()
        if len(parts) != dim + 2 or parts[0] != "I":
            raise ParseError(f"line {lineno}: malformed instance line")
        try:
            idx = int(parts[1])
            row = [float(v) for v in parts[2:]]
        except ValueError:
            raise ParseError(
                f"line {lineno}: malformed number in instance line"
            ) from None
        if idx != i:
            raise ParseError(f"line {lineno}: expected instance {i}, got {idx}")
        x[i] = row

    codes = np.column_stack(
        [
            np.argmax(x[:, k * n_values : (k + 1) * n_values], axis=1)
            for k in range(n_conditions)
        ]
    )
    world = World(
        x=x,
        codes=codes,
        n_values=n_values,
        n_free=n_free,
        noise=noise,
        seed=world_seed,
    )

    triplets = []
    for j in range(n_triplets):
        lineno = 2 + n + j
        if lineno - 1 >= len(raw):
            raise ParseError(f"line {lineno}: file truncated inside triplets")
        parts = raw[lineno - 1].split()
        if len(parts) != 5 or parts[0] != "T":
            raise ParseError(f"line {lineno}: malformed triplet line")
        try:
            xi, yi, zi = int(parts[1]), int(parts[2]), int(parts[3])
            cond = None if parts[4] == "-" else int(parts[4])
        except ValueError:
            raise ParseError(
                f"line {lineno}: malformed number in triplet line"
            ) from None
        for v in (xi, yi, zi):
            if not 0 <= v < n:
                raise DataError(
                    f"line {lineno}: instance index {v} out of range [0, {n})"
                )
        if cond is not None and not 0 <= cond < n_conditions:
            raise DataError(
                f"line {lineno}: condition {cond} out of range "
                f"[0, {n_conditions})"
            )
        triplets.append(Triplet(xi, yi, zi, cond))

    tail = raw[1 + n + n_triplets :]
    if any(line.strip() for line in tail):
        raise ParseError(
            f"line {2 + n + n_triplets}: trailing content after last triplet"
        )
    return TripletDataset(
        world=world, triplets=triplets, split=split, seed=sample_seed
    )
