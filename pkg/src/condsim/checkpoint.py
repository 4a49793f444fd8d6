"""Versioned binary checkpoints.

Layout (documented for cross-implementation compatibility):

  - one ASCII header line:
    ``#condsim-checkpoint v1 variant=<v> conditions=<K> dim_in=<D> dim=<d>
    hidden=<h> temperature=<17g float> encoder=<set2|seq3|-> seed=<int>``
  - per parameter, in insertion order: an ASCII line
    ``P <name> <ndim> <dim_0> ... <dim_{ndim-1}>`` followed immediately by
    the raw little-endian float64 values in C order,
  - a final ``END`` line.

Identical configs and seeds produce byte-identical files.
"""

import numpy as np

from condsim.errors import ParseError
from condsim.model import Model
from condsim.numcore import ParamStore

MAGIC = b"#condsim-checkpoint v1"


def fmt17(v):
    return format(float(v), ".17g")


def save_checkpoint(model, path):
    header = (
        f"#condsim-checkpoint v1 variant={model.variant}"
        f" conditions={model.n_conditions} dim_in={model.dim_in}"
        f" dim={model.dim} hidden={model.hidden}"
        f" temperature={fmt17(model.temperature)}"
        f" encoder={model.encoder or '-'} seed={model.params.seed}\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for name, p in model.params.items():
            shape = " ".join(str(s) for s in p.shape)
            fh.write(f"P {name} {p.ndim} {shape}\n".encode("ascii"))
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
        fh.write(b"END\n")


def load_checkpoint(path):
    with open(path, "rb") as fh:
        header = fh.readline().rstrip(b"\n")
        if not header.startswith(MAGIC):
            raise ParseError("line 1: not a condsim checkpoint (bad magic)")
        fields = {}
        for token in header[len(MAGIC) :].decode("ascii").split():
            key, _, val = token.partition("=")
            fields[key] = val
        try:
            variant = fields["variant"]
            n_conditions = int(fields["conditions"])
            dim_in = int(fields["dim_in"])
            dim = int(fields["dim"])
            hidden = int(fields["hidden"])
            temperature = float(fields["temperature"])
            encoder = None if fields["encoder"] == "-" else fields["encoder"]
            seed = int(fields["seed"])
        except (KeyError, ValueError) as exc:
            raise ParseError(f"line 1: malformed checkpoint header ({exc})") from None

        params = ParamStore(seed)
        while True:
            line = fh.readline()
            if not line:
                raise ParseError("unexpected end of checkpoint (missing END)")
            line = line.rstrip(b"\n")
            if line == b"END":
                break
            parts = line.decode("ascii").split()
            if len(parts) < 3 or parts[0] != "P":
                raise ParseError(f"malformed parameter block header: {parts}")
            name = parts[1]
            ndim = int(parts[2])
            if len(parts) != 3 + ndim:
                raise ParseError(f"bad shape in parameter block {name!r}")
            shape = tuple(int(s) for s in parts[3:])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise ParseError(f"truncated data for parameter {name!r}")
            arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
            params.add(name, arr)

    required = ["backbone.w1", "backbone.b1", "backbone.w2", "proj.L"]
    if encoder is not None:
        required += ["anchors.a", "enc.w1", "enc.b1", "enc.w2", "enc.b2"]
    for name in required:
        if name not in params:
            raise ParseError(f"checkpoint is missing parameter {name!r}")
    return Model(
        params=params,
        variant=variant,
        n_conditions=n_conditions,
        dim_in=dim_in,
        dim=dim,
        hidden=hidden,
        temperature=temperature,
        encoder=encoder,
    )
