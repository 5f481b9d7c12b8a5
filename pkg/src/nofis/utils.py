import dataclasses
import json
import math
from typing import Union

import numpy as np
import torch

dtype = torch.float64
device = 'cpu'

LOG_2PI = math.log(2 * math.pi)


def make_generator(seed: int) -> torch.Generator:
    generator = torch.Generator(device=device)
    generator.manual_seed(int(seed))
    return generator


def derive_seed(base_seed: int, index: int) -> int:
    """Independent, reproducible seed for the index-th child stream of base_seed."""
    sequence = np.random.SeedSequence(entropy=int(base_seed), spawn_key=(int(index),))
    return int(sequence.generate_state(1, dtype=np.uint64)[0] % (2 ** 63))


def standard_normal_log_prob(x: torch.Tensor) -> torch.Tensor:
    """log N(x; 0, I) for a batch x of shape [n, D]"""
    return -0.5 * torch.sum(torch.square(x), dim=-1) - 0.5 * x.shape[-1] * LOG_2PI


def standard_normal_sample(n: int, dim: int, generator: torch.Generator = None) -> torch.Tensor:
    return torch.randn(n, dim, generator=generator, dtype=dtype, device=device)


def as_batch(x) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=dtype, device=device)
    if x.dim() == 1:
        x = x.view(1, -1)
    return x


def to_jsonable(o):
    """Recursively converts dataclasses, tensors and numpy values to plain python."""
    if dataclasses.is_dataclass(o) and not isinstance(o, type):
        return {f.name: to_jsonable(getattr(o, f.name)) for f in dataclasses.fields(o)
                if f.metadata.get('serialize', True)}
    if isinstance(o, dict):
        return {str(k): to_jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [to_jsonable(el) for el in o]
    if isinstance(o, torch.Tensor):
        return to_jsonable(o.detach().cpu().tolist())
    if isinstance(o, np.ndarray):
        return to_jsonable(o.tolist())
    if isinstance(o, np.generic):
        return to_jsonable(o.item())
    if isinstance(o, float) and not math.isfinite(o):
        return None
    return o


class CompactJSONEncoder(json.JSONEncoder):
    """A JSON Encoder that puts small containers on single lines."""

    CONTAINER_TYPES = (list, tuple, dict)
    """Container datatypes include primitives or other containers."""

    MAX_WIDTH = 70
    """Maximum width of a container that might be put on a single line."""

    MAX_ITEMS = 70
    """Maximum number of items in container that might be put on single line."""

    INDENTATION_CHAR = " "

    def __init__(self, *args, **kwargs):
        # using this class without indentation is pointless
        if kwargs.get("indent") is None:
            kwargs.update({"indent": 2})
        super().__init__(*args, **kwargs)
        self.indentation_level = 0

    def encode(self, o):
        """Encode JSON object *o* with respect to single line lists."""
        o = to_jsonable(o)
        if isinstance(o, (list, tuple)):
            if self._put_on_single_line(o):
                return '[' + ', '.join(self.encode(el) for el in o) + ']'
            self.indentation_level += 1
            output = [self.indent_str + self.encode(el) for el in o]
            self.indentation_level -= 1
            return '[\n' + ',\n'.join(output) + '\n' + self.indent_str + ']'
        elif isinstance(o, dict):
            if not o:
                return "{}"
            if self._put_on_single_line(o):
                return "{ " + ", ".join(f"{self.encode(k)}: {self.encode(el)}" for k, el in o.items()) + " }"
            self.indentation_level += 1
            output = [self.indent_str + f"{json.dumps(k)}: {self.encode(v)}" for k, v in o.items()]
            self.indentation_level -= 1
            return "{\n" + ",\n".join(output) + "\n" + self.indent_str + "}"
        elif isinstance(o, float):
            # repr keeps the value bit-exact on reload
            return repr(o)
        elif isinstance(o, str):
            return json.dumps(o)
        else:
            return json.dumps(o)

    def iterencode(self, o, **kwargs):
        """Required to also work with `json.dump`."""
        return self.encode(o)

    def _put_on_single_line(self, o):
        return self._primitives_only(o) and len(o) <= self.MAX_ITEMS and len(str(o)) - 2 <= self.MAX_WIDTH

    def _primitives_only(self, o: Union[list, tuple, dict]):
        if isinstance(o, (list, tuple)):
            return not any(isinstance(el, self.CONTAINER_TYPES) for el in o)
        elif isinstance(o, dict):
            return not any(isinstance(el, self.CONTAINER_TYPES) for el in o.values())

    @property
    def indent_str(self) -> str:
        return self.INDENTATION_CHAR*(self.indentation_level*self.indent)


def dump_json(obj, path):
    with open(path, 'w') as file:
        json.dump(obj, file, cls=CompactJSONEncoder)
        file.write('\n')
