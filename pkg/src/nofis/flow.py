"""Affine coupling flows with exact log-determinants, and their binary checkpoints."""
import math
import struct
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
import torch

from nofis.diffcore import DenseNet
from nofis.errors import CheckpointFormatError, InvalidArgumentError, NumericalOverflowError, UnsupportedVersionError
from nofis.utils import standard_normal_log_prob, standard_normal_sample

dtype = torch.float64
device = 'cpu'

DEFAULT_HIDDEN = (128, 128, 128)
DEFAULT_LAYERS_PER_STEP = 8
DEFAULT_SCALE_CLAMP = 5.0

CHECKPOINT_MAGIC = b'NOFIS'
CHECKPOINT_VERSION = 1
# dim, steps, layers_per_step, number of hidden sizes, scale clamp
_HEADER = struct.Struct('<IIIId')


class CouplingLayer(torch.nn.Module):
    """y_a = x_a, y_b = x_b * exp(s(x_a)) + t(x_a), with s squashed to (-clamp, clamp).

    The coordinates are split at ceil(D/2). Parity 0 keeps the first part and changes the
    second one, parity 1 does the opposite.
    """
    def __init__(self, dim, parity, hidden=DEFAULT_HIDDEN, scale_clamp=DEFAULT_SCALE_CLAMP, *,
                 index=0, generator=None):
        super().__init__()
        if dim < 1:
            raise InvalidArgumentError('dimension must be positive, got {}'.format(dim))
        if scale_clamp <= 0:
            raise InvalidArgumentError('scale clamp must be positive, got {}'.format(scale_clamp))
        self.dim = dim
        self.parity = parity % 2
        self.index = index
        self.scale_clamp = float(scale_clamp)
        self.split = math.ceil(dim / 2)
        passed, changed = (self.split, dim - self.split) if self.parity == 0 else (dim - self.split, self.split)
        sizes = [passed, *hidden, changed]
        self.scale_net = DenseNet(sizes, generator=generator)
        self.translate_net = DenseNet(sizes, generator=generator)

    def _split(self, x):
        first, second = x[:, :self.split], x[:, self.split:]
        return (first, second) if self.parity == 0 else (second, first)

    def _join(self, passed, changed):
        return torch.cat((passed, changed) if self.parity == 0 else (changed, passed), dim=1)

    def scale_shift(self, passed):
        raw = self.scale_net(passed)
        s = self.scale_clamp * torch.tanh(raw / self.scale_clamp)
        return s, self.translate_net(passed)

    def _checked(self, y, logdet):
        if not (bool(torch.all(torch.isfinite(y))) and bool(torch.all(torch.isfinite(logdet)))):
            raise NumericalOverflowError('non-finite output in coupling layer {}'.format(self.index),
                                         layer_index=self.index)
        return y, logdet

    def forward(self, x):
        passed, changed = self._split(x)
        s, t = self.scale_shift(passed)
        y = self._join(passed, changed * torch.exp(s) + t)
        return self._checked(y, torch.sum(s, dim=1))

    def inverse(self, y):
        passed, changed = self._split(y)
        s, t = self.scale_shift(passed)
        x = self._join(passed, (changed - t) * torch.exp(-s))
        return self._checked(x, -torch.sum(s, dim=1))


class FlowModel(torch.nn.Module):
    """steps * layers_per_step coupling layers over a fixed standard normal base.

    The output of layer m * layers_per_step is the m-th anchor.
    """
    def __init__(self, dim, steps, layers_per_step=DEFAULT_LAYERS_PER_STEP, hidden=DEFAULT_HIDDEN,
                 scale_clamp=DEFAULT_SCALE_CLAMP, *, generator=None):
        super().__init__()
        if steps < 1 or layers_per_step < 1:
            raise InvalidArgumentError('steps and layers_per_step must be positive, got {} and {}'
                                       .format(steps, layers_per_step))
        self.dim = int(dim)
        self.steps = int(steps)
        self.layers_per_step = int(layers_per_step)
        self.hidden = tuple(int(h) for h in hidden)
        self.scale_clamp = float(scale_clamp)
        self.layers = torch.nn.ModuleList([
            CouplingLayer(self.dim, i % 2, self.hidden, self.scale_clamp, index=i, generator=generator)
            for i in range(self.steps * self.layers_per_step)])

    @property
    def num_layers(self):
        return len(self.layers)

    def anchor(self, m):
        """Number of layers up to the m-th anchor (m = 0 is the base)."""
        if not 0 <= m <= self.steps:
            raise InvalidArgumentError('anchor index must lie in [0, {}], got {}'.format(self.steps, m))
        return m * self.layers_per_step

    def step_layers(self, m) -> Sequence[CouplingLayer]:
        """Layers trained in step m (1-based)."""
        if not 1 <= m <= self.steps:
            raise InvalidArgumentError('step must lie in [1, {}], got {}'.format(self.steps, m))
        return self.layers[(m - 1) * self.layers_per_step:m * self.layers_per_step]

    def step_parameters(self, m):
        return [p for layer in self.step_layers(m) for p in layer.parameters()]

    def forward(self, z0, upto=None):
        z, cum_logdet, _ = flow_forward(self, z0, upto)
        return z, cum_logdet


@dataclass
class LayerCache:
    """Input and log-determinant of one layer, still attached to the autograd graph."""
    index: int
    input: torch.Tensor
    logdet: torch.Tensor


def _resolve_upto(model: FlowModel, upto):
    if upto is None:
        return model.num_layers
    if not 0 <= upto <= model.num_layers:
        raise InvalidArgumentError('upto must lie in [0, {}], got {}'.format(model.num_layers, upto))
    return int(upto)


def _check_dim(model, x):
    if x.dim() != 2 or x.shape[1] != model.dim:
        raise InvalidArgumentError('expected a batch of shape [n, {}], got {}'.format(model.dim, list(x.shape)))


def layer_forward(layer: CouplingLayer, x: torch.Tensor):
    return layer(x)


def layer_inverse(layer: CouplingLayer, y: torch.Tensor):
    return layer.inverse(y)


def flow_forward(model: FlowModel, z0: torch.Tensor, upto=None, *, start=0):
    """Pushes z0 through the first `upto` layers (all of them by default).

    With `start` > 0, z0 is taken to be the output of layer `start` and only layers start+1 ... upto run.

    :return: z_upto, the summed log|det J| per sample and one LayerCache per applied layer
    """
    _check_dim(model, z0)
    upto = _resolve_upto(model, upto)
    if not 0 <= start <= upto:
        raise InvalidArgumentError('start must lie in [0, {}], got {}'.format(upto, start))
    z = z0
    cum_logdet = torch.zeros(z0.shape[0], dtype=dtype, device=device)
    caches: List[LayerCache] = []
    for layer in model.layers[start:upto]:
        z_in = z
        z, logdet = layer_forward(layer, z_in)
        caches.append(LayerCache(layer.index, z_in, logdet))
        cum_logdet = cum_logdet + logdet
    return z, cum_logdet, caches


def flow_sample(model: FlowModel, n, upto=None, generator=None):
    """Draws n samples of q_upto together with their log-density log p(z0) - cum_logdet."""
    if n < 1:
        raise InvalidArgumentError('sample count must be positive, got {}'.format(n))
    z0 = standard_normal_sample(n, model.dim, generator)
    with torch.no_grad():
        z, cum_logdet, _ = flow_forward(model, z0, upto)
    return z, standard_normal_log_prob(z0) - cum_logdet


def flow_logdensity(model: FlowModel, x: torch.Tensor, upto=None):
    """log q_upto(x), evaluated by pulling x back through the analytic inverses."""
    _check_dim(model, x)
    upto = _resolve_upto(model, upto)
    z = x
    inverse_logdet = torch.zeros(x.shape[0], dtype=dtype, device=device)
    with torch.no_grad():
        for layer in reversed(model.layers[:upto]):
            z, logdet = layer_inverse(layer, z)
            inverse_logdet = inverse_logdet + logdet
    return standard_normal_log_prob(z) + inverse_logdet


def _payload_size(dim, steps, layers_per_step, hidden):
    total = 0
    for parity in range(min(2, steps * layers_per_step)):
        split = math.ceil(dim / 2)
        passed, changed = (split, dim - split) if parity == 0 else (dim - split, split)
        sizes = [passed, *hidden, changed]
        per_net = sum(fan_out * fan_in + fan_out for fan_in, fan_out in zip(sizes[:-1], sizes[1:]))
        count = len(range(parity, steps * layers_per_step, 2))
        total += 2 * per_net * count
    return total


def checkpoint_save(model: FlowModel, path):
    header = _HEADER.pack(model.dim, model.steps, model.layers_per_step, len(model.hidden), model.scale_clamp)
    hidden = struct.pack('<{}I'.format(len(model.hidden)), *model.hidden)
    with torch.no_grad():
        payload = np.concatenate([p.detach().cpu().numpy().reshape(-1) for p in model.parameters()])
    with open(path, 'wb') as file:
        file.write(CHECKPOINT_MAGIC + str(CHECKPOINT_VERSION).encode('ascii'))
        file.write(header)
        file.write(hidden)
        file.write(payload.astype('<f8').tobytes())


def checkpoint_load(path) -> FlowModel:
    with open(path, 'rb') as file:
        blob = file.read()

    prefix = len(CHECKPOINT_MAGIC)
    if len(blob) < prefix + 1 or blob[:prefix] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError('{} is not a flow checkpoint'.format(path))
    version = blob[prefix:prefix + 1]
    if not version.isdigit():
        raise CheckpointFormatError('unreadable checkpoint version tag {!r}'.format(version))
    if int(version) > CHECKPOINT_VERSION:
        raise UnsupportedVersionError('checkpoint version {} is newer than the supported version {}'
                                      .format(int(version), CHECKPOINT_VERSION))

    offset = prefix + 1
    if len(blob) < offset + _HEADER.size:
        raise CheckpointFormatError('truncated checkpoint header in {}'.format(path))
    dim, steps, layers_per_step, n_hidden, scale_clamp = _HEADER.unpack_from(blob, offset)
    offset += _HEADER.size
    if len(blob) < offset + 4 * n_hidden:
        raise CheckpointFormatError('truncated checkpoint header in {}'.format(path))
    hidden = struct.unpack_from('<{}I'.format(n_hidden), blob, offset)
    offset += 4 * n_hidden

    if dim < 1 or steps < 1 or layers_per_step < 1 or not scale_clamp > 0:
        raise CheckpointFormatError('invalid model shape in checkpoint header: dim={}, steps={}, '
                                    'layers_per_step={}, clamp={}'.format(dim, steps, layers_per_step, scale_clamp))
    expected = _payload_size(dim, steps, layers_per_step, hidden)
    if len(blob) - offset != 8 * expected:
        raise CheckpointFormatError('checkpoint payload holds {} bytes, expected {}'
                                    .format(len(blob) - offset, 8 * expected))
    payload = np.frombuffer(blob, dtype='<f8', count=expected, offset=offset)

    model = FlowModel(dim, steps, layers_per_step, hidden, scale_clamp)
    position = 0
    with torch.no_grad():
        for param in model.parameters():
            size = param.numel()
            chunk = payload[position:position + size].astype(np.float64).reshape(tuple(param.shape))
            param.copy_(torch.from_numpy(chunk.copy()))
            position += size
    return model
