import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from copaintlab.denoiser.base import Denoiser
from copaintlab.errors import DimensionError, FormatError, NumericFailureError
from copaintlab.schedule import NoiseSchedule

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'CPMLP1\n'


class MlpDenoiser(Denoiser):
    """
    A small epsilon-prediction network with hand-written backpropagation.

    The network input is the state x concatenated with a learned embedding vector of the step t.
    Hidden layers apply h @ W + b followed by tanh, the output layer is affine. The X_0 estimate is
    the reparameterization f(x) = (x - sqrt(1 - alpha_bar_t) eps(x, t)) / sqrt(alpha_bar_t).

    Layer l maps width dims[l] to dims[l + 1], its weight matrix has shape (dims[l], dims[l + 1]).
    dims[0] is the state dimension plus the embedding width, dims[-1] is the state dimension.
    """

    def __init__(
            self,
            weights: Sequence[np.ndarray],
            biases: Sequence[np.ndarray],
            embedding: np.ndarray,
            schedule: NoiseSchedule
    ):
        """
        Creates a new MlpDenoiser object.

        :param weights: The weight matrices, one per layer.
        :param biases: The bias vectors, one per layer.
        :param embedding: The time embedding table of shape (T, embed_dim). Row t - 1 belongs to step t.
        :param schedule: The schedule the network was trained on.
        """
        weights = [np.array(w, dtype=np.float64) for w in weights]
        biases = [np.array(b, dtype=np.float64) for b in biases]
        embedding = np.array(embedding, dtype=np.float64)
        self._validate_shapes(weights, biases, embedding, schedule)
        super().__init__(dim=weights[-1].shape[1], schedule=schedule)

        for array in (*weights, *biases, embedding):
            array.setflags(write=False)
        self._weights: List[np.ndarray] = weights
        self._biases: List[np.ndarray] = biases
        self._embedding: np.ndarray = embedding

    @staticmethod
    def _validate_shapes(weights, biases, embedding, schedule) -> None:
        if len(weights) == 0 or len(weights) != len(biases):
            raise DimensionError('a network needs one bias vector per weight matrix and at least one layer')
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DimensionError(f'inconsistent shapes at layer {i}: weight {w.shape}, bias {b.shape}')
            if i > 0 and weights[i - 1].shape[1] != w.shape[0]:
                raise DimensionError(f'layer {i} expects width {w.shape[0]}, previous layer has {weights[i - 1].shape[1]}')
        state_dim = weights[-1].shape[1]
        if embedding.ndim != 2 or embedding.shape[0] != schedule.T:
            raise DimensionError(f'embedding must have {schedule.T} rows, got shape {embedding.shape}')
        if weights[0].shape[0] != state_dim + embedding.shape[1]:
            raise DimensionError(f'input width {weights[0].shape[0]} != state dim {state_dim} + '
                                 f'embedding width {embedding.shape[1]}')
        for array in (*weights, *biases, embedding):
            if not np.all(np.isfinite(array)):
                raise NumericFailureError('network parameters must be finite')

    @classmethod
    def initialize(cls, dim: int, hidden: Sequence[int], embed_dim: int, schedule: NoiseSchedule,
                   rng: np.random.Generator) -> 'MlpDenoiser':
        """
        Creates a network with uniform weights in +-1/sqrt(fan_in), zero biases and a standard
        normal time embedding.

        :param dim: The state dimension N.
        :param hidden: The hidden layer widths.
        :param embed_dim: The width of the time embedding.
        :param schedule: The training schedule.
        :param rng: The random generator used for the initialization.
        """
        dims = [dim + embed_dim, *hidden, dim]
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            limit = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-limit, limit, (fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        embedding = rng.standard_normal((schedule.T, embed_dim))
        return cls(weights, biases, embedding, schedule)

    @property
    def dims(self) -> List[int]:
        """ Gets the layer widths d0, d1, ..., dk. """
        return [self._weights[0].shape[0], *(w.shape[1] for w in self._weights)]

    @property
    def parameters(self) -> List[np.ndarray]:
        """ Gets read-only views of W_0, b_0, W_1, b_1, ..., and the embedding table. """
        params = []
        for w, b in zip(self._weights, self._biases):
            params.extend([w, b])
        params.append(self._embedding)
        return params

    def with_parameters(self, parameters: Sequence[np.ndarray]) -> 'MlpDenoiser':
        """ Creates a network of the same architecture from a parameter list ordered like parameters. """
        layers = len(self._weights)
        return MlpDenoiser(parameters[0:2 * layers:2], parameters[1:2 * layers:2], parameters[-1], self.schedule)

    def _network_input(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        return np.concatenate([x, self._embedding[t - 1]], axis=-1)

    def forward(self, x: np.ndarray, t: np.ndarray) -> List[np.ndarray]:
        """
        Runs the epsilon network on a batch.

        :param x: States of shape (B, N).
        :param t: Steps of shape (B,).
        :return: The layer activations h_0, ..., h_k; h_k is the epsilon prediction.
        """
        activations = [self._network_input(x, t)]
        last = len(self._weights) - 1
        for i, (w, b) in enumerate(zip(self._weights, self._biases)):
            pre = activations[-1] @ w + b
            activations.append(pre if i == last else np.tanh(pre))
        return activations

    def backward(self, activations: List[np.ndarray], grad_output: np.ndarray) -> Tuple[List[np.ndarray], np.ndarray]:
        """
        Backpropagates a gradient of the epsilon prediction.

        :param activations: The activations returned by forward.
        :param grad_output: The gradient with respect to the epsilon prediction, shape (B, N).
        :return: The parameter gradients ordered like parameters (embedding gradient excluded, it is
          None) and the gradient with respect to the network input.
        """
        grads: List = [None] * (2 * len(self._weights) + 1)
        grad = grad_output
        last = len(self._weights) - 1
        for i in range(last, -1, -1):
            if i != last:
                grad = grad * (1.0 - activations[i + 1] ** 2)
            grads[2 * i] = activations[i].T @ grad
            grads[2 * i + 1] = grad.sum(axis=0)
            grad = grad @ self._weights[i].T
        return grads, grad

    def epsilon(self, x: np.ndarray, t: int) -> np.ndarray:
        """ Gets the raw network output eps(x, t) for a single state. """
        return self.forward(x[None, :], np.array([t]))[-1][0]

    def _value(self, x: np.ndarray, t: int) -> np.ndarray:
        alpha_bar = self.schedule.alpha_bar[t]
        return (x - np.sqrt(1.0 - alpha_bar) * self.epsilon(x, t)) / np.sqrt(alpha_bar)

    def _vjp(self, x: np.ndarray, t: int, v: np.ndarray) -> np.ndarray:
        alpha_bar = self.schedule.alpha_bar[t]
        activations = self.forward(x[None, :], np.array([t]))
        grad_output = (-np.sqrt(1.0 - alpha_bar) / np.sqrt(alpha_bar)) * v[None, :]
        _, grad_input = self.backward(activations, grad_output)
        return v / np.sqrt(alpha_bar) + grad_input[0, :self.dim]

    def to_bytes(self) -> bytes:
        """
        Serializes the network in the CPMLP1 checkpoint format: the magic bytes, the ASCII lines
        'dims d0 ... dk' and 'T <int>', then every layer's weight matrix (row-major) followed by its
        bias, then the embedding table (row-major), all as little-endian float64.
        """
        header = CHECKPOINT_MAGIC
        header += ('dims ' + ' '.join(str(d) for d in self.dims) + '\n').encode('ascii')
        header += f'T {self._embedding.shape[0]}\n'.encode('ascii')
        body = b''.join(np.ascontiguousarray(p, dtype='<f8').tobytes() for p in self.parameters)
        return header + body

    @classmethod
    def from_bytes(cls, data: bytes, schedule: NoiseSchedule) -> 'MlpDenoiser':
        """
        Parses a CPMLP1 checkpoint.
        :param data: The checkpoint bytes.
        :param schedule: The training schedule. Its T must match the checkpoint.
        """
        if not data.startswith(CHECKPOINT_MAGIC):
            raise FormatError('not a CPMLP1 checkpoint')
        rest = data[len(CHECKPOINT_MAGIC):]
        try:
            dims_line, t_line, body = rest.split(b'\n', 2)
            dims_tokens = dims_line.decode('ascii').split()
            t_tokens = t_line.decode('ascii').split()
            if dims_tokens[0] != 'dims' or t_tokens[0] != 'T' or len(t_tokens) != 2:
                raise ValueError('bad header')
            dims = [int(d) for d in dims_tokens[1:]]
            steps = int(t_tokens[1])
        except (ValueError, IndexError, UnicodeDecodeError):
            raise FormatError('malformed CPMLP1 header') from None

        if len(dims) < 2 or steps != schedule.T:
            raise FormatError(f'checkpoint has dims {dims} and T={steps}, schedule has T={schedule.T}')
        embed_dim = dims[0] - dims[-1]
        shapes = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            shapes.extend([(fan_in, fan_out), (fan_out,)])
        shapes.append((steps, embed_dim))

        expected = sum(int(np.prod(shape)) for shape in shapes) * 8
        if len(body) != expected:
            raise FormatError(f'checkpoint body has {len(body)} bytes, expected {expected}')
        values = np.frombuffer(body, dtype='<f8').astype(np.float64)
        params, offset = [], 0
        for shape in shapes:
            size = int(np.prod(shape))
            params.append(values[offset:offset + size].reshape(shape))
            offset += size

        layers = len(dims) - 1
        return cls(params[0:2 * layers:2], params[1:2 * layers:2], params[-1], schedule)

    def identifier(self) -> str:
        return f'mlp:{hashlib.sha256(self.to_bytes()).hexdigest()[:16]}'


def save_checkpoint(model: MlpDenoiser, path: Union[str, Path]) -> None:
    Path(path).write_bytes(model.to_bytes())


def load_checkpoint(path: Union[str, Path], schedule: NoiseSchedule) -> MlpDenoiser:
    return MlpDenoiser.from_bytes(Path(path).read_bytes(), schedule)


@dataclass(frozen=True, slots=True, kw_only=True)
class TrainingConfig:
    """ Hyperparameters of the epsilon-prediction training. """

    hidden: Tuple[int, ...] = (64, 64)
    """ The hidden layer widths. """
    embed_dim: int = 8
    """ The width of the learned time embedding. """
    epochs: int = 200
    """ The number of passes over the dataset. """
    batch_size: int = 128
    """ The mini-batch size. """
    learning_rate: float = 2e-3
    """ The Adam step size. """
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    probe_size: int = 512
    """ The number of fixed (x_0, t, eps) triples the per-epoch loss is measured on. """
    seed: int = 0
    """ The seed of initialization, shuffling and noise draws. """

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.probe_size < 1 or self.embed_dim < 0:
            raise ValueError('epochs must be >= 0, batch_size and probe_size >= 1, embed_dim >= 0')
        if not self.learning_rate > 0.0:
            raise ValueError(f'learning_rate must be positive, got {self.learning_rate}')


@dataclass(slots=True, kw_only=True)
class TrainingResult:
    """ The outcome of train_mlp. """

    model: MlpDenoiser
    """ The trained network. """
    final_loss: float
    """ The probe loss of the returned network. """
    baseline_loss: float
    """ The probe loss of the zero network eps = 0. """
    history: List[float] = field(default_factory=list)
    """ The probe loss after each epoch. """


def _noising_batch(x0: np.ndarray, schedule: NoiseSchedule, rng: np.random.Generator):
    t = rng.integers(1, schedule.T + 1, size=x0.shape[0])
    noise = rng.standard_normal(x0.shape)
    alpha_bar = schedule.alpha_bar[t][:, None]
    xt = np.sqrt(alpha_bar) * x0 + np.sqrt(1.0 - alpha_bar) * noise
    return xt, t, noise


def _mean_squared_error(model: MlpDenoiser, xt: np.ndarray, t: np.ndarray, noise: np.ndarray) -> float:
    return float(np.mean((model.forward(xt, t)[-1] - noise) ** 2))


def train_mlp(dataset: np.ndarray, schedule: NoiseSchedule, config: TrainingConfig = TrainingConfig()) -> TrainingResult:
    """
    Trains an MlpDenoiser on the epsilon-prediction objective
    E || eps - eps_theta(sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) eps, t) ||^2 with Adam on
    mini-batches. Training is deterministic given config.seed.

    :param dataset: Training vectors of shape (n, N) with values in [-1, 1].
    :param schedule: The training schedule.
    :param config: The training hyperparameters.
    :return: The trained network together with its final and baseline probe losses.
    """
    dataset = np.asarray(dataset, dtype=np.float64)
    if dataset.ndim != 2 or dataset.shape[0] == 0:
        raise DimensionError(f'dataset must have shape (n, N) with n > 0, got {dataset.shape}')
    if np.any(np.abs(dataset) > 1.0):
        raise ValueError('dataset values must lie in [-1, 1]')

    init_seq, probe_seq, train_seq = np.random.SeedSequence(config.seed).spawn(3)
    model = MlpDenoiser.initialize(dataset.shape[1], config.hidden, config.embed_dim, schedule,
                                   np.random.default_rng(init_seq))

    probe_rng = np.random.default_rng(probe_seq)
    probe_x0 = dataset[probe_rng.integers(0, dataset.shape[0], size=config.probe_size)]
    probe = _noising_batch(probe_x0, schedule, probe_rng)
    baseline_loss = float(np.mean(probe[2] ** 2))

    params = [p.copy() for p in model.parameters]
    first_moments = [np.zeros_like(p) for p in params]
    second_moments = [np.zeros_like(p) for p in params]
    rng = np.random.default_rng(train_seq)
    history: List[float] = []
    update = 0

    for epoch in range(config.epochs):
        order = rng.permutation(dataset.shape[0])
        for start in range(0, dataset.shape[0], config.batch_size):
            x0 = dataset[order[start:start + config.batch_size]]
            xt, t, noise = _noising_batch(x0, schedule, rng)

            activations = model.forward(xt, t)
            residual = activations[-1] - noise
            grads, grad_input = model.backward(activations, 2.0 * residual / residual.size)
            grad_embedding = np.zeros_like(params[-1])
            np.add.at(grad_embedding, t - 1, grad_input[:, dataset.shape[1]:])
            grads[-1] = grad_embedding

            update += 1
            for p, g, m, v in zip(params, grads, first_moments, second_moments):
                m *= config.beta1
                m += (1.0 - config.beta1) * g
                v *= config.beta2
                v += (1.0 - config.beta2) * g ** 2
                m_hat = m / (1.0 - config.beta1 ** update)
                v_hat = v / (1.0 - config.beta2 ** update)
                p -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)

            if not all(np.all(np.isfinite(p)) for p in params):
                raise NumericFailureError(f'non-finite parameters in epoch {epoch + 1}')
            model = model.with_parameters(params)

        loss = _mean_squared_error(model, *probe)
        if not np.isfinite(loss):
            raise NumericFailureError(f'non-finite training loss in epoch {epoch + 1}')
        history.append(loss)
        logger.debug('epoch %d: probe loss %.6f', epoch + 1, loss)

    final_loss = history[-1] if history else _mean_squared_error(model, *probe)
    logger.info('training finished: loss %.6f (zero network %.6f)', final_loss, baseline_loss)
    return TrainingResult(model=model, final_loss=final_loss, baseline_loss=baseline_loss, history=history)
