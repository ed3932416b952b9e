"""Encoder/decoder and critics assembled from grid operators, VAE and
WGAN-GP losses with hand-derived gradients, Adam, and the training loop.

The encoder is N blocks of 4 convolutions with pooling in between, ending in
two linear heads (mean and log-variance).  The decoder mirrors it with
upsampling and a final 4-channel convolution (occupancy logit plus a 3-vector
deformation).  A fully convolutional per-tet critic and a pooling critic with
a scalar head provide the adversarial scores.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .shapefields import FieldSet
from .tetgrid import GridHierarchy
from .tensorops import (
    FeatureTensor,
    InstanceNorm,
    LeakyReLU,
    Linear,
    NonFiniteError,
    TetConv,
    TetPool,
    TetUpsample,
    check_finite,
)

CHECKPOINT_MAGIC = b"TGAN"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Raised when a loss turns non-finite; a checkpoint has been written."""

    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass
class ModelConfig:
    m: int = 5
    levels: int = 3
    latent: int = 64
    width: int = 16
    critic_width: int = 16
    in_channels: int = 4
    pool_mode: str = "avg"
    leaky_slope: float = 0.2
    upsample_include_parent: bool = True
    # start near-deterministic so early reparameterization noise does not
    # drown the latent signal
    logvar_bias_init: float = -6.0
    seed: int = 0


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x):
    return np.where(x > 0, x, 0.0) + np.log1p(np.exp(-np.abs(x)))


class _Network:
    """A chain of grid layers with optional flat heads; subclasses wire it.

    After construction, parameters and gradients live in one contiguous
    buffer each (layer arrays become views into it), so the optimizer can
    update a whole network with a handful of vector operations."""

    def __init__(self):
        self.chain = []
        self._named = []
        self.flat_params = None
        self.flat_grads = None

    def _register(self, name, layer):
        self._named.append((name, layer))
        return layer

    def _flatten_storage(self):
        sizes = sum(arr.size for _, arr in self.param_items())
        self.flat_params = np.empty(sizes)
        self.flat_grads = np.zeros(sizes)
        off = 0
        for _, layer in self._named:
            params = layer.params()
            grads = layer.grads()
            for pname in params:
                arr = params[pname]
                n = arr.size
                view = self.flat_params[off : off + n].reshape(arr.shape)
                view[...] = arr
                gview = self.flat_grads[off : off + n].reshape(arr.shape)
                gview[...] = grads[pname]
                # rebind the layer attributes onto the shared buffers
                for attr, val in list(vars(layer).items()):
                    if val is arr:
                        setattr(layer, attr, view)
                    elif val is grads[pname]:
                        setattr(layer, attr, gview)
                off += n

    def param_items(self):
        out = []
        for name, layer in self._named:
            for pname, arr in layer.params().items():
                out.append((f"{name}.{pname}", arr))
        return out

    def grad_items(self):
        out = []
        for name, layer in self._named:
            for pname, arr in layer.grads().items():
                out.append((f"{name}.{pname}", arr))
        return out

    def zero_grads(self):
        if self.flat_grads is not None:
            self.flat_grads[...] = 0.0
        else:
            for _, layer in self._named:
                layer.zero_grads()


class Encoder(_Network):
    # keeps exp(logvar) in the KL term from overflowing during training
    LOGVAR_MIN = -30.0
    LOGVAR_MAX = 10.0

    def __init__(self, hierarchy: GridHierarchy, cfg: ModelConfig, rng):
        super().__init__()
        self.hierarchy = hierarchy
        N = hierarchy.num_levels
        c = cfg.in_channels
        li = 0
        for i, level in enumerate(range(N, 0, -1)):
            w = cfg.width * (2 ** i)
            for j in range(4):
                conv = self._register(f"conv{li}", TetConv(hierarchy.grid(level), c, w, rng))
                self.chain.append(conv)
                self.chain.append(self._register(f"norm{li}", InstanceNorm(w)))
                self.chain.append(LeakyReLU(cfg.leaky_slope))
                c = w
                li += 1
            if level > 1:
                self.chain.append(TetPool(hierarchy, level, cfg.pool_mode))
        self.deep_width = c
        self.flat_dim = hierarchy.grid(1).num_tets * c
        self.mu_head = self._register("mu", Linear(self.flat_dim, cfg.latent, rng))
        self.logvar_head = self._register("logvar", Linear(self.flat_dim, cfg.latent, rng))
        self.logvar_head.b[:] = cfg.logvar_bias_init
        self._flatten_storage()

    def forward(self, x: FeatureTensor):
        h = x
        for layer in self.chain:
            h = layer.forward(h)
        self._deep_shape = h.data.shape
        flat = h.data.ravel()
        mu = self.mu_head.forward(flat)
        logvar_raw = self.logvar_head.forward(flat)
        self._lv_open = (logvar_raw > self.LOGVAR_MIN) & (logvar_raw < self.LOGVAR_MAX)
        return mu, np.clip(logvar_raw, self.LOGVAR_MIN, self.LOGVAR_MAX)

    def backward(self, dmu, dlogvar, accumulate=True):
        dflat = self.mu_head.backward(dmu, accumulate)
        dflat = dflat + self.logvar_head.backward(dlogvar * self._lv_open, accumulate)
        g = dflat.reshape(self._deep_shape)
        for layer in reversed(self.chain):
            g = layer.backward(g, accumulate)
        return g


class Decoder(_Network):
    out_channels = 4  # occupancy logit + deformation xyz

    def __init__(self, hierarchy: GridHierarchy, cfg: ModelConfig, rng):
        super().__init__()
        self.hierarchy = hierarchy
        N = hierarchy.num_levels
        self.coarse_tets = hierarchy.grid(1).num_tets
        self.deep_width = cfg.width * (2 ** (N - 1))
        self.fc = self._register("fc", Linear(cfg.latent, self.coarse_tets * self.deep_width, rng))
        c = self.deep_width
        li = 0
        for level in range(1, N + 1):
            w = cfg.width * (2 ** (N - level))
            for j in range(4):
                final = level == N and j == 3
                cout = self.out_channels if final else w
                conv = self._register(f"conv{li}", TetConv(hierarchy.grid(level), c, cout, rng))
                self.chain.append(conv)
                if not final:
                    self.chain.append(self._register(f"norm{li}", InstanceNorm(cout)))
                    self.chain.append(LeakyReLU(cfg.leaky_slope))
                c = cout
                li += 1
            if level < N:
                self.chain.append(TetUpsample(hierarchy, level + 1, cfg.upsample_include_parent))
        self._flatten_storage()

    def forward(self, z) -> FeatureTensor:
        flat = self.fc.forward(z)
        h = FeatureTensor(1, flat.reshape(self.coarse_tets, self.deep_width))
        for layer in self.chain:
            h = layer.forward(h)
        return h

    def backward(self, grad_out, accumulate=True):
        g = grad_out
        for layer in reversed(self.chain):
            g = layer.backward(g, accumulate)
        return self.fc.backward(g.ravel(), accumulate)


class LocalCritic(_Network):
    """Fully convolutional patch critic: one Wasserstein score per tet,
    averaged into a scalar for the loss.  Three conv layers, so the
    receptive field is exactly the 3-hop neighbor ball; no normalization
    layers, since instance statistics would couple distant tets."""

    def __init__(self, hierarchy: GridHierarchy, cfg: ModelConfig, rng):
        super().__init__()
        grid = hierarchy.finest
        self.level = hierarchy.num_levels
        w = cfg.critic_width
        self.chain = [
            self._register("conv0", TetConv(grid, cfg.in_channels, w, rng)),
            LeakyReLU(cfg.leaky_slope),
            self._register("conv1", TetConv(grid, w, w, rng)),
            LeakyReLU(cfg.leaky_slope),
            self._register("conv2", TetConv(grid, w, 1, rng)),
        ]
        self.num_tets = grid.num_tets
        self._flatten_storage()

    def forward_scores(self, x: FeatureTensor):
        h = x
        for layer in self.chain:
            h = layer.forward(h)
        return h.data  # (K, 1)

    def forward_score(self, x: FeatureTensor) -> float:
        return float(self.forward_scores(x).mean())

    def backward_from_scores(self, grad_scores, accumulate=True):
        g = grad_scores
        for layer in reversed(self.chain):
            g = layer.backward(g, accumulate)
        return g

    def backward_score(self, weight=1.0, accumulate=True):
        grad = np.full((self.num_tets, 1), weight / self.num_tets)
        return self.backward_from_scores(grad, accumulate)


class GlobalCritic(_Network):
    """Pooling critic: N blocks of 3 convolutions ending in a scalar head."""

    def __init__(self, hierarchy: GridHierarchy, cfg: ModelConfig, rng):
        super().__init__()
        N = hierarchy.num_levels
        c = cfg.in_channels
        li = 0
        for i, level in enumerate(range(N, 0, -1)):
            w = cfg.critic_width * (2 ** i)
            for _ in range(3):
                self.chain.append(self._register(f"conv{li}", TetConv(hierarchy.grid(level), c, w, rng)))
                self.chain.append(self._register(f"norm{li}", InstanceNorm(w)))
                self.chain.append(LeakyReLU(cfg.leaky_slope))
                c = w
                li += 1
            if level > 1:
                self.chain.append(TetPool(hierarchy, level, cfg.pool_mode))
        self.head = self._register("head", Linear(hierarchy.grid(1).num_tets * c, 1, rng))
        self._flatten_storage()

    def forward_score(self, x: FeatureTensor) -> float:
        h = x
        for layer in self.chain:
            h = layer.forward(h)
        self._deep_shape = h.data.shape
        return float(self.head.forward(h.data.ravel())[0])

    def backward_score(self, weight=1.0, accumulate=True):
        g = self.head.backward(np.array([weight]), accumulate)
        g = g.reshape(self._deep_shape)
        for layer in reversed(self.chain):
            g = layer.backward(g, accumulate)
        return g


class Adam:
    """Bias-corrected Adam bound to a list of parameter arrays (in place)."""

    def __init__(self, arrays, lr=1e-4, beta1=0.0, beta2=0.9, eps=1e-8):
        self.arrays = list(arrays)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(a) for a in self.arrays]
        self.v = [np.zeros_like(a) for a in self.arrays]

    def step(self, grads):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for a, g, m, v in zip(self.arrays, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            a -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def adam_step(optimizer: Adam, grads) -> None:
    optimizer.step(grads)


def reparameterize(mu, logvar, rng):
    """z = mu + exp(logvar/2) * eta with eta ~ N(0, I); accepts a Generator
    or a seed.  Returns (z, eta) so training can reuse the noise."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    eta = rng.standard_normal(np.shape(mu))
    return mu + np.exp(0.5 * logvar) * eta, eta


def kl_divergence(mu, logvar):
    """KL(N(mu, sigma^2) || N(0, I)), summed over latent dimensions."""
    return float(-0.5 * np.sum(1.0 + logvar - mu**2 - np.exp(logvar)))


def vae_loss(raw_out, target: FieldSet, mu, logvar, vertex_matrix,
             lambda_d=1.0, lambda_kl=1e-3):
    """Binary cross-entropy on occupancy logits, MSE on per-vertex
    deformations (predicted tet deformations averaged onto vertices), and the
    KL term.  Returns (total, parts, grad_raw, dmu, dlogvar)."""
    check_finite(raw_out, "decoder output")
    check_finite(mu, "mu")
    check_finite(logvar, "logvar")
    K = raw_out.shape[0]
    logit = raw_out[:, 0]
    t = target.occupancy
    bce = float(np.mean(_softplus(logit) - logit * t))
    dlogit = (_sigmoid(logit) - t) / K

    pred_tet = raw_out[:, 1:4]
    pred_vert = vertex_matrix @ pred_tet
    resid = pred_vert - target.vertex_deformation
    n_entries = resid.size
    mse = float(np.mean(resid**2))
    dpred_tet = vertex_matrix.T @ (2.0 * resid / n_entries)

    kl = kl_divergence(mu, logvar)
    dmu = lambda_kl * mu
    dlogvar = lambda_kl * 0.5 * (np.exp(logvar) - 1.0)

    total = bce + lambda_d * mse + lambda_kl * kl
    grad_raw = np.empty_like(raw_out)
    grad_raw[:, 0] = dlogit
    grad_raw[:, 1:4] = lambda_d * dpred_tet
    parts = {"bce": bce, "mse": mse, "kl": kl}
    return total, parts, grad_raw, dmu, dlogvar


class ShapeModel:
    """Encoder, decoder, and the two critics over one grid hierarchy."""

    def __init__(self, hierarchy: GridHierarchy, config: ModelConfig = None, rng=None):
        self.hierarchy = hierarchy
        self.config = config or ModelConfig(
            m=_infer_m(hierarchy), levels=hierarchy.num_levels
        )
        if rng is None:
            rng = np.random.default_rng(self.config.seed)
        self.encoder = Encoder(hierarchy, self.config, rng)
        self.decoder = Decoder(hierarchy, self.config, rng)
        self.local_critic = LocalCritic(hierarchy, self.config, rng)
        self.global_critic = GlobalCritic(hierarchy, self.config, rng)
        self._vertex_matrix = hierarchy.vertex_average_matrix(hierarchy.num_levels)

    @property
    def networks(self):
        return {
            "encoder": self.encoder,
            "decoder": self.decoder,
            "local_critic": self.local_critic,
            "global_critic": self.global_critic,
        }

    def num_parameters(self) -> int:
        return sum(
            arr.size for net in self.networks.values() for _, arr in net.param_items()
        )

    def input_tensor(self, fields: FieldSet) -> FeatureTensor:
        return FeatureTensor(self.hierarchy.num_levels, fields.as_feature_array())

    def encode(self, fields):
        x = fields if isinstance(fields, FeatureTensor) else self.input_tensor(fields)
        return self.encoder.forward(x)

    def decode_raw(self, z) -> np.ndarray:
        return self.decoder.forward(z).data

    def decode(self, z) -> FieldSet:
        raw = self.decode_raw(z)
        occ = _sigmoid(raw[:, 0])
        tet_def = raw[:, 1:4]
        vert_def = self._vertex_matrix @ tet_def
        return FieldSet(occ, tet_def, vert_def)

    def reconstruct(self, fields: FieldSet) -> FieldSet:
        mu, _ = self.encode(fields)
        return self.decode(mu)

    def sample(self, rng) -> FieldSet:
        if isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(rng)
        z = rng.standard_normal(self.config.latent)
        return self.decode(z)

    def critic_scores(self, fields):
        x = fields if isinstance(fields, FeatureTensor) else self.input_tensor(fields)
        local = self.local_critic.forward_scores(x)
        glob = self.global_critic.forward_score(x)
        return local, glob


def lerp(z_a, z_b, t: float):
    """Linear interpolation, exact at the endpoints."""
    z_a = np.asarray(z_a)
    z_b = np.asarray(z_b)
    if t == 0.0:
        return z_a.copy()
    if t == 1.0:
        return z_b.copy()
    return z_a + t * (z_b - z_a)


def latent_arith(z_a, z_b, z_c):
    """z_a - z_b + z_c."""
    return np.asarray(z_a) - np.asarray(z_b) + np.asarray(z_c)


def _infer_m(hierarchy: GridHierarchy) -> int:
    return round((hierarchy.grid(1).num_tets / 6.0) ** (1.0 / 3.0))


def _fake_to_critic_input(raw) -> tuple:
    """Decoder raw output -> critic input [sigmoid(logit), deformation],
    plus the occupancy-channel chain factor."""
    occ = _sigmoid(raw[:, 0])
    x = np.concatenate([occ[:, None], raw[:, 1:4]], axis=1)
    return x, occ * (1.0 - occ)


def gradient_penalty(critic, x_hat: FeatureTensor, fd_step=1e-4):
    """Penalty (||grad_x score||-1)^2 at x_hat, its value, and the pieces
    needed to push its parameter gradient through finite differences.

    Returns (penalty, grad_norm, unit_direction)."""
    critic.forward_score(x_hat)
    g = critic.backward_score(1.0, accumulate=False)
    n = float(np.linalg.norm(g))
    if n < 1e-12:
        return (0.0 - 1.0) ** 2, n, None
    return (n - 1.0) ** 2, n, g / n


def wgan_gp_critic_step(critic, real_inputs, fake_inputs, rng,
                        lambda_gp=10.0, fd_step=1e-4):
    """Accumulate WGAN-GP critic gradients for a batch.

    loss = E[score(fake)] - E[score(real)]
         + lambda_gp * E[(||grad score(x_hat)|| - 1)^2],
    x_hat = eps*real + (1-eps)*fake.  Second-order terms reach the parameters
    by central-differencing the critic's input gradient along the penalty
    direction.  Returns (loss, wasserstein_part, penalty_part).
    """
    B = len(real_inputs)
    level = real_inputs[0].level
    w_term = 0.0
    p_term = 0.0
    for x_r, x_f in zip(real_inputs, fake_inputs):
        s_f = critic.forward_score(x_f)
        critic.backward_score(1.0 / B, accumulate=True)
        s_r = critic.forward_score(x_r)
        critic.backward_score(-1.0 / B, accumulate=True)
        w_term += (s_f - s_r) / B

        eps = rng.uniform()
        x_hat = FeatureTensor(level, eps * x_r.data + (1.0 - eps) * x_f.data)
        penalty, n, u = gradient_penalty(critic, x_hat, fd_step)
        p_term += penalty / B
        if u is None or lambda_gp == 0.0:
            continue
        coef = lambda_gp * (n - 1.0) / (fd_step * B)
        critic.forward_score(FeatureTensor(level, x_hat.data + fd_step * u))
        critic.backward_score(coef, accumulate=True)
        critic.forward_score(FeatureTensor(level, x_hat.data - fd_step * u))
        critic.backward_score(-coef, accumulate=True)
    loss = w_term + lambda_gp * p_term
    if not np.isfinite(loss):
        raise TrainingDiverged("critic loss is not finite")
    return loss, w_term, p_term


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 30
    lr: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.9
    lambda_d: float = 1.0
    lambda_kl: float = 1e-3
    n_critic: int = 5
    lambda_gp: float = 10.0
    mode: str = "both"  # vae | gan | both
    seed: int = 0
    clip_grad_norm: float = 0.0  # 0 disables clipping
    checkpoint_path: str = None
    checkpoint_every: int = 0  # epochs; 0 = only at the end
    max_steps: int = 0  # 0 = unbounded; counts optimizer steps across phases

    def __post_init__(self):
        if self.mode not in ("vae", "gan", "both"):
            raise ValueError(f"unknown training mode {self.mode!r}")


class Trainer:
    def __init__(self, model: ShapeModel, config: TrainConfig):
        self.model = model
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        c = config
        self.optimizers = {
            name: Adam([net.flat_params], c.lr, c.beta1, c.beta2)
            for name, net in model.networks.items()
        }
        self.log = []
        self.step_count = 0

    def _apply(self, names):
        clip = self.config.clip_grad_norm
        for name in names:
            net = self.model.networks[name]
            check_finite(net.flat_grads, f"{name} gradient")
            if clip > 0.0:
                norm = float(np.linalg.norm(net.flat_grads))
                if norm > clip:
                    net.flat_grads *= clip / norm
            self.optimizers[name].step([net.flat_grads])
            net.zero_grads()

    def vae_step(self, batch):
        model = self.model
        model.encoder.zero_grads()
        model.decoder.zero_grads()
        totals = {"loss": 0.0, "bce": 0.0, "mse": 0.0, "kl": 0.0}
        B = len(batch)
        for fields in batch:
            x = model.input_tensor(fields)
            mu, logvar = model.encoder.forward(x)
            z, eta = reparameterize(mu, logvar, self.rng)
            raw = model.decoder.forward(z)
            total, parts, grad_raw, dmu, dlogvar = vae_loss(
                raw.data, fields, mu, logvar, model._vertex_matrix,
                self.config.lambda_d, self.config.lambda_kl,
            )
            dz = model.decoder.backward(grad_raw / B, accumulate=True)
            dmu = dmu / B + dz
            dlogvar = dlogvar / B + dz * eta * 0.5 * np.exp(0.5 * logvar)
            model.encoder.backward(dmu, dlogvar, accumulate=True)
            totals["loss"] += total / B
            for k in parts:
                totals[k] += parts[k] / B
        if not np.isfinite(totals["loss"]):
            raise TrainingDiverged("VAE loss is not finite")
        self._apply(["encoder", "decoder"])
        return totals

    def _fakes(self, count):
        model = self.model
        fakes = []
        raws = []
        for _ in range(count):
            z = self.rng.standard_normal(model.config.latent)
            raw = model.decode_raw(z)
            x, _ = _fake_to_critic_input(raw)
            fakes.append(FeatureTensor(model.hierarchy.num_levels, x))
            raws.append(raw)
        return fakes, raws

    def gan_step(self, dataset, batch_size):
        model = self.model
        c = self.config
        level = model.hierarchy.num_levels
        stats = {"critic_local": 0.0, "critic_global": 0.0, "gen": 0.0}
        for _ in range(c.n_critic):
            idx = self.rng.choice(len(dataset), size=batch_size, replace=len(dataset) < batch_size)
            reals = [model.input_tensor(dataset[i]) for i in idx]
            fakes, _ = self._fakes(batch_size)
            model.local_critic.zero_grads()
            loss_l, _, _ = wgan_gp_critic_step(
                model.local_critic, reals, fakes, self.rng, c.lambda_gp
            )
            self._apply(["local_critic"])
            model.global_critic.zero_grads()
            loss_g, _, _ = wgan_gp_critic_step(
                model.global_critic, reals, fakes, self.rng, c.lambda_gp
            )
            self._apply(["global_critic"])
            stats["critic_local"] += loss_l / c.n_critic
            stats["critic_global"] += loss_g / c.n_critic

        # generator: push decoder to raise both critic scores on fakes
        model.decoder.zero_grads()
        gen_loss = 0.0
        B = batch_size
        for _ in range(B):
            z = self.rng.standard_normal(model.config.latent)
            raw = model.decoder.forward(z)
            x, occ_chain = _fake_to_critic_input(raw.data)
            xt = FeatureTensor(level, x)
            s_l = model.local_critic.forward_score(xt)
            dx = model.local_critic.backward_score(-1.0 / B, accumulate=False)
            s_g = model.global_critic.forward_score(xt)
            dx = dx + model.global_critic.backward_score(-1.0 / B, accumulate=False)
            grad_raw = np.empty_like(raw.data)
            grad_raw[:, 0] = dx[:, 0] * occ_chain
            grad_raw[:, 1:4] = dx[:, 1:4]
            model.decoder.backward(grad_raw, accumulate=True)
            gen_loss += -(s_l + s_g) / B
        if not np.isfinite(gen_loss):
            raise TrainingDiverged("generator loss is not finite")
        self._apply(["decoder"])
        stats["gen"] = gen_loss
        return stats

    def run(self, dataset):
        c = self.config
        if not dataset:
            raise ValueError("training needs a nonempty dataset")
        n = len(dataset)
        batch_size = min(c.batch_size, n)
        try:
            for epoch in range(c.epochs):
                order = self.rng.permutation(n)
                for start in range(0, n, batch_size):
                    batch = [dataset[i] for i in order[start : start + batch_size]]
                    row = {"epoch": epoch, "step": self.step_count}
                    if c.mode in ("vae", "both"):
                        row.update(self.vae_step(batch))
                    if c.mode in ("gan", "both"):
                        row.update(self.gan_step(dataset, batch_size))
                    self.log.append(row)
                    self.step_count += 1
                    if c.max_steps and self.step_count >= c.max_steps:
                        return self.log
                if (
                    c.checkpoint_path
                    and c.checkpoint_every
                    and (epoch + 1) % c.checkpoint_every == 0
                ):
                    save_checkpoint(self.model, c.checkpoint_path)
        except (TrainingDiverged, NonFiniteError) as exc:
            if c.checkpoint_path:
                save_checkpoint(self.model, c.checkpoint_path)
                raise TrainingDiverged(str(exc), c.checkpoint_path) from exc
            raise TrainingDiverged(str(exc)) from exc
        if c.checkpoint_path:
            save_checkpoint(self.model, c.checkpoint_path)
        return self.log


def train(dataset, hierarchy: GridHierarchy, model_config: ModelConfig,
          train_config: TrainConfig):
    """Build a model and run the training loop; returns (model, log)."""
    model = ShapeModel(hierarchy, model_config)
    trainer = Trainer(model, train_config)
    log = trainer.run(dataset)
    return model, log


def write_loss_log(rows, path) -> None:
    keys = []
    for row in rows:
        for k in row:
            if k not in keys:
                keys.append(k)
    with open(path, "w") as f:
        f.write(",".join(keys) + "\n")
        for row in rows:
            f.write(",".join(str(row.get(k, "")) for k in keys) + "\n")


def save_checkpoint(model: ShapeModel, path) -> None:
    """Format: magic, version, JSON architecture descriptor, f32 arrays."""
    manifest = []
    arrays = []
    for net_name, net in model.networks.items():
        for pname, arr in net.param_items():
            manifest.append({"name": f"{net_name}.{pname}", "shape": list(arr.shape)})
            arrays.append(arr)
    descriptor = {"config": asdict(model.config), "params": manifest}
    blob = json.dumps(descriptor).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for arr in arrays:
            f.write(arr.astype("<f4").tobytes())


def load_checkpoint(path, hierarchy: GridHierarchy = None):
    """Rebuild the model (and its hierarchy unless one is supplied)."""
    from .tetgrid import build_hierarchy

    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4 or data[:4] != CHECKPOINT_MAGIC:
        raise IOError(f"{path}: not a model checkpoint (bad magic)")
    version, blob_len = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise IOError(f"{path}: unsupported checkpoint version {version}")
    descriptor = json.loads(data[12 : 12 + blob_len].decode())
    cfg = ModelConfig(**descriptor["config"])
    if hierarchy is None:
        hierarchy = build_hierarchy(cfg.m, cfg.levels)
    model = ShapeModel(hierarchy, cfg)
    params = {}
    for net_name, net in model.networks.items():
        for pname, arr in net.param_items():
            params[f"{net_name}.{pname}"] = arr
    off = 12 + blob_len
    for entry in descriptor["params"]:
        arr = params[entry["name"]]
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        vals = np.frombuffer(data, dtype="<f4", count=n, offset=off)
        off += 4 * n
        arr[...] = vals.reshape(entry["shape"]).astype(np.float64)
    return model
