"""
Diffusion process service
Variance schedules, forward noising kernels, the noise-prediction loss
and the DDPM / DDIM reverse samplers

Timesteps are 1-based (t = 1..T); the convention alpha_bar_0 = 1 makes
t = 0 the clean latent. Schedule arrays are kept in float64 and applied
to latents as python floats.
"""

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from tqdm import tqdm


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSchedule:
    """
    Precomputed variance schedule

    Fields:
    kind - "linear", "cosine" or "respaced"
    T - number of timesteps
    betas, alphas, alpha_bars, beta_tildes - float64 tensors of length T,
    entry t-1 holds the value for timestep t
    """

    kind: str
    T: int
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor
    beta_tildes: torch.Tensor

    def alpha_bar(self, t):
        """
        Returns alpha_bar_t as a float, with alpha_bar_0 = 1
        """

        if t == 0:
            return 1.0

        return float(self.alpha_bars[t - 1])

    def rows(self):
        """
        Returns one (t, beta, alpha, alpha_bar, beta_tilde) tuple per timestep
        """

        return [
            (
                t,
                float(self.betas[t - 1]),
                float(self.alphas[t - 1]),
                float(self.alpha_bars[t - 1]),
                float(self.beta_tildes[t - 1]),
            )
            for t in range(1, self.T + 1)
        ]


def _schedule_from_betas(kind, betas):
    """
    Derives alphas, cumulative products and posterior variances from betas
    """

    # Cumulative signal retention
    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)

    # alpha_bar_{t-1} with alpha_bar_0 = 1, so beta_tilde_1 = 0
    previous = torch.cat([torch.ones(1, dtype=torch.float64), alpha_bars[:-1]])
    denominator = 1.0 - alpha_bars

    beta_tildes = torch.where(
        denominator > 0,
        (1.0 - previous) / denominator.clamp_min(1e-300) * betas,
        torch.zeros_like(betas),
    )

    return NoiseSchedule(
        kind=kind,
        T=len(betas),
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        beta_tildes=beta_tildes,
    )


def build_schedule(kind="linear", T=1000, beta_start=1e-4, beta_end=0.02, cosine_s=0.008):
    """
    Builds a noise schedule

    Parameters:
    kind - "linear" (betas evenly spaced from beta_start to beta_end)
           or "cosine" (squared-cosine alpha_bar curve, betas clipped at 0.999)
    T - number of timesteps, at least 1
    beta_start, beta_end - linear endpoints, 0 <= beta_start <= beta_end < 1
    cosine_s - offset of the cosine curve

    Returns NoiseSchedule
    """

    # Validate the schedule parameters
    if T < 1:
        raise ValueError(f"T must be at least 1, got {T}")

    if beta_end >= 1:
        raise ValueError(f"beta_end must be < 1, got {beta_end}")

    if not 0 <= beta_start <= beta_end:
        raise ValueError(f"need 0 <= beta_start <= beta_end, got {beta_start}, {beta_end}")

    # Betas for the requested family
    if kind == "linear":
        betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)

    elif kind == "cosine":
        steps = torch.arange(T + 1, dtype=torch.float64) / T
        curve = torch.cos((steps + cosine_s) / (1.0 + cosine_s) * math.pi / 2) ** 2
        curve = curve / curve[0]
        betas = (1.0 - curve[1:] / curve[:-1]).clamp(0.0, 0.999)

    else:
        raise ValueError(f"unknown schedule kind: {kind!r}")

    return _schedule_from_betas(kind, betas)


def stride_timesteps(T, steps):
    """
    Returns `steps` descending timesteps uniformly spaced over [1, T]
    The first entry is T; the walk ends at t = 0 after the last entry
    """

    if steps < 1 or steps > T:
        raise ValueError(f"steps must lie in [1, T={T}], got {steps}")

    return [T - (index * T) // steps for index in range(steps)]


def respace(sched, timesteps):
    """
    Builds the schedule seen by a sampler that visits only `timesteps`

    Respaced step i keeps alpha_bar of the i-th smallest kept timestep and
    takes beta_i = 1 - alpha_bar_i / alpha_bar_{i-1}.
    """

    # Kept timesteps in ascending order
    kept = sorted(timesteps)
    alpha_bars = torch.tensor([sched.alpha_bar(t) for t in kept], dtype=torch.float64)
    previous = torch.cat([torch.ones(1, dtype=torch.float64), alpha_bars[:-1]])
    betas = (1.0 - alpha_bars / previous).clamp(0.0, 0.999)

    return _schedule_from_betas("respaced", betas)


def _check_timestep(t, T, low=1):
    """
    Validates an integer timestep or a tensor of per-sample timesteps
    """

    if torch.is_tensor(t):
        if t.numel() == 0 or int(t.min()) < low or int(t.max()) > T:
            raise ValueError(f"timesteps must lie in [{low}, {T}]")

    elif not low <= t <= T:
        raise ValueError(f"timestep {t} out of range [{low}, {T}]")


def _check_same_shape(first, second, names):
    if first.shape != second.shape:
        raise ValueError(f"shape mismatch: {names[0]} {tuple(first.shape)} vs {names[1]} {tuple(second.shape)}")


def _per_sample(table, t, like):
    """
    Looks up table[t - 1] and shapes it to broadcast against `like`
    """

    if torch.is_tensor(t):
        values = table.to(like.device)[t.to(like.device) - 1]
        return values.to(like.dtype).view(-1, *([1] * (like.dim() - 1)))

    return float(table[t - 1])


def forward_marginal(z0, t, eps, sched):
    """
    Samples z_t from q(z_t | z_0) given the noise

    Parameters:
    z0 - clean latent (B, C, H, W)
    t - integer timestep, or LongTensor (B,) of per-sample timesteps
    eps - Gaussian noise with the shape of z0
    sched - NoiseSchedule

    Returns sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps
    """

    _check_timestep(t, sched.T)
    _check_same_shape(z0, eps, ("z0", "eps"))

    alpha_bar = _per_sample(sched.alpha_bars, t, z0)

    if torch.is_tensor(alpha_bar):
        return alpha_bar.sqrt() * z0 + (1.0 - alpha_bar).sqrt() * eps

    return math.sqrt(alpha_bar) * z0 + math.sqrt(1.0 - alpha_bar) * eps


def forward_step(z_prev, t, sched, noise):
    """
    One step of q(z_t | z_{t-1}): sqrt(1 - beta_t) * z_prev + sqrt(beta_t) * noise
    """

    _check_timestep(t, sched.T)
    _check_same_shape(z_prev, noise, ("z_prev", "noise"))

    beta = float(sched.betas[t - 1])

    return math.sqrt(1.0 - beta) * z_prev + math.sqrt(beta) * noise


def diffusion_loss(eps_true, eps_pred):
    """
    Mean squared error between true and predicted noise
    """

    _check_same_shape(eps_true, eps_pred, ("eps_true", "eps_pred"))

    return F.mse_loss(eps_pred, eps_true, reduction="mean")


def ddpm_step(z_t, eps_pred, t, sched, noise=None, variance="beta_tilde"):
    """
    One ancestral reverse step z_t -> z_{t-1}

    Parameters:
    z_t - current latent
    eps_pred - predicted noise
    t - timestep in [1, T]
    sched - NoiseSchedule
    noise - standard Gaussian of the latent shape; None means no noise
    variance - "beta_tilde" (posterior variance) or "beta"

    The final step (t = 1) never adds noise.
    """

    _check_timestep(t, sched.T)
    _check_same_shape(z_t, eps_pred, ("z_t", "eps_pred"))

    alpha = float(sched.alphas[t - 1])
    alpha_bar = float(sched.alpha_bars[t - 1])
    beta = float(sched.betas[t - 1])

    # (1 - alpha_t) / sqrt(1 - alpha_bar_t) is 0/0 when no noise was ever added
    if beta > 0:
        eps_coefficient = (1.0 - alpha) / math.sqrt(1.0 - alpha_bar)
    else:
        eps_coefficient = 0.0

    mean = (z_t - eps_coefficient * eps_pred) / math.sqrt(alpha)

    # Deterministic final step
    if t == 1 or noise is None:
        return mean

    _check_same_shape(z_t, noise, ("z_t", "noise"))

    # Noise scale of the reverse kernel
    if variance == "beta_tilde":
        sigma = math.sqrt(float(sched.beta_tildes[t - 1]))
    elif variance == "beta":
        sigma = math.sqrt(beta)
    else:
        raise ValueError(f"unknown variance choice: {variance!r}")

    return mean + sigma * noise


def predict_x0(z_t, eps_pred, alpha_bar):
    """
    Clean-latent estimate (z_t - sqrt(1 - alpha_bar) * eps) / sqrt(alpha_bar)
    """

    return (z_t - math.sqrt(1.0 - alpha_bar) * eps_pred) / math.sqrt(alpha_bar)


def ddim_step(z_t, eps_pred, t, t_prev, sched, eta=0.0, noise=None):
    """
    One DDIM step from t to t_prev < t

    With eta = 0 the step is deterministic and consumes no noise.
    With eta > 0 the noise tensor is required.
    """

    if t_prev >= t:
        raise ValueError(f"t_prev ({t_prev}) must be smaller than t ({t})")

    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")

    _check_timestep(t, sched.T)
    _check_timestep(t_prev, sched.T, low=0)
    _check_same_shape(z_t, eps_pred, ("z_t", "eps_pred"))

    alpha_bar = sched.alpha_bar(t)
    alpha_bar_prev = sched.alpha_bar(t_prev)

    # Predicted clean latent, then the eta-scaled stochastic part
    x0 = predict_x0(z_t, eps_pred, alpha_bar)

    sigma = 0.0

    if eta > 0 and alpha_bar < 1.0:
        sigma = eta * math.sqrt(
            (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * (1.0 - alpha_bar / alpha_bar_prev)
        )

    # Deterministic direction towards t_prev
    direction = math.sqrt(max(1.0 - alpha_bar_prev - sigma ** 2, 0.0))
    z_prev = math.sqrt(alpha_bar_prev) * x0 + direction * eps_pred

    if sigma > 0:
        if noise is None:
            raise ValueError("ddim_step with eta > 0 needs a noise tensor")

        _check_same_shape(z_t, noise, ("z_t", "noise"))
        z_prev = z_prev + sigma * noise

    return z_prev


@torch.no_grad()
def sample_loop(
    net,
    x_lr,
    c_rg,
    sched,
    sampler="ddim",
    steps=None,
    eta=0.0,
    seed=0,
    latent_channels=None,
    variance="beta_tilde",
    progress=False,
):
    """
    Runs the reverse process from seeded Gaussian noise down to z_0

    Parameters:
    net - callable (z_t, x_lr, c_rg, t) -> predicted noise; t is a LongTensor (B,)
    x_lr - LR condition (B, C, H, W); the latent shares its spatial dims
    c_rg - recognition guidance (B, L, |A|) or None
    sched - NoiseSchedule
    sampler - "ddim" or "ddpm" (ddpm with steps < T walks a respaced schedule)
    steps - number of network evaluations, at most T (default T)
    eta - DDIM stochasticity
    seed - int or one int per batch row; each row draws its initial latent and
           every noise tensor from its own generator, so a row never depends
           on the rest of the batch
    latent_channels - C_z (default: channels of x_lr)

    Returns z_0
    """

    # Visited timesteps, descending from T
    steps = sched.T if steps is None else steps
    timesteps = stride_timesteps(sched.T, steps)

    batch, channels, height, width = x_lr.shape
    shape = (batch, latent_channels or channels, height, width)

    seeds = [seed] * batch if isinstance(seed, int) else [int(row_seed) for row_seed in seed]

    if len(seeds) != batch:
        raise ValueError(f"got {len(seeds)} seeds for a batch of {batch}")

    # Noise is drawn on the CPU so results do not depend on the device
    generators = [torch.Generator().manual_seed(row_seed) for row_seed in seeds]

    def draw():
        rows = [torch.randn(shape[1:], generator=row_generator, dtype=x_lr.dtype) for row_generator in generators]

        return torch.stack(rows).to(x_lr.device)

    # Initial latent z_T
    z = draw()

    if sampler == "ddim":
        targets = timesteps[1:] + [0]
    elif sampler == "ddpm":
        walk = sched if steps == sched.T else respace(sched, timesteps)
    else:
        raise ValueError(f"unknown sampler: {sampler!r}")

    # Reverse walk, one network evaluation per visited timestep
    for index, t in enumerate(tqdm(timesteps, desc=f"{sampler} sampling", disable=not progress)):
        t_batch = torch.full((batch,), t, dtype=torch.long, device=x_lr.device)
        eps_pred = net(z, x_lr, c_rg, t_batch)

        if sampler == "ddim":
            noise = draw() if eta > 0 else None
            z = ddim_step(z, eps_pred, t, targets[index], sched, eta=eta, noise=noise)

        else:
            # Respaced position of t: the first visited step is `steps`
            position = steps - index
            noise = draw() if position > 1 else None
            z = ddpm_step(z, eps_pred, position, walk, noise=noise, variance=variance)

    logger.debug("sampled %d steps with %s (eta=%s, seed=%s)", steps, sampler, eta, seed)

    return z
