"""
Training service
Codec and recognizer pre-training, and the guided diffusion training loop
that combines the noise-prediction loss with the recognition loss
"""

import logging
import math
from contextlib import contextmanager
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn.functional as F
from tqdm import tqdm

from textsr.checkpoints import save_checkpoint
from textsr.models.codec import LatentCodec
from textsr.models.recognizer import Recognizer, ctc_loss, guidance_distance
from textsr.services.data import make_loader
from textsr.services.diffusion import diffusion_loss, forward_marginal


logger = logging.getLogger(__name__)


class StepLosses(NamedTuple):
    """
    Losses of one optimizer step
    """

    loss_dm: float
    loss_recog: float
    total: float


@contextmanager
def seeded(seed):
    """
    Seeds torch inside the block without touching the global RNG state
    """

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def _require_samples(samples, what):
    if len(samples) == 0:
        raise ValueError(f"cannot train the {what} on an empty dataset")


def train_codec(samples, config, seed=0, device="cpu", progress=False):
    """
    Trains the latent codec on HR images

    Loss: L1 reconstruction + vector-quantization loss

    Returns (codec, history) where history holds one mean loss per epoch
    """

    _require_samples(samples, "codec")

    with seeded(seed):
        codec = LatentCodec.from_config(config)

    codec.to(device).train()
    optimizer = torch.optim.Adam(codec.parameters(), lr=config.codec_lr)
    history = []

    for epoch in tqdm(range(config.codec_epochs), desc="codec", disable=not progress):
        total = 0.0
        count = 0

        # One pass over the HR images in seeded order
        for batch in make_loader(samples, config.codec_batch_size, seed=seed, epoch=epoch):
            hr = batch.hr.to(device)
            reconstruction, vq_loss = codec(hr)
            loss = F.l1_loss(reconstruction, hr) + vq_loss

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            total += float(loss) * hr.shape[0]
            count += hr.shape[0]

        history.append(total / count)
        logger.info("codec epoch %d: loss %.5f", epoch + 1, history[-1])

    return codec.eval(), history


def train_recognizer(samples, alphabet, config, seed=0, device="cpu", progress=False):
    """
    Trains the recognizer with CTC on HR images and their labels
    Returns (recognizer, history)
    """

    _require_samples(samples, "recognizer")

    with seeded(seed):
        recognizer = Recognizer.from_config(config)

    recognizer.to(device).train()
    optimizer = torch.optim.Adam(recognizer.parameters(), lr=config.recognizer_lr)
    history = []

    for epoch in tqdm(range(config.recognizer_epochs), desc="recognizer", disable=not progress):
        total = 0.0
        count = 0

        for batch in make_loader(samples, config.recognizer_batch_size, seed=seed, epoch=epoch):
            hr = batch.hr.to(device)
            loss = ctc_loss(recognizer, hr, batch.labels, alphabet)

            # Clipped update, max gradient norm 5
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(recognizer.parameters(), 5.0)
            optimizer.step()

            total += float(loss) * hr.shape[0]
            count += hr.shape[0]

        history.append(total / count)
        logger.info("recognizer epoch %d: ctc loss %.5f", epoch + 1, history[-1])

    return recognizer.eval(), history


class DiffusionTrainer:
    """
    Joint training of the guided U-Net and the guidance recognizer

    The codec is frozen and excluded from the optimizer.
    All training randomness (timesteps, noise) comes from one seeded generator.
    """

    def __init__(self, unet, recognizer, codec, schedule, config, device="cpu", seed=0):
        self.device = torch.device(device)
        self.unet = unet.to(self.device)
        self.recognizer = recognizer.to(self.device)
        self.codec = codec.to(self.device).eval()
        self.schedule = schedule
        self.config = config
        self.lambda_recog = config.lambda_recog
        self.step = 0

        # Freeze the codec; the optimizer sees U-Net and recognizer only
        for parameter in self.codec.parameters():
            parameter.requires_grad_(False)

        self.optimizer = torch.optim.AdamW(
            list(self.unet.parameters()) + list(self.recognizer.parameters()),
            lr=config.lr,
            weight_decay=config.weight_decay,
        )

        self.generator = torch.Generator().manual_seed(seed)

    def check_codec_frozen(self):
        if any(parameter.requires_grad for parameter in self.codec.parameters()):
            raise RuntimeError("codec parameters are trainable; the codec must stay frozen during diffusion training")

    def train_step(self, batch):
        """
        One optimizer step on a PairedBatch

        Returns StepLosses(loss_dm, loss_recog, total)
        """

        self.check_codec_frozen()
        self.unet.train()
        self.recognizer.train()

        lr = batch.lr.to(self.device)
        hr = batch.hr.to(self.device)
        size = lr.shape[0]

        # HR latent from the frozen encoder
        with torch.no_grad():
            z0 = self.codec.encode(hr)

        # Uniform timesteps and noise from the trainer's own generator
        t = torch.randint(1, self.schedule.T + 1, (size,), generator=self.generator)
        eps = torch.randn(z0.shape, generator=self.generator).to(self.device, z0.dtype)
        t = t.to(self.device)

        # Noise prediction conditioned on the LR image and its guidance
        z_t = forward_marginal(z0, t, eps, self.schedule)
        c_rg = self.recognizer(lr)
        eps_pred = self.unet(z_t, lr, c_rg, t)

        loss_dm = diffusion_loss(eps, eps_pred)

        # Guidance of the LR image pulled towards the guidance of its HR image
        if self.lambda_recog > 0:
            loss_recog = guidance_distance(c_rg, self.recognizer(hr))
            total = loss_dm + self.lambda_recog * loss_recog
        else:
            with torch.no_grad():
                loss_recog = guidance_distance(c_rg, self.recognizer(hr))
            total = loss_dm

        if not torch.isfinite(total):
            raise FloatingPointError(
                f"non-finite loss at step {self.step}: loss_dm={float(loss_dm)}, "
                f"loss_recog={float(loss_recog)}, timesteps={t.tolist()}"
            )

        # Update
        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()
        self.step += 1

        return StepLosses(float(loss_dm), float(loss_recog), float(total))

    def state(self):
        return {"unet": self.unet, "recognizer": self.recognizer}


def save_diffusion(path, trainer, config, extra=None):
    return save_checkpoint(path, "diffusion", config, trainer.state(), extra)


def train_diffusion(trainer, samples, config, seed=0, checkpoint_dir=None, progress=False):
    """
    Runs the diffusion training loop for config.epochs epochs

    Parameters:
    trainer - DiffusionTrainer
    samples - training PairedSamples
    config - Config (batch_size, epochs, save_every, num_workers)
    seed - seeds the batch ordering of every epoch
    checkpoint_dir - where diffusion-epoch{N}.pt snapshots are written (None: no snapshots)

    Returns per-epoch history: list of dicts with mean losses
    """

    _require_samples(samples, "diffusion model")

    history = []

    for epoch in tqdm(range(config.epochs), desc="diffusion", disable=not progress):
        sums = {"loss_dm": 0.0, "loss_recog": 0.0, "total": 0.0}
        steps = 0

        loader = make_loader(samples, config.batch_size, seed=seed, epoch=epoch, num_workers=config.num_workers)

        # Accumulate per-step losses into epoch means
        for batch in loader:
            losses = trainer.train_step(batch)

            for key in sums:
                sums[key] += getattr(losses, key)

            steps += 1

        record = {"epoch": epoch + 1, **{key: value / steps for key, value in sums.items()}}
        history.append(record)

        logger.info(
            "diffusion epoch %d: loss_dm %.5f, loss_recog %.5f, total %.5f",
            record["epoch"], record["loss_dm"], record["loss_recog"], record["total"],
        )

        # Periodic snapshots for comparing training lengths
        if checkpoint_dir is not None and (epoch + 1) % config.save_every == 0:
            save_diffusion(
                Path(checkpoint_dir) / f"diffusion-epoch{epoch + 1}.pt",
                trainer,
                config,
                {"epoch": epoch + 1, "seed": seed},
            )

    if history and not math.isfinite(history[-1]["total"]):
        raise FloatingPointError("training finished with a non-finite mean loss")

    return history
