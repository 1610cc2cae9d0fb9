"""
Training commands
train-codec, train-recognizer and train-diffusion
"""

import csv
import logging

import click
import numpy as np
import torch

from textsr.checkpoints import load_checkpoint, restore_module, save_checkpoint
from textsr.config import Config
from textsr.models.codec import LatentCodec
from textsr.models.recognizer import Alphabet, Recognizer, RecognizerReader
from textsr.models.unet import GuidedUNet
from textsr.services.diffusion import build_schedule
from textsr.services.metrics import psnr, recognition_accuracy
from textsr.services.training import (
    DiffusionTrainer,
    save_diffusion,
    seeded,
    train_codec,
    train_diffusion,
    train_recognizer,
)


logger = logging.getLogger(__name__)

manifest_option = click.option(
    "--manifest",
    type=click.Path(dir_okay=False),
    default=None,
    help="JSON-lines manifest; the synthetic corpus is used when omitted.",
)


def write_history_csv(path, header, rows):
    """
    Writes per-epoch losses as CSV
    """

    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(rows)


def load_codec(invocation):
    """
    Restores the pre-trained codec from codec.pt
    """

    payload = load_checkpoint(invocation.path("codec.pt"), "codec")
    codec = LatentCodec.from_config(Config.from_dict(payload["config"]))

    return restore_module(codec, payload, "codec").eval()


def load_recognizer(invocation):
    """
    Restores the pre-trained recognizer and the alphabet it was trained on
    """

    payload = load_checkpoint(invocation.path("recognizer.pt"), "recognizer")
    config = Config.from_dict(payload["config"])

    return restore_module(Recognizer.from_config(config), payload, "recognizer").eval(), Alphabet.from_config(config)


@click.command("train-codec")
@manifest_option
@click.pass_obj
def train_codec_command(invocation, manifest):
    """
    Train the latent codec on HR images
    """

    # Train on HR images only
    train, held_out = invocation.corpus(manifest)
    codec, history = train_codec(train, invocation.config, invocation.seed, invocation.device, progress=True)

    # Save weights and the loss history
    save_checkpoint(
        invocation.output("codec.pt"),
        "codec",
        invocation.config,
        {"codec": codec},
        {"history": history, "seed": invocation.seed},
    )

    write_history_csv(
        invocation.output("codec-loss.csv"),
        ["epoch", "loss"],
        [(epoch + 1, f"{loss:.6f}") for epoch, loss in enumerate(history)],
    )

    # Round-trip fidelity on held-out images
    if held_out:
        codec = codec.cpu()

        with torch.no_grad():
            hr = torch.stack([sample.hr for sample in held_out])
            reconstruction = codec.decode(codec.encode(hr))

        scores = [psnr(image, target) for image, target in zip(reconstruction, hr)]
        click.echo(f"codec round-trip PSNR on {len(scores)} held-out images: {np.mean(scores):.2f} dB")


@click.command("train-recognizer")
@manifest_option
@click.pass_obj
def train_recognizer_command(invocation, manifest):
    """
    Train the CTC recognizer on HR images and labels
    """

    # Labels are checked against the configured alphabet
    alphabet = Alphabet.from_config(invocation.config)
    train, held_out = invocation.corpus(manifest)

    recognizer, history = train_recognizer(
        train, alphabet, invocation.config, invocation.seed, invocation.device, progress=True
    )

    save_checkpoint(
        invocation.output("recognizer.pt"),
        "recognizer",
        invocation.config,
        {"recognizer": recognizer},
        {"history": history, "seed": invocation.seed},
    )

    # Held-out accuracy on HR images
    if held_out:
        reader = RecognizerReader(recognizer.cpu(), alphabet)
        preds = reader.read(torch.stack([sample.hr for sample in held_out]))
        accuracy = recognition_accuracy(preds, [sample.label for sample in held_out])
        click.echo(f"recognizer accuracy on {len(held_out)} held-out HR images: {100 * accuracy:.1f}%")


@click.command("train-diffusion")
@manifest_option
@click.pass_obj
def train_diffusion_command(invocation, manifest):
    """
    Train the guided U-Net and fine-tune the guidance recognizer
    Needs codec.pt and recognizer.pt in the checkpoint directory
    """

    # Pre-trained parts: frozen codec, recognizer to fine-tune
    config = invocation.config
    codec = load_codec(invocation)
    recognizer, _ = load_recognizer(invocation)

    # Fresh U-Net, seeded initialization
    with seeded(invocation.seed):
        unet = GuidedUNet(config.unet_config())

    schedule = build_schedule(config.schedule, config.T, config.beta_start, config.beta_end)
    trainer = DiffusionTrainer(unet, recognizer, codec, schedule, config, invocation.device, invocation.seed)

    train, _ = invocation.corpus(manifest)

    # Epoch snapshots go next to the final checkpoint
    history = train_diffusion(
        trainer,
        train,
        config,
        seed=invocation.seed,
        checkpoint_dir=invocation.checkpoint_dir,
        progress=True,
    )

    # Final weights and the loss history
    save_diffusion(invocation.output("diffusion.pt"), trainer, config, {"epoch": config.epochs, "seed": invocation.seed})

    write_history_csv(
        invocation.output("diffusion-loss.csv"),
        ["epoch", "loss_dm", "loss_recog", "total"],
        [
            (record["epoch"], f"{record['loss_dm']:.6f}", f"{record['loss_recog']:.6f}", f"{record['total']:.6f}")
            for record in history
        ],
    )

    click.echo(f"trained {config.epochs} epochs, final loss_dm {history[-1]['loss_dm']:.5f}")


training_commands = [train_codec_command, train_recognizer_command, train_diffusion_command]
