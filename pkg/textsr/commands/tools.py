"""
Tool commands
sample, eval, synth, inspect-schedule, count-params and recognize
"""

import csv
import io
import logging
from dataclasses import replace
from pathlib import Path

import click
import torch
from PIL import Image

from textsr.commands.training import load_recognizer
from textsr.config import Settings
from textsr.models.recognizer import Alphabet, RecognizerReader
from textsr.models.unet import parameter_count
from textsr.services.data import DegradationConfig, generate_synthetic, image_to_tensor, load_manifest, save_manifest, tensor_to_image
from textsr.services.diffusion import build_schedule
from textsr.services.inference import SuperResolver, bicubic_upsample
from textsr.services.metrics import evaluate, format_report, write_report_csv


logger = logging.getLogger(__name__)


def read_image(path):
    with Image.open(path) as image:
        return image_to_tensor(image)


@click.command("sample")
@click.argument("images", nargs=-1, type=click.Path(exists=True, dir_okay=False))
@click.option("--manifest", type=click.Path(dir_okay=False), default=None, help="Super-resolve the LR side of a manifest.")
@click.option("--limit", type=int, default=None, help="Use at most this many manifest records.")
@click.option("--checkpoint", default="diffusion.pt", show_default=True, help="Diffusion checkpoint name.")
@click.option("--sampler", type=click.Choice(["ddim", "ddpm"]), default=None)
@click.option("--steps", type=int, default=None)
@click.option("--eta", type=float, default=None)
@click.option("--output-dir", default="samples", show_default=True, help="Subdirectory of the checkpoint directory.")
@click.pass_obj
def sample_command(invocation, images, manifest, limit, checkpoint, sampler, steps, eta, output_dir):
    """
    Super-resolve LR images and write the SR images as PNG
    """

    # Collect named LR images
    inputs = [(Path(path).stem, read_image(path)) for path in images]

    if manifest:
        records = load_manifest(manifest, standardize=True)[:limit]
        inputs += [(sample.sample_id, sample.lr) for sample in records]

    if not inputs:
        raise click.UsageError("give LR image paths or --manifest")

    resolver = SuperResolver.from_checkpoints(invocation.checkpoint_dir, invocation.device, checkpoint)
    directory = invocation.output(output_dir)
    directory.mkdir(parents=True, exist_ok=True)

    # Each image is sampled with the run seed, independent of its neighbours
    for name, lr in inputs:
        sr = resolver.super_resolve(lr, sampler=sampler, steps=steps, eta=eta, seed=invocation.seed)
        tensor_to_image(sr).save(directory / f"sr-{name}.png")

    click.echo(f"wrote {len(inputs)} SR images to {directory}")


@click.command("eval")
@click.option("--manifest", type=click.Path(dir_okay=False), default=None,
              help="Evaluation manifest; the held-out synthetic split is used when omitted.")
@click.option("--checkpoint", default="diffusion.pt", show_default=True, help="Diffusion checkpoint or epoch snapshot.")
@click.option("--limit", type=int, default=None, help="Evaluate at most this many samples.")
@click.option("--batch-size", type=int, default=32, show_default=True)
@click.pass_obj
def eval_command(invocation, manifest, checkpoint, limit, batch_size):
    """
    Report accuracy, PSNR and SSIM for bicubic, SR and HR
    """

    if manifest:
        samples = load_manifest(manifest, standardize=True)
    else:
        _, samples = invocation.corpus()

    samples = samples[:limit]

    if not samples:
        raise ValueError("cannot evaluate an empty dataset")

    # SR models plus the pre-trained recognizer as the text reader
    resolver = SuperResolver.from_checkpoints(invocation.checkpoint_dir, invocation.device, checkpoint)
    recognizer, alphabet = load_recognizer(invocation)
    reader = RecognizerReader(recognizer.to(invocation.device), alphabet)
    device = invocation.device

    def stack(chunk, side):
        return torch.stack([getattr(sample, side) for sample in chunk]).to(device)

    # Method name, batch upscaler, whether PSNR/SSIM apply
    methods = [
        ("bicubic", lambda chunk: bicubic_upsample(stack(chunk, "lr")), True),
        ("sr", lambda chunk: resolver.super_resolve(stack(chunk, "lr"), seed=invocation.seed), True),
        ("hr", lambda chunk: stack(chunk, "hr"), False),
    ]

    reports = []

    for method, upscale, fidelity in methods:
        report = evaluate(samples, upscale, reader, method, batch_size=batch_size, fidelity=fidelity)
        write_report_csv(report, invocation.output(f"eval-{method}.csv"))
        reports.append(report)

    click.echo(format_report(reports))


@click.command("synth")
@click.option("--count", type=int, default=None, help="Number of samples (default: synth_count).")
@click.option("--output-dir", default="synthetic", show_default=True, help="Subdirectory of the checkpoint directory.")
@click.pass_obj
def synth_command(invocation, count, output_dir):
    """
    Write a synthetic corpus as PNG pairs plus manifest.jsonl
    The corpus is seeded with data_seed.
    """

    config = invocation.config

    samples = generate_synthetic(
        count or config.synth_count,
        Alphabet.from_config(config),
        length_range=(config.min_length, config.max_length),
        degradation=DegradationConfig.from_config(config),
        seed=config.data_seed,
        font_path=Settings.FONT_PATH,
    )

    manifest_path = save_manifest(samples, invocation.output(output_dir))
    click.echo(f"wrote {len(samples)} samples to {manifest_path}")


@click.command("inspect-schedule")
@click.option("--output", default=None, help="Also write the CSV to this file under the checkpoint directory.")
@click.pass_obj
def inspect_schedule_command(invocation, output):
    """
    Print the noise schedule as CSV: t,beta,alpha,alpha_bar,beta_tilde
    """

    config = invocation.config
    schedule = build_schedule(config.schedule, config.T, config.beta_start, config.beta_end)

    # repr keeps every float exact
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["t", "beta", "alpha", "alpha_bar", "beta_tilde"])

    for t, beta, alpha, alpha_bar, beta_tilde in schedule.rows():
        writer.writerow([t, repr(beta), repr(alpha), repr(alpha_bar), repr(beta_tilde)])

    text = buffer.getvalue()
    click.echo(text, nl=False)

    if output:
        invocation.output(output).write_text(text, encoding="utf-8")


@click.command("count-params")
@click.pass_obj
def count_params_command(invocation):
    """
    Parameter ledger for the guidance placements and the light variant
    """

    # Count every guidance placement of interest
    base = invocation.config.unet_config()
    variants = [frozenset(), frozenset({1, 2}), frozenset({3, 4}), frozenset({1, 2, 3, 4})]
    counts = {}

    for block_ids in variants:
        counts[block_ids] = parameter_count(replace(base, rg_block_ids=block_ids))

    plain = counts[frozenset()]

    click.echo("rg_block_ids | parameters | delta")

    for block_ids in variants:
        label = ",".join(str(block_id) for block_id in sorted(block_ids)) or "none"
        click.echo(f"{label:>12} | {counts[block_ids]:>10} | {counts[block_ids] - plain:>10}")

    # Guidance deltas of disjoint block sets add up exactly
    delta_low = counts[frozenset({1, 2})] - plain
    delta_high = counts[frozenset({3, 4})] - plain
    delta_full = counts[frozenset({1, 2, 3, 4})] - plain
    additive = delta_full == delta_low + delta_high

    click.echo(f"additivity: {delta_full} == {delta_low} + {delta_high}: {'ok' if additive else 'FAILED'}")

    # Share of parameters the shallow-only variant drops
    full = counts[frozenset({1, 2, 3, 4})]
    saving = 100 * (full - counts[frozenset({1, 2})]) / full
    click.echo(f"light variant (1,2) saves {saving:.1f}% of the fully guided network")

    if not additive:
        raise RuntimeError("parameter deltas are not additive")


@click.command("recognize")
@click.argument("images", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.pass_obj
def recognize_command(invocation, images):
    """
    Print the recognizer's reading of each image
    """

    recognizer, alphabet = load_recognizer(invocation)
    reader = RecognizerReader(recognizer, alphabet)

    # One line per image: path, tab, text
    for path in images:
        text = reader.read(read_image(path)[None])[0]
        click.echo(f"{path}\t{text}")


tool_commands = [
    sample_command,
    eval_command,
    synth_command,
    inspect_schedule_command,
    count_params_command,
    recognize_command,
]
