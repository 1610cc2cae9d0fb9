"""
Data service
Paired LR/HR manifests, the synthetic text-image generator and batch loaders
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw, ImageFont
from torch.utils.data import DataLoader, Dataset

from textsr.models.recognizer import Alphabet


logger = logging.getLogger(__name__)

DIFFICULTIES = ("easy", "medium", "hard", "unknown")

# Standard sizes as (height, width)
LR_SIZE = (16, 64)
HR_SIZE = (32, 128)


@dataclass
class PairedSample:
    """
    One LR/HR pair

    lr, hr - float tensors (3, H, W) in [-1, 1], hr twice the size of lr
    label - ground-truth text
    difficulty - easy, medium, hard or unknown
    """

    lr: torch.Tensor
    hr: torch.Tensor
    label: str
    difficulty: str = "unknown"
    sample_id: str = ""

    def __post_init__(self):
        lr_size = tuple(self.lr.shape[-2:])
        hr_size = tuple(self.hr.shape[-2:])

        if hr_size != (2 * lr_size[0], 2 * lr_size[1]):
            raise ValueError(f"scale mismatch: lr {lr_size} vs hr {hr_size} (need exactly 2x)")

        if self.difficulty not in DIFFICULTIES:
            raise ValueError(f"unknown difficulty {self.difficulty!r}")


@dataclass(frozen=True)
class DegradationConfig:
    """
    LR degradation: Gaussian blur with sigma drawn from [sigma_min, sigma_max],
    2x box downsample, additive Gaussian noise
    """

    sigma_min: float = 0.0
    sigma_max: float = 1.6
    noise_std: float = 0.02

    @classmethod
    def from_config(cls, config):
        return cls(config.blur_sigma_min, config.blur_sigma_max, config.noise_std)

    def validate(self):
        if not 0 <= self.sigma_min <= self.sigma_max:
            raise ValueError(f"need 0 <= sigma_min <= sigma_max, got {self.sigma_min}, {self.sigma_max}")

        if self.noise_std < 0:
            raise ValueError(f"noise_std must be non-negative, got {self.noise_std}")

        return self

    def difficulty(self, sigma):
        """
        Tags a sample by the tercile of its blur sigma within the range
        """

        span = self.sigma_max - self.sigma_min

        if span <= 0:
            return "easy"

        position = (sigma - self.sigma_min) / span

        if position < 1 / 3:
            return "easy"

        if position < 2 / 3:
            return "medium"

        return "hard"


def image_to_tensor(image):
    """
    PIL image -> float tensor (3, H, W) mapped linearly from [0, 255] to [-1, 1]
    """

    array = np.asarray(image.convert("RGB"), dtype=np.float32)

    return torch.from_numpy(array / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def tensor_to_image(tensor):
    """
    Float tensor (3, H, W) in [-1, 1] -> 8-bit PIL image
    """

    array = ((tensor.detach().cpu().clamp(-1.0, 1.0) + 1.0) * 127.5).round().to(torch.uint8)

    return Image.fromarray(array.permute(1, 2, 0).numpy(), mode="RGB")


def load_manifest(path, standardize=False):
    """
    Loads paired samples from a JSON-lines manifest

    Parameters:
    path - manifest file; each line holds lr_path, hr_path, label, difficulty
           (image paths are relative to the manifest directory)
    standardize - resize LR to 16x64 and HR to 32x128 before validation

    Returns list of PairedSample
    """

    path = Path(path)

    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")

    samples = []

    for index, line in enumerate(path.read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue

        # Parse and check the record fields
        try:
            record = json.loads(line)
        except json.JSONDecodeError as error:
            raise ValueError(f"record {index}: malformed JSON ({error.msg})") from error

        if not isinstance(record, dict) or "lr_path" not in record or "hr_path" not in record:
            raise ValueError(f"record {index}: lr_path and hr_path are required")

        images = []

        for key in ("lr_path", "hr_path"):
            image_path = path.parent / record[key]

            if not image_path.is_file():
                raise FileNotFoundError(f"record {index}: {key} {image_path} does not exist")

            with Image.open(image_path) as image:
                images.append(image.convert("RGB"))

        lr_image, hr_image = images

        if standardize:
            lr_image = lr_image.resize((LR_SIZE[1], LR_SIZE[0]), Image.BICUBIC)
            hr_image = hr_image.resize((HR_SIZE[1], HR_SIZE[0]), Image.BICUBIC)

        try:
            sample = PairedSample(
                lr=image_to_tensor(lr_image),
                hr=image_to_tensor(hr_image),
                label=str(record.get("label", "")),
                difficulty=record.get("difficulty") or "unknown",
                sample_id=str(record.get("id", index)),
            )
        except ValueError as error:
            raise ValueError(f"record {index}: {error}") from error

        samples.append(sample)

    if not samples:
        logger.warning("manifest %s holds no records", path)
    else:
        logger.info("loaded %d samples from %s", len(samples), path)

    return samples


def save_manifest(samples, directory, name="manifest.jsonl"):
    """
    Writes samples as PNG pairs plus a JSON-lines manifest
    Returns the manifest path
    """

    directory = Path(directory)
    (directory / "lr").mkdir(parents=True, exist_ok=True)
    (directory / "hr").mkdir(parents=True, exist_ok=True)

    lines = []

    for index, sample in enumerate(samples):
        sample_id = sample.sample_id or f"{index:05d}"
        lr_path = Path("lr") / f"{sample_id}.png"
        hr_path = Path("hr") / f"{sample_id}.png"

        tensor_to_image(sample.lr).save(directory / lr_path)
        tensor_to_image(sample.hr).save(directory / hr_path)

        lines.append(json.dumps({
            "id": sample_id,
            "lr_path": lr_path.as_posix(),
            "hr_path": hr_path.as_posix(),
            "label": sample.label,
            "difficulty": sample.difficulty,
        }))

    manifest_path = directory / name
    manifest_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    return manifest_path


def gaussian_blur(image, sigma):
    """
    Separable Gaussian blur of a (C, H, W) tensor with reflect padding
    """

    if sigma <= 0:
        return image

    # Normalized 1D kernel truncated at 3 sigma
    radius = max(1, math.ceil(3 * sigma))
    offsets = torch.arange(-radius, radius + 1, dtype=image.dtype)
    kernel = torch.exp(-offsets ** 2 / (2 * sigma ** 2))
    kernel = kernel / kernel.sum()

    channels = image.shape[0]
    batch = image[None]

    # Horizontal pass, then vertical pass
    horizontal = kernel.view(1, 1, 1, -1).repeat(channels, 1, 1, 1)
    batch = F.conv2d(F.pad(batch, (radius, radius, 0, 0), mode="reflect"), horizontal, groups=channels)

    vertical = kernel.view(1, 1, -1, 1).repeat(channels, 1, 1, 1)
    batch = F.conv2d(F.pad(batch, (0, 0, radius, radius), mode="reflect"), vertical, groups=channels)

    return batch[0]


def downsample2x(image):
    """
    Ideal 2x reduction: mean of every 2x2 block
    """

    return F.avg_pool2d(image[None], kernel_size=2)[0]


def degrade(hr, sigma, noise_std, rng):
    """
    Produces an LR image from an HR tensor: blur, 2x downsample, optional noise
    """

    lr = downsample2x(gaussian_blur(hr, sigma))

    # Sensor-like additive noise
    if noise_std > 0:
        noise = rng.normal(0.0, noise_std, size=tuple(lr.shape)).astype(np.float32)
        lr = lr + torch.from_numpy(noise)

    return lr.clamp(-1.0, 1.0)


def load_font(size, font_path=None):
    if font_path:
        return ImageFont.truetype(font_path, size)

    return ImageFont.load_default(size=size)


def render_text(text, rng, font_path=None):
    """
    Renders text onto a 128x32 crop with random colours and a small jitter
    """

    height, width = HR_SIZE

    # Light text on dark background or the other way round
    dark = int(rng.integers(0, 70))
    light = int(rng.integers(185, 256))

    if rng.random() < 0.5:
        background, foreground = (light,) * 3, (dark,) * 3
    else:
        background, foreground = (dark,) * 3, (light,) * 3

    image = Image.new("RGB", (width, height), background)
    draw = ImageDraw.Draw(image)

    # Shrink the font until the text fits the crop
    size = 26
    font = load_font(size, font_path)
    left, top, right, bottom = draw.textbbox((0, 0), text, font=font)

    while (right - left > width - 8 or bottom - top > height - 4) and size > 8:
        size -= 1
        font = load_font(size, font_path)
        left, top, right, bottom = draw.textbbox((0, 0), text, font=font)

    slack_x = max(0, width - (right - left))
    slack_y = max(0, height - (bottom - top))
    x = slack_x // 2 + int(rng.integers(-slack_x // 4, slack_x // 4 + 1)) - left
    y = slack_y // 2 + int(rng.integers(-slack_y // 4, slack_y // 4 + 1)) - top

    draw.text((x, y), text, font=font, fill=foreground)

    return image


def generate_synthetic(n, alphabet, length_range=(3, 8), degradation=None, seed=0, font_path=None):
    """
    Generates a deterministic corpus of rendered text pairs

    Parameters:
    n - number of samples, at least 1
    alphabet - Alphabet the labels are drawn from
    length_range - inclusive (min, max) label length
    degradation - DegradationConfig for the LR side
    seed - seed of every random choice
    font_path - optional TrueType font (default: Pillow's built-in font)

    Returns list of PairedSample
    """

    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")

    min_length, max_length = length_range

    if not 1 <= min_length <= max_length:
        raise ValueError(f"invalid length range {length_range}")

    degradation = (degradation or DegradationConfig()).validate()
    rng = np.random.default_rng(seed)
    characters = list(alphabet.characters)
    samples = []

    # Label, HR rendering, then the degraded LR side
    for index in range(n):
        length = int(rng.integers(min_length, max_length + 1))
        label = "".join(rng.choice(characters, size=length))

        hr = image_to_tensor(render_text(label, rng, font_path))
        sigma = float(rng.uniform(degradation.sigma_min, degradation.sigma_max))
        lr = degrade(hr, sigma, degradation.noise_std, rng)

        samples.append(PairedSample(
            lr=lr,
            hr=hr,
            label=label,
            difficulty=degradation.difficulty(sigma),
            sample_id=f"synth-{index:05d}",
        ))

    logger.info("generated %d synthetic samples (seed=%d)", n, seed)

    return samples


def split_holdout(samples, fraction):
    """
    Splits off the last `fraction` of samples as a held-out set
    """

    if len(samples) < 2:
        return list(samples), []

    # At least one sample on each side
    held_out = min(len(samples) - 1, max(1, round(len(samples) * fraction)))

    return list(samples[:-held_out]), list(samples[-held_out:])


def synthetic_corpus(config, font_path=None):
    """
    Builds the configured synthetic corpus and returns (train, held_out)
    The corpus depends only on config (data_seed), not on the run seed.
    """

    samples = generate_synthetic(
        config.synth_count,
        Alphabet.from_config(config),
        length_range=(config.min_length, config.max_length),
        degradation=DegradationConfig.from_config(config),
        seed=config.data_seed,
        font_path=font_path,
    )

    return split_holdout(samples, config.holdout_fraction)


@dataclass
class PairedBatch:
    """
    Collated batch: stacked images plus label and difficulty lists
    """

    lr: torch.Tensor
    hr: torch.Tensor
    labels: list
    difficulties: list

    def to(self, device):
        return PairedBatch(self.lr.to(device), self.hr.to(device), self.labels, self.difficulties)


class PairedDataset(Dataset):
    def __init__(self, samples):
        self.samples = list(samples)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, index):
        return self.samples[index]


def collate_pairs(samples):
    return PairedBatch(
        lr=torch.stack([sample.lr for sample in samples]),
        hr=torch.stack([sample.hr for sample in samples]),
        labels=[sample.label for sample in samples],
        difficulties=[sample.difficulty for sample in samples],
    )


def make_loader(samples, batch_size, seed=0, epoch=0, shuffle=True, num_workers=0):
    """
    Batch loader whose ordering is a pure function of (seed, epoch)
    """

    generator = torch.Generator().manual_seed(seed * 1_000_003 + epoch)

    return DataLoader(
        PairedDataset(samples),
        batch_size=batch_size,
        shuffle=shuffle,
        generator=generator,
        num_workers=num_workers,
        collate_fn=collate_pairs,
    )
