"""
Text recognizer producing the recognition guidance
A compact convolutional-recurrent model with a CTC head:
every one of the max_len frames holds a distribution over blank + characters.
"""

import re
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from textsr.models.unet import group_norm


BLANK = "~"


@dataclass(frozen=True)
class Alphabet:
    """
    Ordered character set; index 0 is the CTC blank
    Labels are matched case-insensitively.
    """

    characters: str = "0123456789abcdefghijklmnopqrstuvwxyz"

    @classmethod
    def from_config(cls, config):
        return cls(config.alphabet)

    @property
    def symbols(self):
        return [BLANK] + list(self.characters)

    def __len__(self):
        return len(self.characters) + 1

    def encode(self, text):
        """
        Maps a label to class indices (1-based, blank excluded)
        Raises ValueError naming the first character outside the alphabet
        """

        indices = []

        for character in text.lower():
            position = self.characters.find(character)

            if position < 0:
                raise ValueError(f"label {text!r}: character {character!r} is not in the alphabet")

            indices.append(position + 1)

        return indices

    def collapse(self, indices):
        """
        CTC greedy collapse: merge repeats, then drop blanks
        """

        characters = []
        previous = None

        for index in indices:
            if index != previous and index != 0:
                characters.append(self.characters[index - 1])

            previous = index

        return "".join(characters)


def normalize_label(text):
    """
    Case-folds and drops everything outside [0-9a-z]
    """

    return re.sub(r"[^0-9a-z]", "", text.lower())


class Recognizer(nn.Module):
    """
    CRNN-style recognizer

    Inputs of any size are resized (bicubic) to input_size first,
    so LR and HR images share one network.
    """

    def __init__(self, alphabet_size, max_len=32, channels=64, hidden=128, input_size=(32, 128)):
        super().__init__()
        self.alphabet_size = alphabet_size
        self.max_len = max_len
        self.input_size = tuple(input_size)

        def conv(in_channels, out_channels):
            return [
                nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1),
                group_norm(out_channels),
                nn.ReLU(inplace=True),
            ]

        # Convolution stack, height pooled to 1 and width to max_len frames
        # 32x128 -> 16x64 -> 8x32 -> 4x32 -> 2x32
        self.features = nn.Sequential(
            *conv(3, channels),
            nn.MaxPool2d(2),
            *conv(channels, channels * 2),
            nn.MaxPool2d(2),
            *conv(channels * 2, channels * 4),
            *conv(channels * 4, channels * 4),
            nn.MaxPool2d((2, 1)),
            *conv(channels * 4, channels * 4),
            nn.MaxPool2d((2, 1)),
            nn.AdaptiveAvgPool2d((1, max_len)),
        )

        # Bidirectional context over frames, then per-frame class scores
        self.rnn = nn.LSTM(channels * 4, hidden, num_layers=2, bidirectional=True, batch_first=True)
        self.classifier = nn.Linear(hidden * 2, alphabet_size)

    @classmethod
    def from_config(cls, config):
        return cls(
            alphabet_size=len(config.alphabet) + 1,
            max_len=config.max_len,
            channels=config.recognizer_channels,
            hidden=config.recognizer_hidden,
        )

    def logits(self, x):
        """
        Returns per-frame class scores (B, L, |A|)
        """

        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected images (B, 3, H, W), got {tuple(x.shape)}")

        # Resize to the recognizer input
        if tuple(x.shape[-2:]) != self.input_size:
            x = F.interpolate(x, size=self.input_size, mode="bicubic", align_corners=False)

        # Column features become a max_len frame sequence
        features = self.features(x).squeeze(2)
        sequence, _ = self.rnn(features.transpose(1, 2))

        return self.classifier(sequence)

    def forward(self, x):
        """
        Recognition guidance: softmax probabilities (B, L, |A|)
        """

        return torch.softmax(self.logits(x), dim=-1)


def guidance_distance(first, second):
    """
    L1 distance summed over (L, |A|) and averaged over the batch
    """

    if first.shape != second.shape:
        raise ValueError(f"guidance shapes differ: {tuple(first.shape)} vs {tuple(second.shape)}")

    return (first - second).abs().sum(dim=(1, 2)).mean()


def recog_loss(recognizer, x_lr, x_hr):
    """
    Fine-tuning loss ||R(x_LR) - R(x_HR)||_1
    """

    if x_lr.shape[0] != x_hr.shape[0]:
        raise ValueError(f"batch mismatch: {x_lr.shape[0]} LR vs {x_hr.shape[0]} HR images")

    return guidance_distance(recognizer(x_lr), recognizer(x_hr))


def decode_text(c_rg, alphabet):
    """
    Greedy CTC decoding of a guidance batch into one string per item
    """

    best = c_rg.argmax(dim=-1).tolist()

    return [alphabet.collapse(row) for row in best]


def ctc_loss(recognizer, images, labels, alphabet):
    """
    CTC loss of a labeled batch
    """

    # Encode labels; each must fit in the available frames
    targets = [alphabet.encode(label) for label in labels]

    for label, target in zip(labels, targets):
        if len(target) > recognizer.max_len:
            raise ValueError(f"label {label!r} is longer than max_len={recognizer.max_len}")

    # F.ctc_loss expects (frames, batch, classes)
    log_probs = recognizer.logits(images).log_softmax(dim=-1).transpose(0, 1)
    frames = log_probs.shape[0]

    # Concatenated targets with per-sample lengths
    flat_targets = torch.tensor([index for target in targets for index in target], dtype=torch.long)
    input_lengths = torch.full((len(targets),), frames, dtype=torch.long)
    target_lengths = torch.tensor([len(target) for target in targets], dtype=torch.long)

    return F.ctc_loss(
        log_probs,
        flat_targets.to(images.device),
        input_lengths,
        target_lengths,
        blank=0,
        zero_infinity=True,
    )


class RecognizerReader:
    """
    Adapts a recognizer to the evaluation reader interface: images -> strings
    """

    def __init__(self, recognizer, alphabet):
        self.recognizer = recognizer.eval()
        self.alphabet = alphabet

    @torch.no_grad()
    def read(self, images):
        return decode_text(self.recognizer(images), self.alphabet)
