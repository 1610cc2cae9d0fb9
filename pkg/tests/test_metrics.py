import csv
import math

import numpy as np
import pytest
import torch
from numpy.lib.stride_tricks import sliding_window_view

from textsr.services.data import PairedSample
from textsr.services.metrics import (
    EvalReport,
    EvalRow,
    evaluate,
    format_report,
    psnr,
    recognition_accuracy,
    ssim,
    write_report_csv,
)


def psnr_oracle(a, b):
    mse = np.mean(((a + 1) / 2 - (b + 1) / 2) ** 2)

    return 10 * math.log10(1 / mse)


def ssim_oracle(a, b):
    """
    Naive SSIM over every 11x11 window fully inside the image
    Inputs are grayscale arrays in [0, 1]
    """

    offsets = np.arange(-5, 6)
    gauss = np.exp(-offsets ** 2 / (2 * 1.5 ** 2))
    gauss = gauss / gauss.sum()
    weights = np.outer(gauss, gauss)

    c1 = 0.01 ** 2
    c2 = 0.03 ** 2
    windows_a = sliding_window_view(a, (11, 11))
    windows_b = sliding_window_view(b, (11, 11))

    mu_a = (windows_a * weights).sum(axis=(-2, -1))
    mu_b = (windows_b * weights).sum(axis=(-2, -1))
    var_a = (windows_a ** 2 * weights).sum(axis=(-2, -1)) - mu_a ** 2
    var_b = (windows_b ** 2 * weights).sum(axis=(-2, -1)) - mu_b ** 2
    cov = (windows_a * windows_b * weights).sum(axis=(-2, -1)) - mu_a * mu_b

    index = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))

    return float(index.mean())


class SampleReader:
    """
    Reads every image as the label of the sample it came from
    """

    def __init__(self, answers):
        self.answers = list(answers)

    def read(self, images):
        answers = self.answers[:len(images)]
        self.answers = self.answers[len(images):]

        return answers


def make_samples(difficulties):
    generator = torch.Generator().manual_seed(0)

    return [
        PairedSample(
            lr=torch.rand(3, 8, 8, generator=generator) * 2 - 1,
            hr=torch.rand(3, 16, 16, generator=generator) * 2 - 1,
            label=f"w{index}",
            difficulty=difficulty,
            sample_id=str(index),
        )
        for index, difficulty in enumerate(difficulties)
    ]


class TestPsnr:
    def test_identical_images_are_capped(self):
        image = torch.rand(3, 8, 8)

        assert psnr(image, image) == 100.0

    def test_full_range_difference(self):
        assert psnr(-torch.ones(3, 4, 4), torch.ones(3, 4, 4)) == 0.0

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(0)

        for _ in range(1000):
            a = rng.uniform(-1, 1, size=(8, 8))
            b = rng.uniform(-1, 1, size=(8, 8))

            assert abs(psnr(a, b) - psnr_oracle(a, b)) < 1e-9
            assert psnr(a, b) == psnr(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            psnr(torch.zeros(3, 4, 4), torch.zeros(3, 4, 5))


class TestSsim:
    def test_identical_images(self):
        image = torch.rand(3, 32, 128) * 2 - 1

        assert ssim(image, image) == pytest.approx(1.0, abs=1e-12)

    def test_anti_correlated_structure_is_negative(self):
        rng = np.random.default_rng(1)
        image = rng.normal(scale=0.3, size=(32, 32))
        image = np.clip(image - image.mean(), -1, 1)

        assert ssim(image, -image) < 0

    def test_matches_window_oracle(self):
        rng = np.random.default_rng(2)

        for _ in range(20):
            a = rng.uniform(-1, 1, size=(32, 128))
            b = np.clip(a + rng.normal(scale=0.3, size=a.shape), -1, 1)

            assert abs(ssim(a, b) - ssim_oracle((a + 1) / 2, (b + 1) / 2)) < 1e-6
            assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    @pytest.mark.slow
    def test_matches_window_oracle_on_many_cases(self):
        rng = np.random.default_rng(3)

        for _ in range(1000):
            height, width = rng.integers(11, 48, size=2)
            a = rng.uniform(-1, 1, size=(height, width))
            b = np.clip(a + rng.normal(scale=rng.uniform(0.01, 1.0), size=a.shape), -1, 1)

            assert abs(ssim(a, b) - ssim_oracle((a + 1) / 2, (b + 1) / 2)) < 1e-6

    def test_image_smaller_than_window(self):
        with pytest.raises(ValueError, match="window"):
            ssim(torch.zeros(3, 8, 32), torch.zeros(3, 8, 32))


class TestRecognitionAccuracy:
    def test_half_correct(self):
        assert recognition_accuracy(["hello", "cat"], ["hello", "dog"]) == 0.5

    def test_normalization(self):
        assert recognition_accuracy(["Hello!"], ["hello"]) == 1.0

    def test_permutation_invariance(self):
        preds = ["a", "b", "c", "d"]
        gts = ["a", "x", "c", "y"]

        assert recognition_accuracy(preds[::-1], gts[::-1]) == recognition_accuracy(preds, gts)

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length mismatch"):
            recognition_accuracy(["a"], ["a", "b"])


class TestEvaluate:
    def test_empty_dataset(self):
        with pytest.raises(ValueError, match="empty"):
            evaluate([], lambda chunk: None, SampleReader([]), "sr")

    def test_average_is_weighted_mean(self, tmp_path):
        samples = make_samples(["easy"] * 3 + ["medium"] * 2 + ["hard"])
        answers = ["w0", "w1", "bad", "w3", "bad", "w5"]
        upscale = lambda chunk: torch.stack([sample.hr for sample in chunk])

        report = evaluate(samples, upscale, SampleReader(answers), "hr", batch_size=4, fidelity=False)
        accuracy = report.accuracy()
        counts = report.split_counts()

        assert counts == {"easy": 3, "medium": 2, "hard": 1}
        assert accuracy["easy"] == pytest.approx(2 / 3)
        assert accuracy["average"] == pytest.approx(
            sum(accuracy[split] * counts[split] for split in counts) / sum(counts.values())
        )

        # The average can be recomputed from the CSV rows
        path = write_report_csv(report, tmp_path / "eval-hr.csv")

        with path.open(encoding="utf-8") as handle:
            rows = list(csv.DictReader(handle))

        assert list(rows[0].keys()) == ["id", "split", "psnr", "ssim", "pred", "gt", "match"]
        assert sum(int(row["match"]) for row in rows) / len(rows) == accuracy["average"]

    def test_untagged_dataset_reports_single_split(self, caplog):
        samples = make_samples(["unknown"] * 2)
        upscale = lambda chunk: torch.stack([sample.hr for sample in chunk])

        report = evaluate(samples, upscale, SampleReader(["w0", "w1"]), "hr")

        assert report.split_counts() == {"all": 2}
        assert "single split" in caplog.text
        assert report.psnr_mean() == 100.0

    def test_console_table(self):
        report = EvalReport("bicubic", [
            EvalRow("0", "easy", 20.0, 0.5, "a", "a"),
            EvalRow("1", "hard", 22.0, 0.7, "b", "c"),
        ])

        table = format_report([report])

        assert "bicubic" in table
        assert "50.0%" in table
        assert "21.00" in table
        assert "easy=1, hard=1" in table
