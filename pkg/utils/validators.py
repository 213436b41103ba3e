import argparse

from services.benchmark import SETUPS
from services.feature_pipeline import HYPERPIXEL_PRESETS
from services.matchers import MATCHERS
from services.tensor_core import GridShape
from utils.errors import ShapeError


def parse_ks(text):
    """'1,3,5' -> [1, 3, 5]; argparse reports failures as usage errors"""
    try:
        ks = sorted(int(part) for part in text.split(',') if part.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"--k expects comma-separated integers, got {text!r}")
    if not ks or ks[0] < 0:
        raise argparse.ArgumentTypeError(f"--k expects non-negative integers, got {text!r}")
    return ks


def parse_ints(text):
    try:
        return [int(part) for part in text.split(',') if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def validate_run_config(run):
    """Check a RunConfig before any work starts; returns (ok, error message)"""
    if run.matcher not in MATCHERS:
        return False, f"unknown matcher {run.matcher!r}; known: {', '.join(MATCHERS)}"

    if run.setup not in SETUPS:
        return False, f"unknown setup {run.setup!r}; known: {', '.join(SETUPS)}"

    try:
        GridShape.parse(run.resolved_grid())
    except ShapeError as e:
        return False, e.message

    if run.temperature <= 0:
        return False, f"temperature must be positive, got {run.temperature}"
    if run.alpha <= 0:
        return False, f"alpha must be positive, got {run.alpha}"
    if not run.ks or min(run.ks) < 0:
        return False, f"ks must be non-negative integers, got {run.ks}"
    if run.jobs < 1:
        return False, f"jobs must be >= 1, got {run.jobs}"
    if run.min_shared < 1:
        return False, f"min_shared must be >= 1, got {run.min_shared}"
    if run.interpolation not in ('trilinear', 'nearest'):
        return False, f"interpolation must be trilinear or nearest, got {run.interpolation!r}"
    if run.hyperpixel and run.hyperpixel not in HYPERPIXEL_PRESETS:
        return False, f"unknown hyperpixel preset {run.hyperpixel!r}"

    return True, None
