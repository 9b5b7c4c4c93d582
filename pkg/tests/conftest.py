import os
import time

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

torch.set_num_threads(1)

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ACCEPTANCE_LINES: list = []


def report_line(criterion, ok: bool, detail: str) -> str:
    """Print and remember one acceptance line."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def record(criterion, ok: bool, detail: str) -> None:
    line = report_line(criterion, ok, detail)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def cache_dir(tmp_path_factory):
    """Shared cache for the pretrained denoiser and oracle; MINDVIS_TEST_CACHE reuses one across sessions."""
    path = os.environ.get("MINDVIS_TEST_CACHE")
    return path if path else str(tmp_path_factory.mktemp("cache"))


# variant name -> dotted overrides
DESK_VARIANTS = {
    "full": {},
    "no_stage_a": {"trainer.use_pretraining": False},
    "cond_c": {"conditioning.cond_mode": "c"},
}
DESK_SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def desk_runs(cache_dir):
    """Every desk pipeline run the acceptance criteria need, run once per session.

    Returns {"runs": {(variant, seed): PipelineResult}, "wall": {variant: seconds}}.
    The full-model seeds run first so their wall time includes the one-off
    denoiser and oracle pretraining.
    """
    from mindvis.config import RunConfig
    from mindvis.pipeline import run_pipeline

    runs, wall = {}, {}
    for variant, overrides in DESK_VARIANTS.items():
        t0 = time.time()
        for seed in DESK_SEEDS:
            cfg = RunConfig(seed=seed)
            if overrides:
                cfg = cfg.replace(**overrides)
            result = run_pipeline(cfg, cache_dir)
            if (variant, seed) != ("full", 0):
                result.model = None  # keep the session light
            runs[variant, seed] = result
        wall[variant] = time.time() - t0
    return {"runs": runs, "wall": wall}


# a pipeline small enough to drive through the CLI in seconds
TINY_CONFIG = {
    "data": {"class_count": 4, "samples_per_class": 5, "voxel_count": 64, "unpaired_per_class": 2, "image_size": 8},
    "conditioning": {"M": 2, "channels": [8, 16], "time_dim": 16, "context_dim": 16},
    "diffusion": {"T": 50, "steps": 5,
                  "codec": {"kind": "downsample", "image_size": 8, "shift": 0.485, "scale": 5.26},
                  "pretrain": {"corpus_classes": 4, "corpus_repeats": 1,
                               "optimizer": {"max_epochs": 2, "warmup_epochs": 1}}},
    "trainer": {"stage_a": {"max_epochs": 2, "warmup_epochs": 1}, "stage_b": {"max_epochs": 2, "warmup_epochs": 1}},
    "eval": {"n_way": 4, "trials": 10, "samplings": 2, "oracle_epochs": 2},
}

CLI_CHAIN = ("synth-data", "pretrain", "finetune", "sample", "evaluate")


def run_cli_chain(config_path, out, cache, *extra):
    """Run every pipeline command in order; returns the exit codes."""
    from mindvis.cli import main

    return [main([cmd, "--config", str(config_path), "--out", str(out), "--cache", str(cache), *extra])
            for cmd in CLI_CHAIN]


@pytest.fixture(scope="session")
def tiny_config_path(tmp_path_factory):
    import json

    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY_CONFIG))
    return path
