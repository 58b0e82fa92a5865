"""Shared fixtures: systems, datasets, and the frozen reference basis."""

import numpy as np
import pytest

import kooplift as kl


@pytest.fixture(scope="session")
def poly_system():
    return kl.example_poly()


@pytest.fixture(scope="session")
def poly_snapshots(poly_system):
    plan = kl.ExperimentPlan(num_experiments=200, steps_per_experiment=10,
                             rng_seed=11)
    return kl.run_experiments(poly_system, plan)


@pytest.fixture(scope="session")
def poly_augmented(poly_snapshots):
    return kl.to_augmented(poly_snapshots)


@pytest.fixture(scope="session")
def poly_basis():
    return kl.example_poly_normal_basis()
