"""Shared fixtures: one small traffic world and one small trained model."""

import numpy as np
import pytest

from mpdrive.data import TrafficConfig, TransitionDataset, generate_traffic, split_cars
from mpdrive.dynamics import ModelConfig, train_forward_model
from mpdrive.environment import RoadGeometry


@pytest.fixture(scope="session")
def small_geom():
    return RoadGeometry(road_length_m=160.0)


@pytest.fixture(scope="session")
def small_world(small_geom):
    cars = generate_traffic(small_geom, TrafficConfig(n_cars=40), seed=11)
    splits = split_cars(list(cars), seed=11)
    return {"geom": small_geom, "cars": cars, "splits": splits}


@pytest.fixture(scope="session")
def small_dataset(small_world):
    cars = {c: small_world["cars"][c] for c in small_world["splits"]["train"][:8]}
    return TransitionDataset(cars, small_world["geom"], history=4, unroll=10)


TINY_CFG = ModelConfig(nz=4, channels=(8, 16, 24), strides=(1, 2, 2),
                       lr=2e-3, batch_size=8, phase1_steps=150, phase2_steps=100)


@pytest.fixture(scope="session")
def tiny_onestep_dataset(small_world):
    cars = {c: small_world["cars"][c] for c in small_world["splits"]["train"][:10]}
    return TransitionDataset(cars, small_world["geom"], history=4, unroll=1)


@pytest.fixture(scope="session")
def tiny_model(small_geom, tiny_onestep_dataset):
    model, norm, log = train_forward_model(tiny_onestep_dataset, small_geom,
                                           TINY_CFG, seed=0)
    return {"model": model, "norm": norm, "log": log}
