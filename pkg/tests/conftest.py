import numpy as np
import pytest

from tactile_fewshot.dataset import ClosedSet, ForceSpeed, make_split
from tactile_fewshot.evaluation import dataset_features, pretrain_on_split, protocol_splits
from tactile_fewshot.featopt import PretrainConfig
from tactile_fewshot.synth import SynthConfig, synth_dataset


@pytest.fixture(scope="session")
def default_dataset():
    """Default synthetic benchmark: 36 classes x 60 trials, seed 0."""
    return synth_dataset(SynthConfig(seed=0))


@pytest.fixture(scope="session")
def default_features(default_dataset):
    return dataset_features(default_dataset)


@pytest.fixture(scope="session")
def closed_split(default_dataset):
    return make_split(default_dataset, ClosedSet(), 0)


@pytest.fixture(scope="session")
def closed_model(default_dataset, default_features, closed_split):
    return pretrain_on_split(default_features, default_dataset.labels(), closed_split, PretrainConfig())


FAMILIES = ("closed-set", "cross-shape", "cross-material")


@pytest.fixture(scope="session")
def family_models(default_dataset, closed_split, closed_model):
    """``get(seed) -> (dataset, {family: [(split, model), ...]})``, computed once per seed.

    Dataset and split seeds are both ``seed``; seed 0 reuses the default
    dataset and closed-set model.
    """
    cache = {}

    def get(seed):
        if seed not in cache:
            ds = default_dataset if seed == 0 else synth_dataset(SynthConfig(seed=seed))
            X, y = dataset_features(ds), ds.labels()
            out = {}
            for fam in FAMILIES:
                out[fam] = []
                for proto in protocol_splits(fam):
                    if seed == 0 and fam == "closed-set":
                        out[fam].append((closed_split, closed_model))
                        continue
                    split = make_split(ds, proto, seed)
                    out[fam].append((split, pretrain_on_split(X, y, split, PretrainConfig())))
            cache[seed] = (ds, out)
        return cache[seed]

    return get


@pytest.fixture(scope="session")
def force_speed_setup():
    """Seed-0 benchmark with perturbed trials, its force/speed split and model."""
    ds = synth_dataset(SynthConfig(seed=0, perturbed_trials_per_cell=3))
    split = make_split(ds, ForceSpeed(), 0)
    return ds, split, pretrain_on_split(dataset_features(ds), ds.labels(), split, PretrainConfig())


@pytest.fixture(scope="session")
def small_dataset():
    """36 classes x 4 trials with short windows; fast enough for unit tests."""
    return synth_dataset(SynthConfig(seed=3, trials_per_class=4, window_s=0.256))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, collected from ``record_property``."""
    lines = []
    for status in ("passed", "failed"):
        for rep in terminalreporter.stats.get(status, []):
            if rep.when != "call":
                continue
            props = dict(rep.user_properties)
            if "criterion" in props:
                lines.append((props["criterion"], "PASS" if status == "passed" else "FAIL", props.get("detail", "")))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for num, verdict, detail in sorted(lines, key=lambda t: t[0]):
        terminalreporter.write_line(f"[{verdict}] criterion {num:2d}: {detail}")
