import numpy as np
import pytest

from graphshield import attacks, behavior, graphdata, nncore


@pytest.fixture(scope="session")
def small_task():
    """A trained 64->32->2 sigmoid target on the blob task, plus its data."""
    net = nncore.init_network([64, 32, 2], ["sigmoid", "sigmoid"], seed=7)
    extractor = nncore.FeatureExtractor.downsample(16, 2)
    data = nncore.gen_synthetic_data(16, 120, 0.1, seed=11)
    train, test = nncore.stratified_split(data, 0.7, seed=13)
    trained, report = nncore.train_target(
        net,
        extractor,
        train,
        nncore.TargetTrainConfig(learning_rate=0.5, batch_size=16, epochs=150, seed=17),
        test_data=test,
    )
    return {
        "net": trained,
        "extractor": extractor,
        "train": train,
        "test": test,
        "report": report,
    }


@pytest.fixture(scope="session")
def fgsm_pairs(small_task):
    spec = attacks.AttackSpec(kind="FGSM", epsilon=0.1)
    return attacks.build_pair_set(
        small_task["net"], small_task["extractor"], small_task["test"], spec
    )


@pytest.fixture(scope="session")
def spec_table(small_task):
    return behavior.fit_specialization(
        small_task["net"], small_task["extractor"], small_task["train"], k=10
    )


@pytest.fixture(scope="session")
def graph_dataset(small_task, fgsm_pairs, spec_table):
    return graphdata.build_dataset(
        small_task["net"],
        small_task["extractor"],
        fgsm_pairs,
        spec_table,
        behavior.AttributeParams(),
    )


def random_behavior_graph(rng, max_layers=4, max_width=6):
    """Random nonnegative-activation graph for property tests."""
    sizes = [int(rng.integers(1, max_width + 1)) for _ in range(rng.integers(2, max_layers + 1))]
    activations = []
    for size in sizes:
        vec = rng.uniform(0.0, 1.0, size)
        vec[rng.random(size) < 0.3] = 0.0  # sprinkle dead neurons
        activations.append(vec)
    return behavior.BehaviorGraph(sizes, activations)
