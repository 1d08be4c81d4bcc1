"""Synthetic benchmark runs: source-only vs few-shot DANN/MDANN on shifted domains."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data.splits import SplitSpec, sample_few_shot, split_source, split_target
from .data.synth import DEFAULT_DOMAINS, ImageSample, generate_domain
from .evaluation import accuracy, domain_probe
from .model import BackboneConfig, ModelParams
from .training import FitResult, TrainConfig, TrainData, fit, predict

logger = logging.getLogger(__name__)


@dataclass
class Benchmark:
    """Source splits plus, per target domain, a few-shot pool and a held-out test set."""

    source_train: list[ImageSample]
    source_val: list[ImageSample]
    source_test: list[ImageSample]
    target_names: list[str]
    target_pools: list[list[ImageSample]]
    target_tests: list[list[ImageSample]]

    def shots(self, k: int, seed: int) -> list[ImageSample]:
        out = []
        for pool in self.target_pools:
            out.extend(sample_few_shot(pool, k, seed))
        return out

    def subset(self, n_targets: int) -> "Benchmark":
        """The same benchmark restricted to its first ``n_targets`` target domains."""
        return Benchmark(self.source_train, self.source_val, self.source_test, self.target_names[:n_targets],
                         self.target_pools[:n_targets], self.target_tests[:n_targets])

    def train_data(self, k: int, seed: int) -> TrainData:
        return TrainData(self.source_train, self.source_val, self.shots(k, seed), 1 + len(self.target_names))


def make_benchmark(targets, seed: int = 0, source_per_class: int = 100, target_per_class: int = 20,
                   pool_per_class: int = 5, image_size: int = 32) -> Benchmark:
    targets = list(targets)
    src = generate_domain(DEFAULT_DOMAINS["source"], source_per_class, image_size, seed=seed, domain_label=0,
                          tag="source")
    train, val, test = split_source(src, SplitSpec(seed=seed))
    pools, tests = [], []
    for d, name in enumerate(targets, start=1):
        # each domain draws from its own seed stream
        samples = generate_domain(DEFAULT_DOMAINS[name], target_per_class, image_size,
                                  seed=seed + 7919 * d, domain_label=d, tag=name)
        pool, held = split_target(samples, pool_per_class, seed)
        pools.append(pool)
        tests.append(held)
    return Benchmark(train, val, test, targets, pools, tests)


@dataclass
class RunReport:
    mode: str
    source_accuracy: float
    target_accuracy: dict[str, float]
    probe: float
    fit: FitResult = field(repr=False)


def pooled_embeddings(params: ModelParams, bench: Benchmark):
    """Embeddings of all test sets with their domain labels, source first."""
    sets = [bench.source_test] + bench.target_tests
    embs = [predict(params, s)[1] for s in sets]
    labels = np.concatenate([np.full(len(s), d) for d, s in enumerate(sets)])
    return np.concatenate(embs), labels


def evaluate_run(mode: str, result: FitResult, bench: Benchmark) -> RunReport:
    params = result.params
    tgt = {name: accuracy(params, test) for name, test in zip(bench.target_names, bench.target_tests)}
    emb, dom = pooled_embeddings(params, bench)
    return RunReport(mode, accuracy(params, bench.source_test), tgt, domain_probe(emb, dom), result)


def run_mode(bench: Benchmark, mode: str, seed: int = 0, shots: int = 5, epochs: int = 90, lam: float = 1.0,
             backbone: BackboneConfig | None = None, **overrides) -> RunReport:
    config = TrainConfig(mode=mode, epochs=epochs, lam=lam, seed=seed, **overrides)
    data = bench.train_data(shots, seed)
    backbone = backbone or BackboneConfig(num_domains=max(2, data.num_domains))
    result = fit(config, data, backbone)
    report = evaluate_run(mode, result, bench)
    logger.info("%s seed=%d src=%.3f tgt=%s probe=%.3f", mode, seed, report.source_accuracy,
                report.target_accuracy, report.probe)
    return report
