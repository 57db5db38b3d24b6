# tests/test_evaluation.py
from dataclasses import replace
from unittest.mock import patch

import numpy as np
import pytest

from pipeline.regressors.multitask import MultiTaskHead
from pipeline.regressors.progressive import BaselineNet, ProgressiveNet
from pipeline.tasks.evaluation import evaluate, evaluate_ablation
from poselift.core.errors import ConfigError, DatasetFormatError
from poselift.models.schemas import GeneratorConfig
from poselift.services.skeleton import Dataset
from poselift.services.synthetic import synth_generate, wild_generator_config

CFG = GeneratorConfig(n=60)


@pytest.fixture(scope="module")
def test_set():
    return synth_generate(CFG, 5)


@pytest.fixture(scope="module")
def models():
    return ProgressiveNet(16, 1, seed=1), MultiTaskHead(width=16, seed=2)


class TestEvaluate:
    """Tests for sharded evaluation."""

    def test_shards_match_single_pass(self, test_set, models):
        """Small shards give exactly the single-shard report."""
        net, head = models
        whole = evaluate(net, head, test_set)
        with patch("pipeline.tasks.evaluation.SHARD_SIZE", 7):
            sharded = evaluate(net, head, test_set)
        assert sharded.report == whole.report
        assert np.array_equal(sharded.errors, whole.errors)

    def test_thread_count_independent(self, test_set, models):
        """One worker and four workers produce identical reports."""
        net, head = models
        with patch("pipeline.tasks.evaluation.SHARD_SIZE", 16):
            single = evaluate(net, head, test_set, threads=1)
            pooled = evaluate(net, head, test_set, threads=4)
        assert single.report == pooled.report

    def test_report_contents(self, test_set, models):
        """A head-driven run reports attribute accuracy and the curve."""
        net, head = models
        result = evaluate(net, head, test_set)
        report = result.report
        assert report.method == "progressive+attr"
        assert report.sample_count == len(test_set)
        assert len(report.per_joint_attr_acc) == 9
        assert report.domain_acc is None
        assert result.errors.shape == (len(test_set), 16)
        assert len(result.thresholds) == len(result.curve) == 31
        assert result.curve[0] == 0.0

    def test_oracle_attributes(self, test_set, models):
        """Oracle runs need no head and skip attribute accuracy."""
        net, _ = models
        report = evaluate(net, None, test_set, oracle_attrs=True).report
        assert report.per_joint_attr_acc is None
        assert report.attr_acc_mean is None

    def test_missing_head_and_oracle(self, test_set, models):
        """An attribute-reading net needs a head or the oracle."""
        net, _ = models
        with pytest.raises(ConfigError):
            evaluate(net, None, test_set)

    def test_domain_accuracy_with_wild(self, test_set, models):
        """Passing a Labeled2D set adds the domain-classifier accuracy."""
        net, head = models
        wild = synth_generate(wild_generator_config(CFG, 20), 6)
        report = evaluate(net, head, test_set, wild=wild).report
        assert 0.0 <= report.domain_acc <= 1.0

    def test_empty_dataset(self, test_set, models):
        """An empty dataset cannot be evaluated."""
        net, head = models
        with pytest.raises(ConfigError, match="empty"):
            evaluate(net, head, Dataset((), test_set.meta))

    def test_needs_pose3d(self, models):
        """Records without pose3d cannot be scored."""
        net, head = models
        wild = synth_generate(wild_generator_config(CFG, 5), 6)
        stripped = wild.with_records([replace(wild.records[0], pose3d=None), *wild.records[1:]])
        with pytest.raises(DatasetFormatError, match="lack it"):
            evaluate(net, head, stripped)


class TestAblation:
    """Tests for the three-way comparison."""

    def test_methods_and_shared_dataset(self, test_set, models):
        """Each named model is evaluated on the same records."""
        net, head = models
        reports = evaluate_ablation(
            {
                "baseline": (BaselineNet(16, 1), None),
                "progressive": (ProgressiveNet(16, 1, use_attributes=False), None),
                "progressive+attr": (net, head),
            },
            test_set,
        )
        assert list(reports) == ["baseline", "progressive", "progressive+attr"]
        assert {r.sample_count for r in reports.values()} == {len(test_set)}
        assert reports["baseline"].per_joint_attr_acc is None
        assert reports["progressive+attr"].per_joint_attr_acc is not None
