"""
Test script for the MABE Laboratory
Smoke-tests every component end to end; runnable as a script or under pytest
"""

import json
import shutil
import tempfile
from pathlib import Path

import numpy as np


class TestResults:
    __test__ = False

    def __init__(self):
        self.total_tests = 0
        self.passed_tests = 0
        self.failed_tests = 0
        self.errors = []

    def add_test(self, test_name: str, passed: bool, error: str = None):
        self.total_tests += 1
        if passed:
            self.passed_tests += 1
            print(f"✅ {test_name}")
        else:
            self.failed_tests += 1
            print(f"❌ {test_name}")
            if error:
                print(f"   Error: {error}")
                self.errors.append(f"{test_name}: {error}")

    def print_summary(self):
        print("\n" + "=" * 60)
        print("📊 TEST SUMMARY")
        print("=" * 60)
        print(f"Total Tests: {self.total_tests}")
        print(f"Passed: {self.passed_tests}")
        print(f"Failed: {self.failed_tests}")
        print(f"Success Rate: {(self.passed_tests / max(self.total_tests, 1)) * 100:.1f}%")

        if self.errors:
            print("\n❌ ERRORS:")
            for error in self.errors:
                print(f"  - {error}")

        return self.failed_tests == 0


def check_imports():
    """Test if all laboratory modules can be imported"""
    results = TestResults()

    modules_to_test = [
        "core_math",
        "random_streams",
        "q_models",
        "synthetic_tasks",
        "mabe_trainer",
        "decoders",
        "theory_checks",
        "decoder_evaluation",
        "experiment_config",
        "checkpoints",
        "report_generators",
        "experiment_pipeline",
        "cli",
    ]

    for module in modules_to_test:
        try:
            __import__(module)
            results.add_test(f"Import {module}", True)
        except ImportError as e:
            results.add_test(f"Import {module}", False, str(e))

    return results


def check_dependencies():
    """Test if all required dependencies are available"""
    results = TestResults()

    for dep in ["numpy", "scipy", "pandas", "pydantic", "matplotlib", "seaborn"]:
        try:
            __import__(dep)
            results.add_test(f"Dependency {dep}", True)
        except ImportError as e:
            results.add_test(f"Dependency {dep}", False, str(e))

    return results


def check_core_math():
    results = TestResults()
    try:
        from core_math import dual_distribution, mabe_coefficients, softmax

        q = np.array([1.0, 0.0])
        results.add_test("softmax (1, 0)", np.allclose(softmax(q).probs, [0.731059, 0.268941], atol=1e-6))
        results.add_test("dual (1, 0)", np.allclose(dual_distribution(q).probs, [0.9276705, 0.0723295], atol=1e-6))
        results.add_test("MABE(0) coefficients", np.allclose(mabe_coefficients(q, 0, 0.0), [0.0723295, -0.0723295], atol=1e-6))
    except Exception as e:
        results.add_test("Core math", False, str(e))
    return results


def check_theory():
    results = TestResults()
    try:
        from theory_checks import tabular_fixed_point

        report = tabular_fixed_point([1.0, 0.0])
        results.add_test("Fixed point converges", report.converged)
        results.add_test("Fixed point gap 1.278465", abs(report.margin - 1.278465) < 1e-5, f"got {report.margin}")
    except Exception as e:
        results.add_test("Theory checks", False, str(e))
    return results


def check_pipeline():
    """Run a tiny train -> evaluate -> report cycle through the CLI"""
    results = TestResults()
    workdir = Path(tempfile.mkdtemp(prefix="mabe_smoke_"))
    try:
        from cli import cli

        config = {
            "seed": 3,
            "output_dir": str(workdir / "run"),
            "task": {"kind": "noisy_copy", "vocab_size": 4, "length": 2, "eps": 0.1},
            "model": {"kind": "tabular", "order": 1},
            "train": {"steps": 20, "batch_size": 8, "eval_every": 10, "probe_size": 4},
            "decode": {"betas": [1.0], "beam_sizes": [1, 2]},
            "eval_instances": 5,
        }
        config_path = workdir / "config.json"
        config_path.write_text(json.dumps(config), encoding="utf-8")

        for command in ("train", "evaluate", "report"):
            status = cli([command, "--config", str(config_path)])
            results.add_test(f"CLI {command}", status == 0, f"exit status {status}")

        run_dir = workdir / "run"
        for name in ("train_log.csv", "eval_table.csv", "manifest.json", "report/summary.txt", "checkpoints/final.json"):
            results.add_test(f"Output {name}", (run_dir / name).exists())

        status = cli(["train", "--config", str(config_path), "--lambda", "0.5"])
        results.add_test("CLI --lambda override", status == 0, f"exit status {status}")
        bad = cli(["train", "--out", str(workdir / "bad")])
        results.add_test("CLI config error exits 2", bad == 2, f"exit status {bad}")
    except Exception as e:
        results.add_test("Pipeline", False, str(e))
    finally:
        shutil.rmtree(workdir, ignore_errors=True)
    return results


def run_all_tests():
    """Run all tests"""
    print("🧪 MABE LABORATORY - TEST SUITE")
    print("=" * 60)

    all_results = []

    print("\n📦 Testing Dependencies...")
    all_results.append(check_dependencies())

    print("\n📥 Testing Imports...")
    all_results.append(check_imports())

    print("\n🧮 Testing Core Math...")
    all_results.append(check_core_math())

    print("\n🎯 Testing Theory Checks...")
    all_results.append(check_theory())

    print("\n🔧 Testing Pipeline...")
    all_results.append(check_pipeline())

    total_tests = sum(r.total_tests for r in all_results)
    total_passed = sum(r.passed_tests for r in all_results)
    total_failed = sum(r.failed_tests for r in all_results)

    print("\n" + "=" * 60)
    print("🏆 OVERALL TEST RESULTS")
    print("=" * 60)
    print(f"Total Tests: {total_tests}")
    print(f"Passed: {total_passed}")
    print(f"Failed: {total_failed}")
    print(f"Success Rate: {(total_passed / max(total_tests, 1)) * 100:.1f}%")

    if total_failed == 0:
        print("\n🎉 ALL TESTS PASSED! The laboratory is ready to use.")
        return True
    else:
        print(f"\n⚠️  {total_failed} tests failed. Please check the errors above.")
        return False


def test_smoke_suite():
    assert run_all_tests()


if __name__ == "__main__":
    success = run_all_tests()
    raise SystemExit(0 if success else 1)
