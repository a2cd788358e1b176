import unittest
from fractions import Fraction

import numpy as np

from veille import metrics
from veille.errors import ContractError
from veille.metrics import ConfusionMatrix


def _brute_force(preds, labels):
    tp = sum(1 for p, y in zip(preds, labels) if p == 1 and y == 1)
    tn = sum(1 for p, y in zip(preds, labels) if p == 0 and y == 0)
    fp = sum(1 for p, y in zip(preds, labels) if p == 1 and y == 0)
    fn = sum(1 for p, y in zip(preds, labels) if p == 0 and y == 1)

    def ratio(a, b):
        return None if b == 0 else Fraction(a, b)

    precision, recall = ratio(tp, tp + fp), ratio(tp, tp + fn)
    f1 = f05 = None
    if precision is not None and recall is not None:
        f1 = Fraction(0) if precision + recall == 0 else 2 * precision * recall / (precision + recall)
        q = Fraction(1, 4)
        f05 = Fraction(0) if precision + recall == 0 else (1 + q) * precision * recall / (q * precision + recall)
    return (tp, tn, fp, fn), {
        "accuracy": Fraction(tp + tn, len(labels)),
        "tpr": recall,
        "fpr": ratio(fp, fp + tn),
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "f05": f05,
    }


class TestConfusion(unittest.TestCase):
    def test_examples(self):
        self.assertEqual(metrics.confusion([1, 1, 0, 0], [1, 1, 0, 0]), ConfusionMatrix(2, 2, 0, 0))
        preds = [1, 1, 1, 0, 0, 0, 0, 0, 1, 0]
        labels = [1, 1, 1, 0, 0, 0, 0, 0, 0, 1]
        self.assertEqual(metrics.confusion(preds, labels), ConfusionMatrix(tp=3, tn=5, fp=1, fn=1))
        self.assertEqual(metrics.confusion([0, 0, 0], [1, 1, 1]), ConfusionMatrix(tp=0, tn=0, fp=0, fn=3))

    def test_errors(self):
        with self.assertRaises(ContractError):
            metrics.confusion([1], [1, 0])
        with self.assertRaises(ContractError):
            metrics.confusion([], [])
        with self.assertRaises(ContractError):
            metrics.confusion([2], [1])


class TestReport(unittest.TestCase):
    def test_hand_computed(self):
        rep = metrics.report(ConfusionMatrix(tp=3, tn=5, fp=1, fn=1))
        self.assertEqual(rep.accuracy, 0.8)
        self.assertEqual(rep.tpr, 0.75)
        self.assertAlmostEqual(rep.fpr, 1 / 6, places=12)
        self.assertEqual(rep.precision, 0.75)

    def test_undefined_fpr(self):
        self.assertIsNone(metrics.report(ConfusionMatrix(tp=4, tn=0, fp=0, fn=1)).fpr)

    def test_perfect(self):
        rep = metrics.report(ConfusionMatrix(tp=5, tn=5, fp=0, fn=0))
        self.assertEqual((rep.accuracy, rep.tpr, rep.precision, rep.f1, rep.f05, rep.fpr), (1, 1, 1, 1, 1, 0))

    def test_empty(self):
        with self.assertRaises(ContractError):
            metrics.report(ConfusionMatrix(0, 0, 0, 0))

    def test_random_sets_match_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(1, 30))
            preds = rng.integers(0, 2, size=n).tolist()
            labels = rng.integers(0, 2, size=n).tolist()
            counts, expected = _brute_force(preds, labels)
            cm = metrics.confusion(preds, labels)
            self.assertEqual((cm.tp, cm.tn, cm.fp, cm.fn), counts)
            rep = metrics.report(cm).to_dict()
            for name, value in expected.items():
                if value is None:
                    self.assertIsNone(rep[name], name)
                else:
                    self.assertAlmostEqual(rep[name], float(value), places=12, msg=name)

    def test_swap_positive_class(self):
        cm = ConfusionMatrix(tp=3, tn=5, fp=1, fn=2)
        swapped = metrics.swap_positive_class(cm)
        rep, rep_swapped = metrics.report(cm), metrics.report(swapped)
        self.assertEqual(rep_swapped.tpr, metrics.tnr(cm))
        self.assertEqual(rep_swapped.precision, metrics.npv(cm))
        self.assertEqual(rep_swapped.accuracy, rep.accuracy)


class TestFBeta(unittest.TestCase):
    def test_worked_examples(self):
        self.assertLessEqual(abs(metrics.f_beta(0.5, 1.0, 1.0) - 2 / 3), 1e-9)
        self.assertLessEqual(abs(metrics.f_beta(0.5, 1.0, 0.5) - 0.625 / 1.125), 1e-9)
        self.assertEqual(metrics.f_beta(0.0, 0.0, 0.5), 0.0)

    def test_fixed_point_and_limits(self):
        for x in (0.1, 0.5, 0.9):
            for beta in (0.5, 1.0, 2.0):
                self.assertAlmostEqual(metrics.f_beta(x, x, beta), x, places=12)
        self.assertAlmostEqual(metrics.f_beta(0.3, 0.8, 1e-6), 0.3, delta=1e-4)
        self.assertAlmostEqual(metrics.f_beta(0.3, 0.8, 1e6), 0.8, delta=1e-4)

    def test_f1_is_harmonic_mean(self):
        rng = np.random.default_rng(1)
        for p, r in rng.uniform(0.01, 1.0, size=(100, 2)):
            self.assertAlmostEqual(metrics.f_beta(p, r, 1.0), 2 / (1 / p + 1 / r), delta=1e-12)

    def test_invalid_beta(self):
        with self.assertRaises(ContractError):
            metrics.f_beta(0.5, 0.5, 0.0)


class TestRendering(unittest.TestCase):
    def setUp(self):
        self.rep = metrics.report(ConfusionMatrix(tp=3, tn=5, fp=1, fn=1))

    def test_fraction_table(self):
        table = metrics.render_table(self.rep, "fraction")
        self.assertEqual(table.splitlines()[0].split(), ["Accuracy", "F1", "F0.5"])
        self.assertEqual(table.splitlines()[1].split(), ["0.80", "0.75", "0.75"])

    def test_percent_table(self):
        table = metrics.render_table(self.rep, "percent")
        self.assertEqual(table.splitlines()[1].split(), ["80.0", "75.0", "75.0", "16.7"])

    def test_absent_values(self):
        rep = metrics.report(ConfusionMatrix(tp=0, tn=4, fp=0, fn=0))
        self.assertIn("n/a", metrics.render_table(rep, "fraction"))
        with self.assertRaises(ContractError):
            metrics.render_table(rep, "latex")

    def test_records(self):
        cm = ConfusionMatrix(tp=3, tn=5, fp=1, fn=1)
        records = metrics.report_records(self.rep, cm)
        self.assertEqual([r["metric"] for r in records[:4]], ["tp", "tn", "fp", "fn"])
        self.assertEqual([r["metric"] for r in records[4:]], list(metrics.REPORT_FIELDS))
        self.assertEqual(records[4]["value"], 0.8)


if __name__ == "__main__":
    unittest.main()
