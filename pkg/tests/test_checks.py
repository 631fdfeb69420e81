import numpy as np

from cvpatch import autograd as ag
from cvpatch import checks
from cvpatch import layers as L
from cvpatch.ctensor import ComplexTensor


def test_gradient_suite_passes_on_selected_ops():
    r = checks.gradient_suite(seed=1, shapes=3, only={"sigmoid", "crelu", "complex_linear"})
    assert r.passed and r.cases == 9 and r.max_error <= checks.GRAD_TOL


def test_corrupted_backward_fails_gradient_suite(monkeypatch):
    def bad_sigmoid(x):
        s = 1.0 / (1.0 + np.exp(-x.value))
        # derivative off by a factor of two
        return x.tape.record("sigmoid", (x,), s, lambda g: (2.0 * g * s * (1.0 - s),))

    monkeypatch.setattr(ag, "sigmoid", bad_sigmoid)
    r = checks.gradient_suite(seed=0, shapes=2, only={"sigmoid"})
    assert not r.passed
    assert r.failures and r.failures[0].startswith("sigmoid")
    assert "FAIL" in r.line()


def test_corrupted_conv_fails_structural_oracle(monkeypatch):
    real = L.complex_conv2d

    def flipped(x, a, b, bias=None, stride=1, padding=0):
        out = real(x, a, b, bias, stride, padding)
        v = out.value
        out.value = ComplexTensor(v.real, -v.imag)
        return out

    monkeypatch.setattr(L, "complex_conv2d", flipped)
    assert not checks.conv_suite(seed=0, cases=3).passed


def test_report_lines_name_suite_and_error():
    for r in checks.run_all(seed=0, names=["dft", "fpr95", "loss"]):
        assert r.passed
        line = r.line()
        assert line.startswith(r.name) and "PASS" in line and "max_err=" in line


def test_brute_force_fpr95_oracle_on_hand_case():
    assert checks.brute_force_fpr95([0.9, 0.1], [1, 0]) == 0.0
    assert checks.brute_force_fpr95([0.1, 0.9], [1, 0]) == 1.0
