import numpy as np
import pytest
import torch

# criterion pass/fail lines collected by tests/test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_line("")
        terminalreporter.write_line("=== acceptance criteria ===")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _fixed_seed():
    torch.manual_seed(0)
    np.random.seed(0)


def fd_gradcheck(make_loss, tensors, eps=1e-4, max_coords=40, rng=None):
    """Compare autograd gradients against central finite differences.

    `make_loss` is a nullary callable returning a scalar that depends on the
    (double-precision, requires_grad) tensors in `tensors`.  Up to
    `max_coords` coordinates per tensor are perturbed.  Returns a list of
    relative errors |fd - analytic| / max(|fd|, |analytic|, 1e-6).
    """
    rng = rng or np.random.default_rng(0)
    loss = make_loss()
    grads = torch.autograd.grad(loss, tensors)
    rel_errors = []
    for tensor, grad in zip(tensors, grads):
        flat = tensor.detach().reshape(-1)
        n = flat.numel()
        coords = (np.arange(n) if n <= max_coords
                  else rng.choice(n, size=max_coords, replace=False))
        for c in coords:
            c = int(c)
            orig = flat[c].item()
            with torch.no_grad():
                flat[c] = orig + eps
                f_plus = float(make_loss())
                flat[c] = orig - eps
                f_minus = float(make_loss())
                flat[c] = orig
            fd = (f_plus - f_minus) / (2 * eps)
            an = float(grad.reshape(-1)[c])
            rel_errors.append(abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    return rel_errors


def assert_fd_ok(rel_errors, frac=0.95, tol=1e-3, hard=1e-2):
    rel = np.asarray(rel_errors)
    share = float((rel <= tol).mean())
    assert share >= frac, f"only {share:.1%} of coords within {tol} (want {frac:.0%})"
    assert rel.max() <= hard, f"worst relative error {rel.max():.2e} > {hard}"
