import numpy as np
import pytest
import torch

from stereoadapt.backbone import BackboneConfig

torch.set_num_threads(1)


@pytest.fixture
def toy_cfg():
    return BackboneConfig.toy()


@pytest.fixture
def tiny_cfg():
    """D=8, one group of two blocks, window 4: small enough for float64 finite differences."""
    return BackboneConfig.toy(embed_dim=8, num_groups=1, blocks_per_group=2, num_heads=2,
                              cab_compress=2, cab_squeeze=2, upsample_feat=8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_difference(loss_fn, param, index, eps=1e-3):
    """Central finite difference of a scalar ``loss_fn()`` w.r.t. ``param[index]``."""
    with torch.no_grad():
        orig = param[index].item()
        param[index] = orig + eps
        up = float(loss_fn())
        param[index] = orig - eps
        down = float(loss_fn())
        param[index] = orig
    return (up - down) / (2 * eps)


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


class KinkWatch:
    """Records the sign pattern entering every ReLU/LeakyReLU so a finite difference that
    straddles a kink can be detected and discarded."""

    def __init__(self, model):
        self.patterns = []
        self.handles = [m.register_forward_hook(self._hook) for m in model.modules()
                        if isinstance(m, (torch.nn.ReLU, torch.nn.LeakyReLU))]

    def _hook(self, module, inputs, output):
        self.patterns[-1].append(inputs[0].detach() > 0)

    def run(self, fn):
        self.patterns.append([])
        return fn()

    def crossed(self):
        base = self.patterns[0]
        return any(not torch.equal(a, b) for other in self.patterns[1:] for a, b in zip(base, other))

    def close(self):
        for h in self.handles:
            h.remove()


def kink_free_difference(loss_fn, model, param, index, eps=1e-3):
    """Central difference, or None when the +/-eps evaluations cross an activation kink."""
    watch = KinkWatch(model)
    try:
        with torch.no_grad():
            orig = param[index].item()
            watch.run(loss_fn)
            param[index] = orig + eps
            up = float(watch.run(loss_fn))
            param[index] = orig - eps
            down = float(watch.run(loss_fn))
            param[index] = orig
        if watch.crossed():
            return None
        return (up - down) / (2 * eps)
    finally:
        watch.close()


def sampled_gradient_check(model, loss_fn, n=20, eps=1e-3, seed=0, names=None, max_draws=2000):
    """Compare autograd with central differences on ``n`` random parameter entries.

    Returns a list of (name, index, fd, analytic) for the accepted samples.
    """
    model.zero_grad()
    loss_fn().backward()
    gen = np.random.default_rng(seed)
    params = [(k, p) for k, p in model.named_parameters() if names is None or k in names]
    out = []
    for _ in range(max_draws):
        if len(out) == n:
            break
        name, p = params[gen.integers(len(params))]
        index = tuple(int(gen.integers(s)) for s in p.shape)
        fd = kink_free_difference(loss_fn, model, p, index, eps)
        if fd is not None:
            out.append((name, index, fd, p.grad[index].item()))
    return out


# -- acceptance summary -----------------------------------------------------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    crit = dict(report.user_properties).get("criterion")
    if crit is None:
        return
    n, title = crit
    detail = dict(report.user_properties).get("measured", "")
    _CRITERIA[n] = (title, "PASS" if report.passed else "FAIL", detail, report.duration)


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            item.user_properties.append(("criterion", tuple(mark.args)))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status, detail, secs = _CRITERIA[n]
        line = f"criterion {n:>2} {status}  {title}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(f"{line}  ({secs:.1f}s)")
