import functools

import numpy as np
import pytest

from jamflow.condnet import CondSet, JamModel, ModelConfig

# gradient checks run on this float64 model: 6 frames, hidden 8
TINY = ModelConfig(
    n_layers=2, hidden=8, heads=2, ffn_hidden=12, latent_channels=4, lyric_dim=4, style_dim=3,
    dur_dim=4, vocab=6, upsample=2, time_features=4, dur_features=4, pos_kernel=3,
)
TINY_FRAMES = 6


def tiny_model(seed=0, jitter=0.1):
    """Float64 tiny model with every parameter pushed off its init (pad_bias included)."""
    m = JamModel(TINY, dtype=np.float64)
    rng = np.random.default_rng(seed)
    for p in m.params.values():
        p.data = p.data + jitter * rng.standard_normal(p.data.shape)
    return m


def tiny_cond(rng, batch=2, frames=TINY_FRAMES, valid=None, **presence):
    if valid is None:
        valid = [frames - 2 + i % 2 for i in range(batch)]
    valid = np.asarray(valid)
    return CondSet(
        grid=rng.integers(0, TINY.vocab, (batch, frames * TINY.upsample)),
        style=rng.standard_normal((batch, TINY.style_dim)),
        t_target=valid / 5.0,
        pad_mask=np.arange(frames)[None, :] >= valid[:, None],
        lyric_present=np.asarray(presence.get("lyric", np.ones(batch, bool))),
        style_present=np.asarray(presence.get("style", np.ones(batch, bool))),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance verdicts

ACCEPTANCE: dict[int, str] = {}


def criterion(number, title):
    """Record one PASS/FAIL line for the wrapped acceptance test.

    The test returns an optional detail string; any exception counts as FAIL
    and is re-raised.
    """

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                detail = fn(*args, **kwargs)
            except BaseException as exc:
                _verdict(number, title, False, f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"[:160])
                raise
            _verdict(number, title, True, detail or "")

        return run

    return wrap


def _verdict(number, title, ok, detail):
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}: {title}" + (f" [{detail}]" if detail else "")
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
